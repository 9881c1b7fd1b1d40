#pragma once

#include <string>
#include <vector>

#include "gbert/ontology.hpp"
#include "gbert/param_store.hpp"
#include "gbert/rng.hpp"
#include "gbert/tape.hpp"

namespace gbert {

/// Two-stage graph-attention embedding of an ontology tree.
///
/// Stage 1 enhances every node from its direct children using the initial
/// embedding matrix only (single pass, no recursion); stage 2 produces the
/// final leaf embeddings by attending over each leaf's full ancestor chain.
/// Per head: alpha = softmax_j(LeakyReLU(a^T [W h_c || W h_j])) over the
/// neighborhood {c} u relatives, output = act(sum_j alpha_j W h_j), and the
/// K head outputs are concatenated.
template <typename Scalar>
class GraphEmbedding {
 public:
  using VarId = typename Tape<Scalar>::VarId;

  struct Config {
    std::size_t d0 = 75;        // initial embedding width
    std::size_t heads = 4;      // K
    std::size_t head_dim = 75;  // m; stage output width is K*m
    Scalar attn_slope = Scalar(0.2);
    Scalar act_slope = Scalar(0.2);
  };

  struct AggregateTrace {
    std::vector<VarId> head_alphas;  // one (|N|, 1) column per head
    VarId out = 0;                   // (1, K*m)
  };

  GraphEmbedding(const OntologyTree* tree, std::string prefix, Config cfg)
      : tree_(tree), prefix_(std::move(prefix)), cfg_(cfg) {}

  const Config& config() const { return cfg_; }
  const OntologyTree& tree() const { return *tree_; }
  std::size_t out_dim() const { return cfg_.heads * cfg_.head_dim; }

  /// Registers W_e plus per-stage, per-head (W, a). Init: uniform with
  /// fan-in scaling, matching the rest of the model.
  void register_params(ParamStore<Scalar>& store, Rng& rng) const {
    store.add(prefix_ + ".We", uniform_init(rng, tree_->size(), cfg_.d0, cfg_.d0));
    for (int stage = 1; stage <= 2; ++stage) {
      const std::size_t in_dim = stage == 1 ? cfg_.d0 : out_dim();
      for (std::size_t k = 0; k < cfg_.heads; ++k) {
        const std::string hp = head_prefix(stage, k);
        store.add(hp + ".W", uniform_init(rng, cfg_.head_dim, in_dim, in_dim));
        store.add(hp + ".a", uniform_init(rng, 2 * cfg_.head_dim, 1, 2 * cfg_.head_dim));
      }
    }
  }

  /// Full two-stage pass; returns the (|leaves|, K*m) matrix whose rows
  /// follow tree().leaves() order.
  VarId build(Tape<Scalar>& tape) const {
    return build_stage2(tape, build_stage1(tape));
  }

  /// Stage 1: every node aggregated over {self} u direct children, reading
  /// only initial embeddings. Returns (|O|, K*m) in node-index order.
  VarId build_stage1(Tape<Scalar>& tape) const {
    const VarId we = tape.param(prefix_ + ".We");
    const auto heads = head_ids(tape, 1);
    std::vector<VarId> rows;
    rows.reserve(tree_->size());
    for (std::size_t c = 0; c < tree_->size(); ++c) {
      rows.push_back(aggregate(tape, we, c, tree_->ch(c), heads).out);
    }
    return tape.concat(rows, 0);
  }

  /// Stage 2: each leaf aggregated over {self} u all ancestors, reading the
  /// stage-1 matrix. Returns (|leaves|, K*m) in leaves() order.
  VarId build_stage2(Tape<Scalar>& tape, VarId h_e) const {
    const auto heads = head_ids(tape, 2);
    std::vector<VarId> rows;
    rows.reserve(tree_->leaves().size());
    for (const std::size_t leaf : tree_->leaves()) {
      rows.push_back(aggregate(tape, h_e, leaf, tree_->pa(leaf), heads).out);
    }
    return tape.concat(rows, 0);
  }

  /// Traced variants used by the attention-property tests.
  AggregateTrace stage1_node_trace(Tape<Scalar>& tape, std::size_t node) const {
    return aggregate(tape, tape.param(prefix_ + ".We"), node, tree_->ch(node), head_ids(tape, 1));
  }
  AggregateTrace stage2_leaf_trace(Tape<Scalar>& tape, VarId h_e, std::size_t leaf) const {
    return aggregate(tape, h_e, leaf, tree_->pa(leaf), head_ids(tape, 2));
  }

 private:
  struct HeadIds {
    VarId w;
    VarId a_center;  // (m, 1) half applied to the center projection
    VarId a_relative;
  };

  const OntologyTree* tree_;
  std::string prefix_;
  Config cfg_;

  std::string head_prefix(int stage, std::size_t k) const {
    return prefix_ + ".s" + std::to_string(stage) + ".h" + std::to_string(k);
  }

  std::vector<HeadIds> head_ids(Tape<Scalar>& tape, int stage) const {
    std::vector<HeadIds> out;
    out.reserve(cfg_.heads);
    for (std::size_t k = 0; k < cfg_.heads; ++k) {
      const std::string hp = head_prefix(stage, k);
      HeadIds h;
      h.w = tape.param(hp + ".W");
      const VarId a = tape.param(hp + ".a");
      h.a_center = tape.slice(a, 0, 0, cfg_.head_dim);
      h.a_relative = tape.slice(a, 0, cfg_.head_dim, cfg_.head_dim);
      out.push_back(h);
    }
    return out;
  }

  /// One neighborhood aggregation: center row first, then relatives in the
  /// order given (children in index order; ancestors nearest-first).
  AggregateTrace aggregate(Tape<Scalar>& tape, VarId source, std::size_t center,
                           const std::vector<std::size_t>& relatives,
                           const std::vector<HeadIds>& heads) const {
    std::vector<VarId> n_rows;
    n_rows.reserve(relatives.size() + 1);
    n_rows.push_back(tape.slice(source, 0, center, 1));
    for (const std::size_t r : relatives) {
      n_rows.push_back(tape.slice(source, 0, r, 1));
    }
    const VarId nbhd = n_rows.size() == 1 ? n_rows[0] : tape.concat(n_rows, 0);
    AggregateTrace trace;
    std::vector<VarId> head_outs;
    head_outs.reserve(heads.size());
    for (const HeadIds& h : heads) {
      const VarId proj = tape.matmul(nbhd, h.w, false, true);        // (|N|, m)
      const VarId proj_c = tape.slice(proj, 0, 0, 1);                // (1, m)
      const VarId logit_c = tape.matmul(proj_c, h.a_center);         // (1, 1)
      const VarId logit_j = tape.matmul(proj, h.a_relative);         // (|N|, 1)
      const VarId logits = tape.leaky_relu(tape.add(logit_j, logit_c), cfg_.attn_slope);
      const VarId alpha = tape.softmax(logits, 0);
      const VarId mixed = tape.matmul(alpha, proj, true, false);     // (1, m)
      head_outs.push_back(tape.leaky_relu(mixed, cfg_.act_slope));
      trace.head_alphas.push_back(alpha);
    }
    trace.out = head_outs.size() == 1 ? head_outs[0] : tape.concat(head_outs, 1);
    return trace;
  }

  static Tensor<Scalar> uniform_init(Rng& rng, std::size_t r, std::size_t c,
                                     std::size_t fan_in) {
    const Scalar bound = Scalar(1) / std::sqrt(Scalar(fan_in));
    Tensor<Scalar> t = Tensor<Scalar>::zeros({r, c});
    for (auto& v : t.values) {
      v = Scalar(rng.uniform(-double(bound), double(bound)));
    }
    return t;
  }
};

}  // namespace gbert
