#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "gbert/error.hpp"
#include "gbert/ontology.hpp"
#include "gbert/ontology_embedding.hpp"
#include "gbert/param_store.hpp"
#include "gbert/records.hpp"
#include "gbert/rng.hpp"
#include "gbert/tape.hpp"
#include "gbert/tensor.hpp"
#include "gbert/visit_encoder.hpp"

namespace gbert {

/// Multi-label binary cross-entropy summed over labels. `logits` and `targets`
/// are both (1, n); targets are 0/1 indicators. A denormal-min offset keeps
/// log() finite when a sigmoid saturates to exactly 0 or 1.
template <typename Scalar>
typename Tape<Scalar>::VarId bce_with_logits(Tape<Scalar>& tape,
                                             typename Tape<Scalar>::VarId logits,
                                             typename Tape<Scalar>::VarId targets) {
  constexpr Scalar tiny = std::numeric_limits<Scalar>::min();
  const auto p = tape.sigmoid(logits);
  const auto log_p = tape.log(tape.add_scalar(p, tiny));
  const auto log_q = tape.log(tape.add_scalar(tape.add_scalar(tape.scale(p, Scalar(-1)), Scalar(1)), tiny));
  const auto not_t = tape.add_scalar(tape.scale(targets, Scalar(-1)), Scalar(1));
  const auto pos = tape.sum(tape.mul(targets, log_p), -1);
  const auto neg = tape.sum(tape.mul(not_t, log_q), -1);
  return tape.scale(tape.add(pos, neg), Scalar(-1));
}

/// Full model: per-type ontology embeddings (two-stage graph attention, or a
/// plain learnable leaf table when `no_graph` is set), one weight-shared visit
/// encoder for both code types, masked self-/dual-prediction heads, and the
/// medication recommendation head.
///
/// Parameter registration order is fixed (ontology embeddings, encoder,
/// pre-training heads, recommendation head) so checkpoints and optimizer
/// state are reproducible.
template <typename Scalar>
class GBertModel {
 public:
  using VarId = typename Tape<Scalar>::VarId;
  using Trace = typename VisitEncoder<Scalar>::Trace;

  struct Dims {
    std::size_t d0 = 75;         // initial node embedding width
    std::size_t gat_heads = 4;   // graph attention heads; head dim = hidden / gat_heads
    std::size_t hidden = 300;    // code embedding width = encoder width
    std::size_t ffn = 300;
    std::size_t layers = 2;
    std::size_t enc_heads = 4;
    Scalar attn_slope = Scalar(0.2);
    Scalar act_slope = Scalar(0.2);
    bool no_graph = false;
  };

  GBertModel(OntologyTree dx_tree, OntologyTree rx_tree, Dims dims)
      : dx_tree_(std::move(dx_tree)),
        rx_tree_(std::move(rx_tree)),
        dims_(dims),
        encoder_("enc", {dims.hidden, dims.ffn, dims.layers, dims.enc_heads}) {
    if (dims_.hidden % dims_.gat_heads != 0) {
      throw ValidationError("model: hidden width " + std::to_string(dims_.hidden) +
                            " not divisible by " + std::to_string(dims_.gat_heads) +
                            " graph attention heads");
    }
    const typename GraphEmbedding<Scalar>::Config gcfg{
        dims_.d0, dims_.gat_heads, dims_.hidden / dims_.gat_heads, dims_.attn_slope,
        dims_.act_slope};
    onto_dx_ = GraphEmbedding<Scalar>(&dx_tree_, "onto.dx", gcfg);
    onto_rx_ = GraphEmbedding<Scalar>(&rx_tree_, "onto.rx", gcfg);
    leaf_pos_dx_ = leaf_positions(dx_tree_);
    leaf_pos_rx_ = leaf_positions(rx_tree_);
  }

  // GraphEmbedding members point at the trees owned by this object.
  GBertModel(const GBertModel&) = delete;
  GBertModel& operator=(const GBertModel&) = delete;

  const Dims& dims() const { return dims_; }
  const VisitEncoder<Scalar>& encoder() const { return encoder_; }

  const OntologyTree& tree(CodeType t) const {
    return t == CodeType::kDiagnosis ? dx_tree_ : rx_tree_;
  }

  /// Leaf vocabulary size for one code type.
  std::size_t vocab(CodeType t) const { return tree(t).leaves().size(); }

  /// Row of `code_matrix` holding a given leaf node.
  std::size_t leaf_pos(CodeType t, std::size_t node) const {
    const auto& pos = t == CodeType::kDiagnosis ? leaf_pos_dx_ : leaf_pos_rx_;
    if (node >= pos.size() || pos[node] == kNotLeaf) {
      throw ValidationError("model: node " + std::to_string(node) + " is not a " +
                            std::string(code_type_name(t)) + " leaf");
    }
    return pos[node];
  }

  void register_params(ParamStore<Scalar>& store, Rng& rng) const {
    if (dims_.no_graph) {
      store.add("embed.dx.table",
                uniform_init(rng, vocab(CodeType::kDiagnosis), dims_.hidden, dims_.hidden));
      store.add("embed.rx.table",
                uniform_init(rng, vocab(CodeType::kMedication), dims_.hidden, dims_.hidden));
    } else {
      onto_dx_->register_params(store, rng);
      onto_rx_->register_params(store, rng);
    }
    encoder_.register_params(store, rng);
    register_head(store, rng, "heads.self.dx", vocab(CodeType::kDiagnosis));
    register_head(store, rng, "heads.self.rx", vocab(CodeType::kMedication));
    register_head(store, rng, "heads.dual.d_from_m", vocab(CodeType::kDiagnosis));
    register_head(store, rng, "heads.dual.m_from_d", vocab(CodeType::kMedication));
    store.add("pred.W",
              uniform_init(rng, vocab(CodeType::kMedication), 3 * dims_.hidden, 3 * dims_.hidden));
    store.add("pred.b", Tensor<Scalar>::zeros({1, vocab(CodeType::kMedication)}));
  }

  /// All leaf-code embeddings for one type, (vocab, hidden), rows in
  /// tree.leaves() order. Build once per tape and slice rows from it; the
  /// graph attention stages are shared by every visit on the tape.
  VarId code_matrix(Tape<Scalar>& tape, CodeType t) const {
    if (dims_.no_graph) {
      return tape.param(t == CodeType::kDiagnosis ? "embed.dx.table" : "embed.rx.table");
    }
    return (t == CodeType::kDiagnosis ? *onto_dx_ : *onto_rx_).build(tape);
  }

  VarId code_row(Tape<Scalar>& tape, VarId matrix, CodeType t, std::size_t node) const {
    return tape.slice(matrix, 0, leaf_pos(t, node), 1);
  }

  /// Embedding rows for a visit's code set. When `masked` is given, flagged
  /// positions read the shared MASK embedding instead of the code's row.
  std::vector<VarId> code_rows(Tape<Scalar>& tape, VarId matrix, CodeType t,
                               const std::vector<std::size_t>& codes,
                               const std::vector<bool>* masked = nullptr) const {
    if (masked != nullptr && masked->size() != codes.size()) {
      throw ValidationError("model: mask flag count does not match code count");
    }
    std::vector<VarId> rows;
    rows.reserve(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i) {
      rows.push_back(masked != nullptr && (*masked)[i] ? encoder_.mask_row(tape)
                                                       : code_row(tape, matrix, t, codes[i]));
    }
    return rows;
  }

  /// [CLS] + code tokens through the shared encoder; `trace.cls` is the visit
  /// embedding.
  Trace encode_visit(Tape<Scalar>& tape, VarId matrix, CodeType t,
                     const std::vector<std::size_t>& codes,
                     const std::vector<bool>* masked = nullptr) const {
    return encoder_.encode(tape, code_rows(tape, matrix, t, codes, masked));
  }

  /// Self-prediction logits: recover a visit's own code set of type `t` from
  /// its visit embedding. (1, vocab(t)).
  VarId self_logits(Tape<Scalar>& tape, CodeType t, VarId v) const {
    return head(tape, t == CodeType::kDiagnosis ? "heads.self.dx" : "heads.self.rx", v);
  }

  /// Dual-prediction logits: predict the `target` code set from the OTHER
  /// type's visit embedding. (1, vocab(target)).
  VarId dual_logits(Tape<Scalar>& tape, CodeType target, VarId v_other) const {
    return head(tape,
                target == CodeType::kDiagnosis ? "heads.dual.d_from_m" : "heads.dual.m_from_d",
                v_other);
  }

  /// Recommendation logits from the concatenated (1, 3*hidden) feature row
  /// [mean past dx visit embeddings | mean past rx | current dx]. (1, |rx vocab|).
  VarId recommend_logits(Tape<Scalar>& tape, VarId features) const {
    return tape.add(tape.matmul(features, tape.param("pred.W"), false, true), tape.param("pred.b"));
  }

  /// 0/1 indicator row over the leaf vocabulary, (1, vocab(t)).
  Tensor<Scalar> multi_hot(CodeType t, const std::vector<std::size_t>& codes) const {
    Tensor<Scalar> out = Tensor<Scalar>::zeros({1, vocab(t)});
    for (const std::size_t node : codes) {
      out.values[leaf_pos(t, node)] = Scalar(1);
    }
    return out;
  }

  /// Code matrix evaluated against the store's current values, detached from
  /// any tape. Evaluation paths compute this once per checkpoint state and
  /// feed plain rows back in as inputs.
  Tensor<Scalar> frozen_code_matrix(ParamStore<Scalar>& store, CodeType t) const {
    Tape<Scalar> tape(&store);
    return tape.value(code_matrix(tape, t));
  }

  /// One leaf row of a frozen code matrix as a (1, hidden) tensor.
  Tensor<Scalar> frozen_code_row(const Tensor<Scalar>& matrix, CodeType t,
                                 std::size_t node) const {
    const std::size_t r = leaf_pos(t, node);
    Tensor<Scalar> row = Tensor<Scalar>::zeros({1, matrix.cols()});
    for (std::size_t c = 0; c < matrix.cols(); ++c) {
      row.values[c] = matrix.at(r, c);
    }
    return row;
  }

 private:
  static constexpr std::size_t kNotLeaf = static_cast<std::size_t>(-1);

  static std::vector<std::size_t> leaf_positions(const OntologyTree& tree) {
    std::vector<std::size_t> pos(tree.size(), kNotLeaf);
    for (std::size_t i = 0; i < tree.leaves().size(); ++i) {
      pos[tree.leaves()[i]] = i;
    }
    return pos;
  }

  static Tensor<Scalar> uniform_init(Rng& rng, std::size_t r, std::size_t c, std::size_t fan_in) {
    Tensor<Scalar> t = Tensor<Scalar>::zeros({r, c});
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.values) {
      v = static_cast<Scalar>(rng.uniform(-bound, bound));
    }
    return t;
  }

  void register_head(ParamStore<Scalar>& store, Rng& rng, const std::string& prefix,
                     std::size_t n_out) const {
    store.add(prefix + ".W1", uniform_init(rng, dims_.hidden, dims_.hidden, dims_.hidden));
    store.add(prefix + ".b1", Tensor<Scalar>::zeros({1, dims_.hidden}));
    store.add(prefix + ".W2", uniform_init(rng, dims_.hidden, n_out, dims_.hidden));
    store.add(prefix + ".b2", Tensor<Scalar>::zeros({1, n_out}));
  }

  /// Two-layer prediction head with GELU hidden activation: v (1, hidden) ->
  /// logits (1, n_out).
  VarId head(Tape<Scalar>& tape, const std::string& prefix, VarId v) const {
    const auto h = tape.gelu(
        tape.add(tape.matmul(v, tape.param(prefix + ".W1")), tape.param(prefix + ".b1")));
    return tape.add(tape.matmul(h, tape.param(prefix + ".W2")), tape.param(prefix + ".b2"));
  }

  OntologyTree dx_tree_;
  OntologyTree rx_tree_;
  Dims dims_;
  std::optional<GraphEmbedding<Scalar>> onto_dx_;
  std::optional<GraphEmbedding<Scalar>> onto_rx_;
  VisitEncoder<Scalar> encoder_;
  std::vector<std::size_t> leaf_pos_dx_;
  std::vector<std::size_t> leaf_pos_rx_;
};

}  // namespace gbert
