#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gbert/param_store.hpp"
#include "gbert/rng.hpp"
#include "gbert/tape.hpp"

namespace gbert {

/// Multi-layer Transformer over the token set of one visit: a learned CLS
/// row followed by the visit's code embedding rows. There is deliberately no
/// position-embedding table and no separator token, so the encoder sees an
/// unordered set; the final state at position 0 is the visit embedding.
/// Blocks are post-norm residual: LN(x + MHA(x)) then LN(x + FFN(x)), GELU
/// inside the FFN. One instance serves both code types (shared weights).
template <typename Scalar>
class VisitEncoder {
 public:
  using VarId = typename Tape<Scalar>::VarId;

  struct Config {
    std::size_t hidden = 300;
    std::size_t ffn = 300;
    std::size_t layers = 2;
    std::size_t heads = 4;
  };

  struct Trace {
    // attn[l][h] is the (n_tokens, n_tokens) weight matrix of head h in layer l
    std::vector<std::vector<VarId>> attn;
    VarId states = 0;  // (n_tokens, hidden) final layer
    VarId cls = 0;     // (1, hidden)
  };

  VisitEncoder(std::string prefix, Config cfg) : prefix_(std::move(prefix)), cfg_(cfg) {
    if (cfg_.hidden % cfg_.heads != 0) {
      throw ValidationError("encoder: hidden width " + std::to_string(cfg_.hidden) +
                            " not divisible by " + std::to_string(cfg_.heads) + " heads");
    }
  }

  const Config& config() const { return cfg_; }

  void register_params(ParamStore<Scalar>& store, Rng& rng) const {
    store.add(prefix_ + ".cls", uniform_init(rng, 1, cfg_.hidden, cfg_.hidden));
    store.add(prefix_ + ".mask", uniform_init(rng, 1, cfg_.hidden, cfg_.hidden));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string lp = layer_prefix(l);
      for (const char* w : {"Wq", "Wk", "Wv", "Wo"}) {
        store.add(lp + ".attn." + w, uniform_init(rng, cfg_.hidden, cfg_.hidden, cfg_.hidden));
      }
      // No key bias: softmax cancels a per-row constant shift exactly, so a
      // key bias would be a dead parameter with identically zero gradient.
      for (const char* b : {"bq", "bv", "bo"}) {
        store.add(lp + ".attn." + b, Tensor<Scalar>::zeros({1, cfg_.hidden}));
      }
      store.add(lp + ".ln1.g", Tensor<Scalar>::full({1, cfg_.hidden}, Scalar(1)));
      store.add(lp + ".ln1.b", Tensor<Scalar>::zeros({1, cfg_.hidden}));
      store.add(lp + ".ffn.W1", uniform_init(rng, cfg_.hidden, cfg_.ffn, cfg_.hidden));
      store.add(lp + ".ffn.b1", Tensor<Scalar>::zeros({1, cfg_.ffn}));
      store.add(lp + ".ffn.W2", uniform_init(rng, cfg_.ffn, cfg_.hidden, cfg_.ffn));
      store.add(lp + ".ffn.b2", Tensor<Scalar>::zeros({1, cfg_.hidden}));
      store.add(lp + ".ln2.g", Tensor<Scalar>::full({1, cfg_.hidden}, Scalar(1)));
      store.add(lp + ".ln2.b", Tensor<Scalar>::zeros({1, cfg_.hidden}));
    }
  }

  VarId cls_row(Tape<Scalar>& tape) const { return tape.param(prefix_ + ".cls"); }
  VarId mask_row(Tape<Scalar>& tape) const { return tape.param(prefix_ + ".mask"); }

  /// Encodes [CLS] + code rows; each element of `code_rows` is a (1, hidden)
  /// node. An empty list encodes the bare CLS token.
  Trace encode(Tape<Scalar>& tape, const std::vector<VarId>& code_rows) const {
    std::vector<VarId> rows;
    rows.reserve(code_rows.size() + 1);
    rows.push_back(cls_row(tape));
    rows.insert(rows.end(), code_rows.begin(), code_rows.end());
    return encode_token_matrix(tape, rows.size() == 1 ? rows[0] : tape.concat(rows, 0));
  }

  /// Lower-level entry: `tokens` is the full (n_tokens, hidden) matrix whose
  /// first row is already the CLS embedding.
  Trace encode_token_matrix(Tape<Scalar>& tape, VarId tokens) const {
    Trace trace;
    VarId x = tokens;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      trace.attn.emplace_back();
      x = layer(tape, x, l, trace.attn.back());
    }
    trace.states = x;
    trace.cls = tape.slice(x, 0, 0, 1);
    return trace;
  }

 private:
  std::string prefix_;
  Config cfg_;

  std::string layer_prefix(std::size_t l) const {
    return prefix_ + ".l" + std::to_string(l);
  }

  VarId layer(Tape<Scalar>& tape, VarId x, std::size_t l,
              std::vector<VarId>& attn_out) const {
    const std::string lp = layer_prefix(l);
    const std::size_t dh = cfg_.hidden / cfg_.heads;
    const VarId q = tape.add(tape.matmul(x, tape.param(lp + ".attn.Wq")),
                             tape.param(lp + ".attn.bq"));
    const VarId k = tape.matmul(x, tape.param(lp + ".attn.Wk"));
    const VarId v = tape.add(tape.matmul(x, tape.param(lp + ".attn.Wv")),
                             tape.param(lp + ".attn.bv"));
    std::vector<VarId> head_outs;
    head_outs.reserve(cfg_.heads);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const VarId qh = tape.slice(q, 1, h * dh, dh);
      const VarId kh = tape.slice(k, 1, h * dh, dh);
      const VarId vh = tape.slice(v, 1, h * dh, dh);
      const VarId scores =
          tape.scale(tape.matmul(qh, kh, false, true), Scalar(1) / std::sqrt(Scalar(dh)));
      const VarId weights = tape.softmax(scores, 1);
      attn_out.push_back(weights);
      head_outs.push_back(tape.matmul(weights, vh));
    }
    const VarId mixed = head_outs.size() == 1 ? head_outs[0] : tape.concat(head_outs, 1);
    const VarId attn = tape.add(tape.matmul(mixed, tape.param(lp + ".attn.Wo")),
                                tape.param(lp + ".attn.bo"));
    const VarId x1 = tape.layer_norm(tape.add(x, attn), tape.param(lp + ".ln1.g"),
                                     tape.param(lp + ".ln1.b"));
    const VarId hid = tape.gelu(
        tape.add(tape.matmul(x1, tape.param(lp + ".ffn.W1")), tape.param(lp + ".ffn.b1")));
    const VarId ffn =
        tape.add(tape.matmul(hid, tape.param(lp + ".ffn.W2")), tape.param(lp + ".ffn.b2"));
    return tape.layer_norm(tape.add(x1, ffn), tape.param(lp + ".ln2.g"),
                           tape.param(lp + ".ln2.b"));
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
