#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "gbert/adam.hpp"
#include "gbert/error.hpp"
#include "gbert/model.hpp"
#include "gbert/records.hpp"
#include "gbert/rng.hpp"
#include "gbert/tape.hpp"

namespace gbert {

/// One visit with per-code mask flags. Targets always remain the original
/// full code sets; masking affects only the encoder input rows.
struct MaskedVisit {
  Visit visit;
  std::vector<bool> dx_masked;
  std::vector<bool> rx_masked;
};

/// Independently replaces each code by the MASK token with probability `rate`.
inline MaskedVisit mask_codes(const Visit& visit, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ValidationError("mask rate " + std::to_string(rate) + " outside [0, 1)");
  }
  MaskedVisit m;
  m.visit = visit;
  m.dx_masked.reserve(visit.dx.size());
  m.rx_masked.reserve(visit.rx.size());
  for (std::size_t i = 0; i < visit.dx.size(); ++i) {
    m.dx_masked.push_back(rng.bernoulli(rate));
  }
  for (std::size_t i = 0; i < visit.rx.size(); ++i) {
    m.rx_masked.push_back(rng.bernoulli(rate));
  }
  return m;
}

/// Pre-training pool: every visit of every given record becomes an
/// independent single-visit example. Callers pass single-visit patients plus
/// the TRAINING multi-visit patients only, so validation and test visits
/// never reach pre-training.
inline std::vector<Visit> pretrain_pool(const std::vector<PatientRecord>& singles,
                                        const std::vector<PatientRecord>& train_multi) {
  std::vector<Visit> pool;
  for (const auto* group : {&singles, &train_multi}) {
    for (const PatientRecord& r : *group) {
      pool.insert(pool.end(), r.visits.begin(), r.visits.end());
    }
  }
  return pool;
}

/// Graph nodes of the three loss components and their sum, each a batch mean.
template <typename Scalar>
struct PretrainLossNodes {
  typename Tape<Scalar>::VarId se_d = 0;
  typename Tape<Scalar>::VarId se_m = 0;
  typename Tape<Scalar>::VarId du = 0;
  typename Tape<Scalar>::VarId total = 0;
};

/// Builds the combined masked-prediction loss for one mini-batch:
/// per visit, self-prediction of each code type from its own masked visit
/// embedding plus dual prediction of each type from the other type's
/// embedding, all as full-vocabulary multi-label BCE; components are averaged
/// over the batch and summed.
template <typename Scalar>
PretrainLossNodes<Scalar> build_pretrain_loss(const GBertModel<Scalar>& model,
                                              Tape<Scalar>& tape,
                                              const std::vector<MaskedVisit>& batch) {
  if (batch.empty()) {
    throw ValidationError("pre-training batch is empty");
  }
  const auto dx_matrix = model.code_matrix(tape, CodeType::kDiagnosis);
  const auto rx_matrix = model.code_matrix(tape, CodeType::kMedication);
  using VarId = typename Tape<Scalar>::VarId;
  std::vector<VarId> se_d_terms, se_m_terms, du_terms;
  for (const MaskedVisit& mv : batch) {
    const auto v_d =
        model.encode_visit(tape, dx_matrix, CodeType::kDiagnosis, mv.visit.dx, &mv.dx_masked).cls;
    const auto v_m =
        model.encode_visit(tape, rx_matrix, CodeType::kMedication, mv.visit.rx, &mv.rx_masked).cls;
    const auto target_d = tape.input(model.multi_hot(CodeType::kDiagnosis, mv.visit.dx));
    const auto target_m = tape.input(model.multi_hot(CodeType::kMedication, mv.visit.rx));
    se_d_terms.push_back(
        bce_with_logits(tape, model.self_logits(tape, CodeType::kDiagnosis, v_d), target_d));
    se_m_terms.push_back(
        bce_with_logits(tape, model.self_logits(tape, CodeType::kMedication, v_m), target_m));
    const auto du_d =
        bce_with_logits(tape, model.dual_logits(tape, CodeType::kDiagnosis, v_m), target_d);
    const auto du_m =
        bce_with_logits(tape, model.dual_logits(tape, CodeType::kMedication, v_d), target_m);
    du_terms.push_back(tape.add(du_d, du_m));
  }
  const auto batch_mean = [&](std::vector<VarId>& terms) {
    VarId s = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) {
      s = tape.add(s, terms[i]);
    }
    return tape.scale(s, Scalar(1) / Scalar(terms.size()));
  };
  PretrainLossNodes<Scalar> nodes;
  nodes.se_d = batch_mean(se_d_terms);
  nodes.se_m = batch_mean(se_m_terms);
  nodes.du = batch_mean(du_terms);
  nodes.total = tape.add(tape.add(nodes.se_d, nodes.se_m), nodes.du);
  return nodes;
}

/// Per-epoch means of each loss component over all visits in the pool.
struct PretrainEpochStats {
  double se_d = 0.0;
  double se_m = 0.0;
  double du = 0.0;
  double total = 0.0;
  std::size_t n_visits = 0;
  std::size_t n_batches = 0;
};

/// Marks which parameters the pre-training objective reaches: everything
/// except the recommendation head.
template <typename Scalar>
std::vector<std::uint8_t> pretrain_param_mask(const ParamStore<Scalar>& store) {
  std::vector<std::uint8_t> active(store.size(), 1);
  for (std::size_t p = 0; p < store.size(); ++p) {
    if (store.entry(p).name.rfind("pred.", 0) == 0) {
      active[p] = 0;
    }
  }
  return active;
}

/// One pass over the shuffled pool in mini-batches: mask, build the loss,
/// backpropagate, Adam step over the pre-training parameters.
template <typename Scalar>
PretrainEpochStats pretrain_epoch(const GBertModel<Scalar>& model, ParamStore<Scalar>& store,
                                  Adam<Scalar>& opt, const std::vector<Visit>& pool,
                                  double mask_rate, std::size_t batch_size, Rng& rng) {
  if (pool.empty()) {
    throw ValidationError("pre-training pool is empty");
  }
  if (batch_size == 0) {
    throw ValidationError("pre-training batch size must be positive");
  }
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = i;
  }
  rng.shuffle(order);
  const std::vector<std::uint8_t> active = pretrain_param_mask(store);
  PretrainEpochStats stats;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end = std::min(begin + batch_size, order.size());
    std::vector<MaskedVisit> batch;
    batch.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      batch.push_back(mask_codes(pool[order[i]], mask_rate, rng));
    }
    Tape<Scalar> tape(&store);
    const auto nodes = build_pretrain_loss(model, tape, batch);
    store.zero_grads();
    tape.backward(nodes.total);
    opt.step(store, &active);
    const double n = static_cast<double>(batch.size());
    stats.se_d += static_cast<double>(tape.value(nodes.se_d).values[0]) * n;
    stats.se_m += static_cast<double>(tape.value(nodes.se_m).values[0]) * n;
    stats.du += static_cast<double>(tape.value(nodes.du).values[0]) * n;
    stats.total += static_cast<double>(tape.value(nodes.total).values[0]) * n;
    stats.n_visits += batch.size();
    stats.n_batches += 1;
  }
  const double total_n = static_cast<double>(stats.n_visits);
  stats.se_d /= total_n;
  stats.se_m /= total_n;
  stats.du /= total_n;
  stats.total /= total_n;
  return stats;
}

/// CSV training log, one row per epoch.
class PretrainLog {
 public:
  explicit PretrainLog(const std::string& path) : out_(path) {
    if (!out_) {
      throw ValidationError("cannot open pre-training log '" + path + "'");
    }
    out_ << "epoch,L_se_d,L_se_m,L_du,L_pr\n";
  }

  void append(std::size_t epoch, const PretrainEpochStats& s) {
    out_.precision(17);
    out_ << epoch << ',' << s.se_d << ',' << s.se_m << ',' << s.du << ',' << s.total << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

}  // namespace gbert
