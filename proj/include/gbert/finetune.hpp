#pragma once

#include <cstdint>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "gbert/adam.hpp"
#include "gbert/error.hpp"
#include "gbert/metrics.hpp"
#include "gbert/model.hpp"
#include "gbert/pretrain.hpp"
#include "gbert/records.hpp"
#include "gbert/rng.hpp"
#include "gbert/tape.hpp"

namespace gbert {

/// Visit embeddings of one record. `v_d` covers every visit; `v_m` covers
/// visits 1..T-1 only, because a visit's own medications are the prediction
/// target and are never encoder inputs at its prediction step.
template <typename Scalar>
struct RecordEmbeddings {
  std::vector<typename Tape<Scalar>::VarId> v_d;
  std::vector<typename Tape<Scalar>::VarId> v_m;
};

/// Encodes the visits of `record`. `row` maps (code type, leaf node) to the
/// (1, hidden) embedding row node, so the same function serves training
/// (rows sliced from a live code matrix) and evaluation (rows fed as frozen
/// inputs).
template <typename Scalar, typename RowFn>
RecordEmbeddings<Scalar> embed_record(const GBertModel<Scalar>& model, Tape<Scalar>& tape,
                                      const PatientRecord& record, RowFn&& row) {
  const auto rows_for = [&](CodeType type, const std::vector<std::size_t>& codes) {
    std::vector<typename Tape<Scalar>::VarId> rs;
    rs.reserve(codes.size());
    for (const std::size_t node : codes) {
      rs.push_back(row(type, node));
    }
    return rs;
  };
  RecordEmbeddings<Scalar> emb;
  const std::size_t n = record.visits.size();
  for (std::size_t i = 0; i < n; ++i) {
    emb.v_d.push_back(
        model.encoder().encode(tape, rows_for(CodeType::kDiagnosis, record.visits[i].dx)).cls);
    if (i + 1 < n) {
      emb.v_m.push_back(
          model.encoder().encode(tape, rows_for(CodeType::kMedication, record.visits[i].rx)).cls);
    }
  }
  return emb;
}

/// Recommendation logits for visit `t` (1-based, t >= 2): the learned map of
/// [mean of past diagnosis visit embeddings | mean of past medication visit
/// embeddings | current diagnosis visit embedding].
template <typename Scalar>
typename Tape<Scalar>::VarId predict_logits(const GBertModel<Scalar>& model, Tape<Scalar>& tape,
                                            const RecordEmbeddings<Scalar>& emb,
                                            const PatientRecord& record, std::size_t t) {
  const std::size_t n = record.visits.size();
  if (t < 2) {
    throw ValidationError("cannot predict at visit " + std::to_string(t) + ": no history");
  }
  if (t > n) {
    throw ValidationError("visit index " + std::to_string(t) + " out of range for record '" +
                          record.pid + "' with " + std::to_string(n) + " visits");
  }
  if (record.visits[t - 1].dx.empty()) {
    throw ValidationError("record '" + record.pid + "' visit " + std::to_string(t) +
                          " has no diagnosis codes");
  }
  const auto mean_of = [&](const std::vector<typename Tape<Scalar>::VarId>& v) {
    auto s = v[0];
    for (std::size_t i = 1; i + 1 < t; ++i) {
      s = tape.add(s, v[i]);
    }
    return tape.scale(s, Scalar(1) / Scalar(t - 1));
  };
  const auto features =
      tape.concat({mean_of(emb.v_d), mean_of(emb.v_m), emb.v_d[t - 1]}, 1);
  return model.recommend_logits(tape, features);
}

/// Mean over t = 2..T of the multi-label BCE between the visit-t medication
/// predictions and the true medication set. Rejects single-visit records.
template <typename Scalar>
typename Tape<Scalar>::VarId build_record_loss(const GBertModel<Scalar>& model,
                                               Tape<Scalar>& tape, const PatientRecord& record,
                                               typename Tape<Scalar>::VarId dx_matrix,
                                               typename Tape<Scalar>::VarId rx_matrix) {
  const std::size_t n = record.visits.size();
  if (n < 2) {
    throw ValidationError("record '" + record.pid + "' has a single visit; nothing to predict");
  }
  const auto row = [&](CodeType type, std::size_t node) {
    return model.code_row(tape, type == CodeType::kDiagnosis ? dx_matrix : rx_matrix, type, node);
  };
  const auto emb = embed_record(model, tape, record, row);
  typename Tape<Scalar>::VarId sum = 0;
  for (std::size_t t = 2; t <= n; ++t) {
    const auto logits = predict_logits(model, tape, emb, record, t);
    const auto target = tape.input(model.multi_hot(CodeType::kMedication, record.visits[t - 1].rx));
    const auto term = bce_with_logits(tape, logits, target);
    sum = t == 2 ? term : tape.add(sum, term);
  }
  return tape.scale(sum, Scalar(1) / Scalar(n - 1));
}

/// Marks which parameters fine-tuning updates: everything except the masked
/// prediction heads, or only the recommendation head when `freeze_encoder`
/// is set (feature-freezing ablation).
template <typename Scalar>
std::vector<std::uint8_t> finetune_param_mask(const ParamStore<Scalar>& store,
                                              bool freeze_encoder) {
  std::vector<std::uint8_t> active(store.size(), 0);
  for (std::size_t p = 0; p < store.size(); ++p) {
    const std::string& name = store.entry(p).name;
    if (freeze_encoder) {
      active[p] = name.rfind("pred.", 0) == 0 ? 1 : 0;
    } else {
      active[p] = name.rfind("heads.", 0) == 0 ? 0 : 1;
    }
  }
  return active;
}

struct FinetuneEpochStats {
  double loss = 0.0;  // mean over trained records
  std::size_t n_records = 0;
  std::size_t n_skipped = 0;  // single-visit records
};

/// One pass over the multi-visit records in shuffled order, one optimizer
/// step per record. Single-visit records are skipped with a warning.
template <typename Scalar>
FinetuneEpochStats finetune_epoch(const GBertModel<Scalar>& model, ParamStore<Scalar>& store,
                                  Adam<Scalar>& opt, const std::vector<PatientRecord>& records,
                                  Rng& rng, bool freeze_encoder = false) {
  if (records.empty()) {
    throw ValidationError("fine-tuning set is empty");
  }
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = i;
  }
  rng.shuffle(order);
  const std::vector<std::uint8_t> active = finetune_param_mask(store, freeze_encoder);
  FinetuneEpochStats stats;
  for (const std::size_t i : order) {
    const PatientRecord& record = records[i];
    if (!record.multi_visit()) {
      std::cerr << "warning: record '" << record.pid << "' has a single visit; skipped\n";
      ++stats.n_skipped;
      continue;
    }
    Tape<Scalar> tape(&store);
    const auto dx_matrix = model.code_matrix(tape, CodeType::kDiagnosis);
    const auto rx_matrix = model.code_matrix(tape, CodeType::kMedication);
    const auto loss = build_record_loss(model, tape, record, dx_matrix, rx_matrix);
    store.zero_grads();
    tape.backward(loss);
    opt.step(store, &active);
    stats.loss += static_cast<double>(tape.value(loss).values[0]);
    ++stats.n_records;
  }
  if (stats.n_records == 0) {
    throw ValidationError("fine-tuning set has no multi-visit records");
  }
  stats.loss /= static_cast<double>(stats.n_records);
  return stats;
}

/// Per-visit prediction probabilities for t = 2..T of one record, computed
/// against the store's current parameter values with the code embeddings
/// frozen once up front.
struct VisitPrediction {
  std::string pid;
  std::size_t t = 0;                  // 1-based visit index
  std::vector<double> probabilities;  // over medication leaf rows
};

template <typename Scalar>
std::vector<VisitPrediction> predict_record(const GBertModel<Scalar>& model,
                                            ParamStore<Scalar>& store,
                                            const Tensor<Scalar>& dx_frozen,
                                            const Tensor<Scalar>& rx_frozen,
                                            const PatientRecord& record) {
  std::vector<VisitPrediction> out;
  if (record.visits.size() < 2) {
    return out;
  }
  Tape<Scalar> tape(&store);
  const auto row = [&](CodeType type, std::size_t node) {
    return tape.input(model.frozen_code_row(
        type == CodeType::kDiagnosis ? dx_frozen : rx_frozen, type, node));
  };
  const auto emb = embed_record(model, tape, record, row);
  for (std::size_t t = 2; t <= record.visits.size(); ++t) {
    const auto probs = tape.sigmoid(predict_logits(model, tape, emb, record, t));
    VisitPrediction vp;
    vp.pid = record.pid;
    vp.t = t;
    const auto& val = tape.value(probs);
    vp.probabilities.assign(val.values.begin(), val.values.end());
    out.push_back(std::move(vp));
  }
  return out;
}

/// Jaccard / F1 / PR-AUC over all predictable visits (t >= 2) of the given
/// records. Pure with respect to parameters: repeated calls give identical
/// reports.
template <typename Scalar>
MetricsReport evaluate_records(const GBertModel<Scalar>& model, ParamStore<Scalar>& store,
                               const std::vector<PatientRecord>& records, double threshold) {
  const Tensor<Scalar> dx_frozen = model.frozen_code_matrix(store, CodeType::kDiagnosis);
  const Tensor<Scalar> rx_frozen = model.frozen_code_matrix(store, CodeType::kMedication);
  MetricsAccumulator acc(threshold);
  std::size_t n_patients = 0;
  for (const PatientRecord& record : records) {
    const auto preds = predict_record(model, store, dx_frozen, rx_frozen, record);
    if (preds.empty()) {
      continue;
    }
    ++n_patients;
    for (const auto& vp : preds) {
      std::vector<std::size_t> truth;
      for (const std::size_t node : record.visits[vp.t - 1].rx) {
        truth.push_back(model.leaf_pos(CodeType::kMedication, node));
      }
      acc.add_visit(truth, vp.probabilities);
    }
  }
  return acc.report(n_patients);
}

struct ScheduleOptions {
  std::size_t pretrain_epochs = 5;
  std::size_t finetune_epochs = 5;
  std::size_t cycles = 15;
  double mask_rate = 0.15;
  std::size_t batch_size = 64;
  double threshold = 0.3;
  bool no_pretrain = false;     // skip the pre-training half of every cycle
  bool freeze_encoder = false;  // fine-tune only the recommendation head
};

struct CycleRecord {
  std::size_t cycle = 0;
  double pretrain_loss = 0.0;  // last pre-train epoch of the cycle; 0 when skipped
  double finetune_loss = 0.0;  // last fine-tune epoch of the cycle
  double val_jaccard = 0.0;
};

template <typename Scalar>
struct ScheduleResult {
  std::vector<PretrainEpochStats> pretrain_history;
  std::vector<FinetuneEpochStats> finetune_history;
  std::vector<CycleRecord> cycles;
  double best_val_jaccard = -1.0;
  std::size_t best_cycle = 0;
};

/// Alternates pre-training and fine-tuning for `cycles` rounds, scoring the
/// validation Jaccard after every cycle. The best-on-validation parameter
/// values are restored into `store` before returning, so the caller
/// checkpoints the retained model.
template <typename Scalar>
ScheduleResult<Scalar> alternating_schedule(const GBertModel<Scalar>& model,
                                            ParamStore<Scalar>& store, Adam<Scalar>& opt,
                                            const std::vector<Visit>& pretrain_visits,
                                            const std::vector<PatientRecord>& train_records,
                                            const std::vector<PatientRecord>& val_records,
                                            const ScheduleOptions& options, Rng& rng) {
  ScheduleResult<Scalar> result;
  std::vector<Tensor<Scalar>> best_values;
  for (std::size_t cycle = 1; cycle <= options.cycles; ++cycle) {
    CycleRecord cr;
    cr.cycle = cycle;
    if (!options.no_pretrain) {
      for (std::size_t e = 0; e < options.pretrain_epochs; ++e) {
        const auto stats = pretrain_epoch(model, store, opt, pretrain_visits, options.mask_rate,
                                          options.batch_size, rng);
        cr.pretrain_loss = stats.total;
        result.pretrain_history.push_back(stats);
      }
    }
    for (std::size_t e = 0; e < options.finetune_epochs; ++e) {
      const auto stats =
          finetune_epoch(model, store, opt, train_records, rng, options.freeze_encoder);
      cr.finetune_loss = stats.loss;
      result.finetune_history.push_back(stats);
    }
    cr.val_jaccard = evaluate_records(model, store, val_records, options.threshold).jaccard;
    result.cycles.push_back(cr);
    if (cr.val_jaccard > result.best_val_jaccard) {
      result.best_val_jaccard = cr.val_jaccard;
      result.best_cycle = cycle;
      best_values.clear();
      for (std::size_t p = 0; p < store.size(); ++p) {
        best_values.push_back(store.entry(p).value);
      }
    }
  }
  if (!best_values.empty()) {
    for (std::size_t p = 0; p < store.size(); ++p) {
      store.entry(p).value = best_values[p];
    }
  }
  return result;
}

}  // namespace gbert
