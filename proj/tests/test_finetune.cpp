#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "gbert/finetune.hpp"
#include "gbert/grad_check.hpp"

namespace gbert {
namespace {

OntologyTree tiny_dx() {
  return OntologyTree(CodeType::kDiagnosis,
                      {"root", "A", "B", "D1", "D2", "D3", "D4", "D5"},
                      {-1, 0, 0, 1, 1, 2, 2, 2});
}

OntologyTree tiny_rx() {
  return OntologyTree(CodeType::kMedication, {"root", "X", "R1", "R2", "R3", "R4"},
                      {-1, 0, 1, 1, 0, 0});
}

typename GBertModel<double>::Dims tiny_dims() {
  typename GBertModel<double>::Dims d;
  d.d0 = 3;
  d.gat_heads = 2;
  d.hidden = 8;
  d.ffn = 8;
  d.layers = 1;
  d.enc_heads = 2;
  return d;
}

PatientRecord record_of(const GBertModel<double>& model, const std::string& pid,
                        std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>>
                            visits) {
  PatientRecord r;
  r.pid = pid;
  for (auto& [dx, rx] : visits) {
    r.visits.push_back(
        make_visit(dx, rx, model.tree(CodeType::kDiagnosis), model.tree(CodeType::kMedication)));
  }
  return r;
}

struct Fixture {
  GBertModel<double> model;
  ParamStore<double> store;

  explicit Fixture(std::uint64_t seed, bool zero_pred = false)
      : model(tiny_dx(), tiny_rx(), tiny_dims()) {
    Rng rng(seed);
    model.register_params(store, rng);
    if (zero_pred) {
      store.value("pred.W").fill(0.0);
      store.value("pred.b").fill(0.0);
    }
  }
};

TEST(Finetune, ZeroHeadPredictsHalfEverywhere) {
  Fixture f(5, /*zero_pred=*/true);
  const auto record = record_of(f.model, "p0", {{{"D1", "D2"}, {"R1"}}, {{"D3"}, {"R2", "R3"}}});
  const auto dx_m = f.model.frozen_code_matrix(f.store, CodeType::kDiagnosis);
  const auto rx_m = f.model.frozen_code_matrix(f.store, CodeType::kMedication);
  const auto preds = predict_record(f.model, f.store, dx_m, rx_m, record);
  ASSERT_EQ(preds.size(), 1u);
  EXPECT_EQ(preds[0].t, 2u);
  for (const double p : preds[0].probabilities) {
    EXPECT_EQ(p, 0.5);
  }
}

// Straight-line evaluation of the recommendation equation: plain loops over
// history means, concatenation, affine map, sigmoid.
TEST(Finetune, PredictionMatchesScalarAssemblyOracle) {
  Fixture f(7);
  const auto record = record_of(f.model, "p1",
                                {{{"D1", "D4"}, {"R1", "R2"}},
                                 {{"D2", "D5"}, {"R3"}},
                                 {{"D3"}, {"R2", "R4"}}});
  const auto dx_m = f.model.frozen_code_matrix(f.store, CodeType::kDiagnosis);
  const auto rx_m = f.model.frozen_code_matrix(f.store, CodeType::kMedication);
  const auto preds = predict_record(f.model, f.store, dx_m, rx_m, record);
  ASSERT_EQ(preds.size(), 2u);

  // Collect the visit embeddings the same encoder produces, then assemble the
  // prediction with independent scalar loops.
  Tape<double> tape(&f.store);
  const auto row = [&](CodeType type, std::size_t node) {
    return tape.input(f.model.frozen_code_row(type == CodeType::kDiagnosis ? dx_m : rx_m, type, node));
  };
  const auto emb = embed_record(f.model, tape, record, row);
  const std::size_t h = f.model.dims().hidden;
  const auto row_values = [&](typename Tape<double>::VarId id) {
    return tape.value(id).values;
  };
  const auto& W = f.store.value("pred.W");
  const auto& b = f.store.value("pred.b");
  for (std::size_t t = 2; t <= 3; ++t) {
    std::vector<double> mean_d(h, 0.0);
    std::vector<double> mean_m(h, 0.0);
    for (std::size_t tau = 0; tau + 1 < t; ++tau) {
      const auto vd = row_values(emb.v_d[tau]);
      const auto vm = row_values(emb.v_m[tau]);
      for (std::size_t c = 0; c < h; ++c) {
        mean_d[c] += vd[c];
        mean_m[c] += vm[c];
      }
    }
    for (std::size_t c = 0; c < h; ++c) {
      mean_d[c] /= static_cast<double>(t - 1);
      mean_m[c] /= static_cast<double>(t - 1);
    }
    std::vector<double> feat;
    feat.insert(feat.end(), mean_d.begin(), mean_d.end());
    feat.insert(feat.end(), mean_m.begin(), mean_m.end());
    const auto vd_t = row_values(emb.v_d[t - 1]);
    feat.insert(feat.end(), vd_t.begin(), vd_t.end());
    for (std::size_t r = 0; r < W.rows(); ++r) {
      double z = b.values[r];
      for (std::size_t c = 0; c < feat.size(); ++c) {
        z += feat[c] * W.at(r, c);
      }
      const double p = 1.0 / (1.0 + std::exp(-z));
      EXPECT_NEAR(preds[t - 2].probabilities[r], p, 1e-12);
    }
  }
}

TEST(Finetune, UniformHalfLossIsVocabLn2) {
  Fixture f(9, /*zero_pred=*/true);
  const auto record = record_of(
      f.model, "p2",
      {{{"D1"}, {"R1"}}, {{"D2"}, {"R2"}}, {{"D4", "D5"}, {"R3", "R4"}}});
  Tape<double> tape(&f.store);
  const auto dx_matrix = f.model.code_matrix(tape, CodeType::kDiagnosis);
  const auto rx_matrix = f.model.code_matrix(tape, CodeType::kMedication);
  const auto loss = build_record_loss(f.model, tape, record, dx_matrix, rx_matrix);
  EXPECT_NEAR(tape.value(loss).values[0], 4.0 * std::log(2.0), 1e-12);
}

TEST(Finetune, LossIsMeanOfPerVisitBce) {
  Fixture f(11);
  const auto record = record_of(f.model, "p3",
                                {{{"D1", "D3"}, {"R1", "R4"}},
                                 {{"D2"}, {"R2"}},
                                 {{"D4"}, {"R1", "R3"}}});
  const auto dx_m = f.model.frozen_code_matrix(f.store, CodeType::kDiagnosis);
  const auto rx_m = f.model.frozen_code_matrix(f.store, CodeType::kMedication);
  const auto preds = predict_record(f.model, f.store, dx_m, rx_m, record);
  const double tiny = std::numeric_limits<double>::min();
  double expected = 0.0;
  for (const auto& vp : preds) {
    const auto hot = f.model.multi_hot(CodeType::kMedication, record.visits[vp.t - 1].rx);
    for (std::size_t i = 0; i < vp.probabilities.size(); ++i) {
      const double p = vp.probabilities[i];
      expected -= hot.values[i] > 0.5 ? std::log(p + tiny) : std::log(1.0 - p + tiny);
    }
  }
  expected /= static_cast<double>(preds.size());
  Tape<double> tape(&f.store);
  const auto loss = build_record_loss(f.model, tape, record,
                                      f.model.code_matrix(tape, CodeType::kDiagnosis),
                                      f.model.code_matrix(tape, CodeType::kMedication));
  EXPECT_NEAR(tape.value(loss).values[0], expected, 1e-12);
}

TEST(Finetune, RejectsVisitOneAndMissingHistoryOrDiagnoses) {
  Fixture f(13);
  const auto record = record_of(f.model, "p4", {{{"D1"}, {"R1"}}, {{"D2"}, {"R2"}}});
  Tape<double> tape(&f.store);
  const auto row = [&](CodeType type, std::size_t node) {
    return f.model.code_row(tape, f.model.code_matrix(tape, type), type, node);
  };
  const auto emb = embed_record(f.model, tape, record, row);
  EXPECT_THROW(predict_logits(f.model, tape, emb, record, 1), ValidationError);
  EXPECT_THROW(predict_logits(f.model, tape, emb, record, 3), ValidationError);
  PatientRecord no_dx = record;
  no_dx.visits[1].dx.clear();
  EXPECT_THROW(predict_logits(f.model, tape, emb, no_dx, 2), ValidationError);
  PatientRecord single = record;
  single.visits.resize(1);
  EXPECT_THROW(build_record_loss(f.model, tape, single, f.model.code_matrix(tape, CodeType::kDiagnosis),
                                 f.model.code_matrix(tape, CodeType::kMedication)),
               ValidationError);
}

TEST(Finetune, PredictionIgnoresFutureVisitsBitwise) {
  Fixture f(17);
  const auto base = record_of(f.model, "p5",
                              {{{"D1", "D2"}, {"R1"}},
                               {{"D3"}, {"R2", "R3"}},
                               {{"D4"}, {"R4"}}});
  auto altered = base;
  altered.visits[2] = make_visit({"D5", "D1"}, {"R1", "R2"}, f.model.tree(CodeType::kDiagnosis),
                                 f.model.tree(CodeType::kMedication));
  const auto dx_m = f.model.frozen_code_matrix(f.store, CodeType::kDiagnosis);
  const auto rx_m = f.model.frozen_code_matrix(f.store, CodeType::kMedication);
  const auto pa = predict_record(f.model, f.store, dx_m, rx_m, base);
  const auto pb = predict_record(f.model, f.store, dx_m, rx_m, altered);
  ASSERT_EQ(pa.size(), 2u);
  ASSERT_EQ(pb.size(), 2u);
  EXPECT_EQ(pa[0].probabilities, pb[0].probabilities);  // t = 2 sees visits 1..2 only
  EXPECT_NE(pa[1].probabilities, pb[1].probabilities);  // t = 3 sees the altered visit
}

// The three concatenated feature blocks occupy fixed column ranges of the
// recommendation matrix; zeroing one block's columns removes that signal
// exactly.
TEST(Finetune, FeatureBlocksOccupyFixedColumnRanges) {
  const std::size_t h = 8;
  const auto base = [&](Fixture& f) {
    return record_of(f.model, "p6",
                     {{{"D1", "D2"}, {"R1", "R2"}}, {{"D3", "D4"}, {"R3"}}});
  };
  struct Case {
    std::size_t block;                  // column range [block*h, (block+1)*h)
    bool alter_history_dx, alter_history_rx, alter_current_dx;
  };
  const std::vector<Case> cases{{0, true, false, false},
                                {1, false, true, false},
                                {2, false, false, true}};
  for (const auto& c : cases) {
    Fixture f(19);
    auto& W = f.store.value("pred.W");
    for (std::size_t r = 0; r < W.rows(); ++r) {
      for (std::size_t col = c.block * h; col < (c.block + 1) * h; ++col) {
        W.at(r, col) = 0.0;
      }
    }
    const auto rec = base(f);
    auto altered = rec;
    if (c.alter_history_dx) {
      altered.visits[0].dx = {f.model.tree(CodeType::kDiagnosis).node_of("D5")};
    }
    if (c.alter_history_rx) {
      altered.visits[0].rx = {f.model.tree(CodeType::kMedication).node_of("R4")};
    }
    if (c.alter_current_dx) {
      altered.visits[1].dx = {f.model.tree(CodeType::kDiagnosis).node_of("D5")};
    }
    const auto dx_m = f.model.frozen_code_matrix(f.store, CodeType::kDiagnosis);
    const auto rx_m = f.model.frozen_code_matrix(f.store, CodeType::kMedication);
    const auto pa = predict_record(f.model, f.store, dx_m, rx_m, rec);
    const auto pb = predict_record(f.model, f.store, dx_m, rx_m, altered);
    EXPECT_EQ(pa[0].probabilities, pb[0].probabilities) << "block " << c.block;
  }
}

TEST(Finetune, EpochSkipsSingleVisitAndRespectsFreeze) {
  Fixture f(23);
  std::vector<PatientRecord> records;
  records.push_back(record_of(f.model, "m0", {{{"D1"}, {"R1"}}, {{"D2"}, {"R2"}}}));
  records.push_back(record_of(f.model, "s0", {{{"D3"}, {"R3"}}}));
  Adam<double> opt;
  Rng rng(3);
  const auto heads_before = f.store.value("heads.self.dx.W1").values;
  const auto enc_before = f.store.value("enc.l0.attn.Wq").values;
  auto stats = finetune_epoch(f.model, f.store, opt, records, rng);
  EXPECT_EQ(stats.n_records, 1u);
  EXPECT_EQ(stats.n_skipped, 1u);
  EXPECT_EQ(f.store.value("heads.self.dx.W1").values, heads_before);
  EXPECT_NE(f.store.value("enc.l0.attn.Wq").values, enc_before);

  Fixture g(23);
  Adam<double> opt2;
  Rng rng2(3);
  const auto g_enc_before = g.store.value("enc.l0.attn.Wq").values;
  const auto g_onto_before = g.store.value("onto.dx.We").values;
  const auto g_pred_before = g.store.value("pred.W").values;
  finetune_epoch(g.model, g.store, opt2, records, rng2, /*freeze_encoder=*/true);
  EXPECT_EQ(g.store.value("enc.l0.attn.Wq").values, g_enc_before);
  EXPECT_EQ(g.store.value("onto.dx.We").values, g_onto_before);
  EXPECT_NE(g.store.value("pred.W").values, g_pred_before);

  std::vector<PatientRecord> only_single{records[1]};
  EXPECT_THROW(finetune_epoch(f.model, f.store, opt, only_single, rng), ValidationError);
}

TEST(Finetune, LossGradientPassesFiniteDifference) {
  Fixture f(29);
  const auto record = record_of(f.model, "p7",
                                {{{"D1", "D4"}, {"R2", "R3"}}, {{"D2"}, {"R1", "R4"}}});
  const auto build = [&](Tape<double>& tape) {
    return build_record_loss(f.model, tape, record,
                             f.model.code_matrix(tape, CodeType::kDiagnosis),
                             f.model.code_matrix(tape, CodeType::kMedication));
  };
  // h = 1e-4: see the matching note in the pre-training gradient test.
  const auto report = finite_difference_check<double>(f.store, build, 1e-4);
  EXPECT_TRUE(report.passes(1e-5)) << report.worst_param << " " << report.max_rel_err;
}

TEST(Finetune, EvaluationIsPureAndCountsVisits) {
  Fixture f(31);
  std::vector<PatientRecord> records;
  records.push_back(record_of(f.model, "e0", {{{"D1"}, {"R1"}}, {{"D2"}, {"R2"}}}));
  records.push_back(record_of(
      f.model, "e1", {{{"D3"}, {"R3"}}, {{"D4"}, {"R4"}}, {{"D5"}, {"R1", "R2"}}}));
  records.push_back(record_of(f.model, "e2", {{{"D1"}, {"R2"}}}));  // single visit: excluded
  const auto a = evaluate_records(f.model, f.store, records, 0.3);
  const auto b = evaluate_records(f.model, f.store, records, 0.3);
  EXPECT_EQ(a.n_visits, 3u);  // (2-1) + (3-1)
  EXPECT_EQ(a.n_patients, 2u);
  EXPECT_EQ(a.jaccard, b.jaccard);
  EXPECT_EQ(a.f1, b.f1);
  EXPECT_EQ(a.pr_auc, b.pr_auc);
  EXPECT_GE(a.f1, a.jaccard);
}

TEST(Finetune, AlternatingScheduleBookkeepingAndBestRetention) {
  Fixture f(37);
  std::vector<PatientRecord> train;
  train.push_back(record_of(f.model, "t0", {{{"D1", "D2"}, {"R1"}}, {{"D3"}, {"R1", "R2"}}}));
  train.push_back(record_of(f.model, "t1", {{{"D4"}, {"R3"}}, {{"D5"}, {"R3", "R4"}}}));
  std::vector<PatientRecord> val;
  val.push_back(record_of(f.model, "v0", {{{"D1"}, {"R1"}}, {{"D2", "D3"}, {"R1", "R2"}}}));
  const auto pool = pretrain_pool({}, train);
  EXPECT_EQ(pool.size(), 4u);

  ScheduleOptions opts;
  opts.pretrain_epochs = 1;
  opts.finetune_epochs = 1;
  opts.cycles = 3;
  opts.batch_size = 4;
  Adam<double> opt;
  Rng rng(7);
  const auto result = alternating_schedule(f.model, f.store, opt, pool, train, val, opts, rng);
  EXPECT_EQ(result.pretrain_history.size(), 3u);
  EXPECT_EQ(result.finetune_history.size(), 3u);
  ASSERT_EQ(result.cycles.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(result.cycles[i].cycle, i + 1);
  }
  // The store now holds the best-on-validation parameters, so re-evaluating
  // reproduces the best recorded score.
  const auto eval = evaluate_records(f.model, f.store, val, opts.threshold);
  EXPECT_EQ(eval.jaccard, result.best_val_jaccard);
  EXPECT_EQ(result.best_val_jaccard,
            result.cycles[result.best_cycle - 1].val_jaccard);

  Fixture g(37);
  Adam<double> opt2;
  Rng rng2(7);
  ScheduleOptions no_pre = opts;
  no_pre.no_pretrain = true;
  const auto r2 = alternating_schedule(g.model, g.store, opt2, pool, train, val, no_pre, rng2);
  EXPECT_TRUE(r2.pretrain_history.empty());
  EXPECT_EQ(r2.finetune_history.size(), 3u);
}

TEST(Finetune, ThresholdingIsMonotone) {
  const std::vector<double> probs{0.1, 0.31, 0.64, 0.29};
  auto raised = probs;
  raised[3] = 0.35;
  const auto before = threshold_predictions(probs, 0.3);
  const auto after = threshold_predictions(raised, 0.3);
  for (const std::size_t label : before) {
    EXPECT_NE(std::find(after.begin(), after.end(), label), after.end());
  }
  EXPECT_EQ(after.size(), before.size() + 1);
}

}  // namespace
}  // namespace gbert
