#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "gbert/grad_check.hpp"
#include "gbert/pretrain.hpp"

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

Visit visit_of(const GBertModel<double>& model, std::vector<std::string> dx,
               std::vector<std::string> rx) {
  return make_visit(dx, rx, model.tree(CodeType::kDiagnosis), model.tree(CodeType::kMedication));
}

TEST(Pretrain, RateZeroMasksNothing) {
  Rng rng(1);
  Visit v;
  v.dx = {3, 4, 5};
  v.rx = {2, 3};
  const auto m = mask_codes(v, 0.0, rng);
  EXPECT_EQ(m.visit.dx, v.dx);
  for (const bool f : m.dx_masked) {
    EXPECT_FALSE(f);
  }
  for (const bool f : m.rx_masked) {
    EXPECT_FALSE(f);
  }
  EXPECT_THROW(mask_codes(v, 1.0, rng), ValidationError);
  EXPECT_THROW(mask_codes(v, -0.1, rng), ValidationError);
}

TEST(Pretrain, MaskFractionWithinBinomialBand) {
  Rng rng(42);
  Visit v;
  v.dx = {3, 4, 5, 6, 7};
  v.rx = {2, 3, 4, 5};
  std::size_t total = 0;
  std::size_t masked = 0;
  while (total < 120000) {
    const auto m = mask_codes(v, 0.15, rng);
    for (const bool f : m.dx_masked) {
      ++total;
      masked += f ? 1 : 0;
    }
    for (const bool f : m.rx_masked) {
      ++total;
      masked += f ? 1 : 0;
    }
  }
  const double frac = static_cast<double>(masked) / static_cast<double>(total);
  EXPECT_GE(frac, 0.14);
  EXPECT_LE(frac, 0.16);
}

TEST(Pretrain, PoolCountsSinglesAndTrainVisitSlices) {
  std::vector<PatientRecord> singles(4);
  for (auto& r : singles) {
    r.visits.resize(1);
  }
  std::vector<PatientRecord> multi(3);
  multi[0].visits.resize(2);
  multi[1].visits.resize(3);
  multi[2].visits.resize(2);
  EXPECT_EQ(pretrain_pool(singles, multi).size(), 11u);
}

TEST(Pretrain, UniformPredictionsGiveAnalyticLoss) {
  GBertModel<double> model(tiny_dx(), tiny_rx(), tiny_dims());
  ParamStore<double> store;
  Rng rng(3);
  model.register_params(store, rng);
  // Zeroing every head's output layer forces all logits to 0, i.e. p = 0.5.
  for (const char* name : {"heads.self.dx.W2", "heads.self.dx.b2", "heads.self.rx.W2",
                           "heads.self.rx.b2", "heads.dual.d_from_m.W2", "heads.dual.d_from_m.b2",
                           "heads.dual.m_from_d.W2", "heads.dual.m_from_d.b2"}) {
    store.value(name).fill(0.0);
  }
  MaskedVisit mv;
  mv.visit = visit_of(model, {"D1", "D4"}, {"R2"});
  mv.dx_masked = {false, true};
  mv.rx_masked = {false};
  Tape<double> tape(&store);
  const auto nodes = build_pretrain_loss(model, tape, {mv});
  const double ln2 = std::log(2.0);
  EXPECT_NEAR(tape.value(nodes.se_d).values[0], 5.0 * ln2, 1e-12);
  EXPECT_NEAR(tape.value(nodes.se_m).values[0], 4.0 * ln2, 1e-12);
  EXPECT_NEAR(tape.value(nodes.du).values[0], 9.0 * ln2, 1e-12);
  EXPECT_NEAR(tape.value(nodes.total).values[0], 18.0 * ln2, 1e-12);
}

TEST(Pretrain, LossInvariantToCodeOrderWithinVisit) {
  GBertModel<double> model(tiny_dx(), tiny_rx(), tiny_dims());
  ParamStore<double> store;
  Rng rng(23);
  model.register_params(store, rng);
  MaskedVisit a;
  a.visit.dx = {3, 5, 7};
  a.visit.rx = {2, 4};
  a.dx_masked = {false, false, false};
  a.rx_masked = {false, false};
  MaskedVisit b = a;
  b.visit.dx = {7, 3, 5};
  b.visit.rx = {4, 2};
  Tape<double> ta(&store);
  Tape<double> tb(&store);
  const double la = ta.value(build_pretrain_loss(model, ta, {a}).total).values[0];
  const double lb = tb.value(build_pretrain_loss(model, tb, {b}).total).values[0];
  EXPECT_NEAR(la, lb, 1e-9);
}

TEST(Pretrain, ComponentsIsolateTheirHeads) {
  GBertModel<double> model(tiny_dx(), tiny_rx(), tiny_dims());
  ParamStore<double> store;
  Rng rng(29);
  model.register_params(store, rng);
  MaskedVisit mv;
  mv.visit = visit_of(model, {"D2", "D3"}, {"R1", "R3"});
  mv.dx_masked = {true, false};
  mv.rx_masked = {false, false};
  const auto eval = [&]() {
    Tape<double> tape(&store);
    const auto n = build_pretrain_loss(model, tape, {mv});
    return std::vector<double>{tape.value(n.se_d).values[0], tape.value(n.se_m).values[0],
                               tape.value(n.du).values[0]};
  };
  const auto before = eval();
  store.value("heads.self.dx.W2").values[0] += 0.25;
  const auto after = eval();
  EXPECT_NE(before[0], after[0]);
  EXPECT_EQ(before[1], after[1]);
  EXPECT_EQ(before[2], after[2]);
  store.value("heads.dual.m_from_d.b2").values[1] += 0.25;
  const auto after2 = eval();
  EXPECT_EQ(after[0], after2[0]);
  EXPECT_EQ(after[1], after2[1]);
  EXPECT_NE(after[2], after2[2]);
}

TEST(Pretrain, TotalIsSumOfComponents) {
  GBertModel<double> model(tiny_dx(), tiny_rx(), tiny_dims());
  ParamStore<double> store;
  Rng rng(31);
  model.register_params(store, rng);
  std::vector<MaskedVisit> batch;
  for (int i = 0; i < 3; ++i) {
    MaskedVisit mv;
    mv.visit = visit_of(model, {"D1", "D5"}, {"R2", "R4"});
    mv.dx_masked = {i == 0, i == 1};
    mv.rx_masked = {false, i == 2};
    batch.push_back(mv);
  }
  Tape<double> tape(&store);
  const auto n = build_pretrain_loss(model, tape, batch);
  EXPECT_NEAR(tape.value(n.total).values[0],
              tape.value(n.se_d).values[0] + tape.value(n.se_m).values[0] + tape.value(n.du).values[0],
              1e-12);
}

TEST(Pretrain, EpochOverfitsOneVisitAndSkipsRecommendationHead) {
  GBertModel<double> model(tiny_dx(), tiny_rx(), tiny_dims());
  ParamStore<double> store;
  Rng rng(37);
  model.register_params(store, rng);
  const std::vector<Visit> pool{visit_of(model, {"D1", "D3"}, {"R1", "R4"})};
  Adam<double> opt(typename Adam<double>::Options{0.01, 0.9, 0.999, 1e-8});
  Rng train_rng(derive_seed(37, "pretrain"));
  const auto pred_before = store.value("pred.W").values;
  const auto head_before = store.value("heads.self.dx.W2").values;
  double first = 0.0;
  double last = 0.0;
  for (int epoch = 0; epoch < 200; ++epoch) {
    const auto stats = pretrain_epoch(model, store, opt, pool, 0.0, 4, train_rng);
    if (epoch == 0) {
      first = stats.total;
    }
    last = stats.total;
    EXPECT_EQ(stats.n_visits, 1u);
    EXPECT_EQ(stats.n_batches, 1u);
  }
  EXPECT_LT(last, 0.1 * first);
  EXPECT_EQ(store.value("pred.W").values, pred_before);
  EXPECT_NE(store.value("heads.self.dx.W2").values, head_before);
}

TEST(Pretrain, EpochStatsAreVisitWeightedMeans) {
  GBertModel<double> model(tiny_dx(), tiny_rx(), tiny_dims());
  ParamStore<double> store;
  Rng rng(41);
  model.register_params(store, rng);
  std::vector<Visit> pool{visit_of(model, {"D1"}, {"R1"}), visit_of(model, {"D2"}, {"R2"}),
                          visit_of(model, {"D3", "D4"}, {"R3"})};
  Adam<double> opt;
  Rng train_rng(11);
  const auto stats = pretrain_epoch(model, store, opt, pool, 0.0, 2, train_rng);
  EXPECT_EQ(stats.n_visits, 3u);
  EXPECT_EQ(stats.n_batches, 2u);
  EXPECT_NEAR(stats.total, stats.se_d + stats.se_m + stats.du, 1e-12);
  EXPECT_THROW(pretrain_epoch(model, store, opt, {}, 0.0, 2, train_rng), ValidationError);
  EXPECT_THROW(pretrain_epoch(model, store, opt, pool, 0.0, 0, train_rng), ValidationError);
}

TEST(Pretrain, LossGradientPassesFiniteDifference) {
  GBertModel<double> model(tiny_dx(), tiny_rx(), tiny_dims());
  ParamStore<double> store;
  Rng rng(43);
  model.register_params(store, rng);
  std::vector<MaskedVisit> batch(2);
  batch[0].visit = visit_of(model, {"D1", "D4"}, {"R2"});
  batch[0].dx_masked = {false, true};
  batch[0].rx_masked = {false};
  batch[1].visit = visit_of(model, {"D3"}, {"R1", "R3"});
  batch[1].dx_masked = {true};
  batch[1].rx_masked = {false, true};
  const auto build = [&](Tape<double>& tape) {
    return build_pretrain_loss(model, tape, batch).total;
  };
  // h = 1e-4 for whole-model checks: the loss is large (~25) while some
  // attention gradients are ~1e-5, so h = 1e-5 leaves the central difference
  // dominated by cancellation noise rather than truncation.
  const auto report = finite_difference_check<double>(store, build, 1e-4);
  EXPECT_TRUE(report.passes(1e-5)) << report.worst_param << " " << report.max_rel_err;
}

}  // namespace
}  // namespace gbert
