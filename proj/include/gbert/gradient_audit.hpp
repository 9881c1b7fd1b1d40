#pragma once

#include <chrono>
#include <cstdint>
#include <vector>

#include "gbert/datagen.hpp"
#include "gbert/finetune.hpp"
#include "gbert/grad_check.hpp"
#include "gbert/model.hpp"
#include "gbert/pretrain.hpp"
#include "gbert/rng.hpp"

namespace gbert {

/// Whole-model gradient verification on a fixed tiny configuration: both the
/// masked pre-training loss and the medication-recommendation loss are checked
/// element-by-element against central finite differences, plus one run with a
/// deliberately corrupted backward rule to prove the harness catches faults.
///
/// Step size 1e-4: at whole-model loss magnitudes (~tens) the subtraction in
/// (f(x+h)-f(x-h)) is roundoff-bound near h=1e-5, and the truncation term is
/// still far below tolerance at 1e-4.
template <typename Scalar>
struct GradientAuditResult {
  GradCheckReport<Scalar> pretrain;
  GradCheckReport<Scalar> finetune;
  Scalar h = Scalar(1e-4);
  Scalar tol = Scalar(1e-5);
  bool fault_detected = false;
  double seconds = 0.0;

  bool passed() const { return pretrain.passes(tol) && finetune.passes(tol) && fault_detected; }
};

template <typename Scalar>
GradientAuditResult<Scalar> run_gradient_audit(std::uint64_t seed, Scalar h = Scalar(1e-4),
                                               Scalar tol = Scalar(1e-5)) {
  const auto start = std::chrono::steady_clock::now();

  OntologyTree dx = detail::synthetic_tree(CodeType::kDiagnosis, 12, 3, "D");
  OntologyTree rx = detail::synthetic_tree(CodeType::kMedication, 8, 3, "R");
  typename GBertModel<Scalar>::Dims dims;
  dims.d0 = 4;
  dims.gat_heads = 2;
  dims.hidden = 8;
  dims.ffn = 8;
  dims.layers = 1;
  dims.enc_heads = 2;
  GBertModel<Scalar> model(std::move(dx), std::move(rx), dims);

  ParamStore<Scalar> store;
  Rng init_rng(derive_seed(seed, "audit.init"));
  model.register_params(store, init_rng);

  Rng data_rng(derive_seed(seed, "audit.data"));
  PatientRecord record;
  record.pid = "audit";
  std::vector<MaskedVisit> batch;
  for (std::size_t t = 0; t < 3; ++t) {
    std::vector<std::size_t> dx_codes, rx_codes;
    const std::size_t n_dx = 2 + data_rng.uniform_index(3);
    const std::size_t n_rx = 2 + data_rng.uniform_index(2);
    for (std::size_t i = 0; i < n_dx; ++i) {
      dx_codes.push_back(model.tree(CodeType::kDiagnosis).leaves()[data_rng.uniform_index(12)]);
    }
    for (std::size_t i = 0; i < n_rx; ++i) {
      rx_codes.push_back(model.tree(CodeType::kMedication).leaves()[data_rng.uniform_index(8)]);
    }
    Visit visit;
    visit.dx = detail::canonical_codes(std::move(dx_codes));
    visit.rx = detail::canonical_codes(std::move(rx_codes));
    record.visits.push_back(visit);
    // Mask the first code of each set so the MASK-token path always carries
    // gradient, independent of sampling.
    MaskedVisit mv;
    mv.visit = visit;
    mv.dx_masked.assign(visit.dx.size(), false);
    mv.rx_masked.assign(visit.rx.size(), false);
    mv.dx_masked[0] = true;
    mv.rx_masked[0] = true;
    batch.push_back(std::move(mv));
  }

  const auto pretrain_build = [&](Tape<Scalar>& tape) {
    return build_pretrain_loss(model, tape, batch).total;
  };
  const auto finetune_build = [&](Tape<Scalar>& tape) {
    const auto dx_matrix = model.code_matrix(tape, CodeType::kDiagnosis);
    const auto rx_matrix = model.code_matrix(tape, CodeType::kMedication);
    return build_record_loss(model, tape, record, dx_matrix, rx_matrix);
  };

  GradientAuditResult<Scalar> result;
  result.h = h;
  result.tol = tol;
  result.pretrain = finite_difference_check<Scalar>(store, pretrain_build, h);
  result.finetune = finite_difference_check<Scalar>(store, finetune_build, h);
  const auto faulted = finite_difference_check_with_fault<Scalar>(store, pretrain_build,
                                                                  Op::kMatMul, Scalar(1.5), h);
  result.fault_detected = !faulted.passes(tol);
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace gbert
