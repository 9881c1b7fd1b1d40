#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gbert/error.hpp"
#include "gbert/param_store.hpp"

namespace gbert {

/// Adam with bias correction. State vectors are kept per parameter in store
/// order, so checkpointing the optimizer is a flat dump of (m, v, step).
template <typename Scalar>
class Adam {
 public:
  struct Options {
    Scalar lr = Scalar(5e-4);
    Scalar beta1 = Scalar(0.9);
    Scalar beta2 = Scalar(0.999);
    Scalar eps = Scalar(1e-8);
  };

  Adam() = default;
  explicit Adam(const Options& opts) : opts_(opts) {}

  /// Applies one update from the gradients currently in `store`. Throws if
  /// any gradient entry is non-finite, naming the offending parameter.
  /// `active`, when given, selects which parameters take part in this step;
  /// inactive ones keep value and moment state untouched, so alternating
  /// objectives do not drift parameters they never reach via stale momentum.
  void step(ParamStore<Scalar>& store, const std::vector<std::uint8_t>* active = nullptr) {
    if (active != nullptr && active->size() != store.size()) {
      throw Error("adam: active mask covers " + std::to_string(active->size()) +
                  " parameters, store has " + std::to_string(store.size()));
    }
    if (m_.empty()) {
      m_.resize(store.size());
      v_.resize(store.size());
      for (std::size_t p = 0; p < store.size(); ++p) {
        m_[p].assign(store.entry(p).value.numel(), Scalar(0));
        v_[p].assign(store.entry(p).value.numel(), Scalar(0));
      }
    }
    if (m_.size() != store.size()) {
      throw Error("adam: store has " + std::to_string(store.size()) +
                  " parameters but optimizer state has " + std::to_string(m_.size()));
    }
    ++step_;
    const Scalar bc1 = Scalar(1) - std::pow(opts_.beta1, Scalar(step_));
    const Scalar bc2 = Scalar(1) - std::pow(opts_.beta2, Scalar(step_));
    for (std::size_t p = 0; p < store.size(); ++p) {
      if (active != nullptr && (*active)[p] == 0) {
        continue;
      }
      auto& e = store.entry(p);
      for (std::size_t i = 0; i < e.grad.numel(); ++i) {
        const Scalar g = e.grad.values[i];
        if (!std::isfinite(g)) {
          throw Error("adam: non-finite gradient in parameter '" + e.name + "' at index " +
                      std::to_string(i));
        }
        m_[p][i] = opts_.beta1 * m_[p][i] + (Scalar(1) - opts_.beta1) * g;
        v_[p][i] = opts_.beta2 * v_[p][i] + (Scalar(1) - opts_.beta2) * g * g;
        const Scalar m_hat = m_[p][i] / bc1;
        const Scalar v_hat = v_[p][i] / bc2;
        e.value.values[i] -= opts_.lr * m_hat / (std::sqrt(v_hat) + opts_.eps);
      }
    }
  }

  const Options& options() const { return opts_; }
  void set_lr(Scalar lr) { opts_.lr = lr; }
  std::uint64_t step_count() const { return step_; }
  bool initialized() const { return !m_.empty(); }

  // Raw state access for checkpointing.
  const std::vector<std::vector<Scalar>>& m() const { return m_; }
  const std::vector<std::vector<Scalar>>& v() const { return v_; }
  void restore(std::vector<std::vector<Scalar>> m, std::vector<std::vector<Scalar>> v,
               std::uint64_t step) {
    m_ = std::move(m);
    v_ = std::move(v);
    step_ = step;
  }

 private:
  Options opts_;
  std::vector<std::vector<Scalar>> m_;
  std::vector<std::vector<Scalar>> v_;
  std::uint64_t step_ = 0;
};

}  // namespace gbert
