#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "gbert/error.hpp"
#include "gbert/tensor.hpp"

namespace gbert {

/// Named collection of trainable tensors with matching gradient slots.
/// Iteration order is the registration order, which is fixed per model,
/// so optimizer updates and checkpoints are reproducible.
template <typename Scalar>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
  };

  std::size_t add(const std::string& name, Tensor<Scalar> value) {
    if (index_.count(name)) {
      throw Error("param store: duplicate parameter '" + name + "'");
    }
    Entry e;
    e.name = name;
    e.grad = Tensor<Scalar>::zeros(value.shape);
    e.value = std::move(value);
    entries_.push_back(std::move(e));
    index_.emplace(name, entries_.size() - 1);
    return entries_.size() - 1;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) {
      throw Error("param store: unknown parameter '" + name + "'");
    }
    return it->second;
  }

  std::size_t size() const { return entries_.size(); }

  Entry& entry(std::size_t i) { return entries_[i]; }
  const Entry& entry(std::size_t i) const { return entries_[i]; }

  Tensor<Scalar>& value(const std::string& name) { return entries_[index_of(name)].value; }
  const Tensor<Scalar>& value(const std::string& name) const { return entries_[index_of(name)].value; }

  Tensor<Scalar>& grad(const std::string& name) { return entries_[index_of(name)].grad; }
  const Tensor<Scalar>& grad(const std::string& name) const { return entries_[index_of(name)].grad; }

  void zero_grads() {
    for (Entry& e : entries_) {
      e.grad.fill(Scalar(0));
    }
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const Entry& e : entries_) {
      n += e.value.numel();
    }
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace gbert
