#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mda/rng.hpp"
#include "mda/tensor.hpp"

namespace mda {

// Ordered registry of named trainable tensors. Initialization is seeded per
// parameter name, so two models that share a backbone initialize those
// tensors identically regardless of what else they register.
template <typename T>
class ParamRegistry {
 public:
  explicit ParamRegistry(std::uint64_t seed) : seed_(seed) {}

  // He-uniform init: U(-b, b) with b = sqrt(6 / fan_in).
  Tensor<T> create(const std::string& name, Shape shape, std::int64_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor<T> t = Tensor<T>::uniform(
        std::move(shape), static_cast<T>(-bound), static_cast<T>(bound),
        rng::derive_seed(seed_, {rng::fnv1a("param"), rng::fnv1a(name)}), true);
    insert(name, t);
    return t;
  }

  Tensor<T> create_zeros(const std::string& name, Shape shape) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
    insert(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }

  const Tensor<T>& find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ShapeError("parameter registry: no tensor named \"" + name + "\"");
    }
    return items_[it->second].second;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::int64_t total_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  // Sum of parameter sizes whose name starts with `prefix`.
  std::int64_t count_prefixed(const std::string& prefix) const {
    std::int64_t n = 0;
    for (const auto& [name, t] : items_) {
      if (name.rfind(prefix, 0) == 0) n += t.numel();
    }
    return n;
  }

  std::uint64_t seed() const { return seed_; }

 private:
  void insert(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) {
      throw ShapeError("parameter registry: duplicate name \"" + name + "\"");
    }
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
  }

  std::uint64_t seed_;
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mda
