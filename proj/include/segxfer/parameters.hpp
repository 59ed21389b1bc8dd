#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "segxfer/autodiff.hpp"
#include "segxfer/tensor.hpp"

namespace segxfer {

/// Ordered collection of named tensors (network weights, gradients, moments).
template <typename T>
class NamedTensors {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  void add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw UsageError("duplicate tensor name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const { return entries_[position(name)].second; }
  Tensor<T>& get(const std::string& name) { return entries_[position(name)].second; }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() noexcept { return entries_.begin(); }
  auto end() noexcept { return entries_.end(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  Entry& operator[](std::size_t i) { return entries_[i]; }

  std::size_t scalar_count() const {
    std::size_t total = 0;
    for (const auto& [_, t] : entries_) total += t.size();
    return total;
  }

  template <typename U>
  NamedTensors<U> cast() const {
    NamedTensors<U> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
    return out;
  }

  friend bool operator==(const NamedTensors& a, const NamedTensors& b) { return a.entries_ == b.entries_; }

 private:
  std::size_t position(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("no tensor named '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Graph leaves for a parameter set, looked up by name during forward passes.
template <typename T>
class BoundParameters {
 public:
  BoundParameters(Graph<T>& graph, const NamedTensors<T>& params, bool trainable) {
    for (const auto& [name, value] : params) {
      vars_.emplace_back(name, trainable ? graph.parameter(value, name) : graph.constant(value));
      index_.emplace(name, vars_.size() - 1);
    }
  }

  /// Wraps leaves that already live in a graph, e.g. for gradient checks.
  explicit BoundParameters(std::vector<std::pair<std::string, Var<T>>> vars) : vars_(std::move(vars)) {
    for (std::size_t i = 0; i < vars_.size(); ++i) index_.emplace(vars_[i].first, i);
  }

  Var<T> operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("checkpoint has no parameter '" + name + "'");
    return vars_[it->second].second;
  }

  const std::vector<std::pair<std::string, Var<T>>>& all() const noexcept { return vars_; }

 private:
  std::vector<std::pair<std::string, Var<T>>> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace segxfer
