// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/tensor.hpp"

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dranet {

/// Insertion-ordered map from unique names to tensors.
template <typename Scalar>
class NamedTensors {
 public:
  using Entry = std::pair<std::string, Tensor4<Scalar>>;

  void insert(std::string name, Tensor4<Scalar> value) {
    if (index_.contains(name)) throw ConfigError("duplicate tensor name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(value));
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Tensor4<Scalar>& at(const std::string& name) { return entries_[position(name)].second; }
  const Tensor4<Scalar>& at(const std::string& name) const { return entries_[position(name)].second; }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  Entry& operator[](std::size_t i) { return entries_[i]; }

  Index scalar_count() const {
    Index total = 0;
    for (const auto& [_, t] : entries_) total += t.size();
    return total;
  }

  bool operator==(const NamedTensors& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& [na, ta] = entries_[i];
      const auto& [nb, tb] = other.entries_[i];
      if (na != nb || !(ta == tb)) return false;
    }
    return true;
  }

  template <typename Other>
  NamedTensors<Other> cast() const {
    NamedTensors<Other> out;
    for (const auto& [name, t] : entries_) out.insert(name, t.template cast<Other>());
    return out;
  }

 private:
  std::size_t position(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown tensor name '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace dranet
