#pragma once

#include <map>
#include <string>
#include <vector>

#include "tsegcn/tensor.hpp"

namespace tsegcn {

/// Named parameter tensors with per-name gradient accumulators.
/// Iteration order is lexicographic by name (std::map). Gradients accumulate
/// across backward calls; the optimizer zeroes them explicitly.
class ParamStore {
 public:
  struct Entry {
    Tensor value;
    Tensor grad;
    bool no_decay = false;  // excluded from weight decay by the optimizer
  };

  Tensor& add(const std::string& name, Tensor init, bool no_decay = false) {
    auto [it, inserted] = entries_.try_emplace(name);
    if (!inserted) throw ConfigError("parameter name already registered: " + name);
    it->second.grad = Tensor(init.shape());
    it->second.value = std::move(init);
    it->second.no_decay = no_decay;
    return it->second.value;
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  Tensor& value(const std::string& name) { return entry(name).value; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }
  Tensor& grad(const std::string& name) { return entry(name).grad; }
  const Tensor& grad(const std::string& name) const { return entry(name).grad; }

  void zero_grad() {
    for (auto& [name, e] : entries_) e.grad.fill(0.0);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
  }

  std::size_t count_scalars() const {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_) n += e.value.size();
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, Entry> entries_;
};

}  // namespace tsegcn
