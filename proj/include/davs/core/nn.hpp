// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "davs/core/autodiff.hpp"
#include "davs/core/rng.hpp"
#include "davs/core/tensor.hpp"

namespace davs::core {

// Named parameter groups. Groups are the unit of optimization, freezing and
// checkpointing; the training schedule updates disjoint group lists per
// sub-step. Iteration order is deterministic (sorted groups, insertion order
// within a group).
template <typename T>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Var<T>>;

  Var<T>& add(const std::string& group, const std::string& name,
              Tensor<T> init) {
    auto& g = groups_[group];
    for (const auto& e : g)
      DAVS_CHECK(e.first != name, "duplicate parameter " + group + "/" + name);
    g.emplace_back(name, Var<T>(std::move(init), true));
    return g.back().second;
  }

  bool has_group(const std::string& group) const {
    return groups_.count(group) > 0;
  }

  std::vector<Entry>& group(const std::string& name) {
    auto it = groups_.find(name);
    DAVS_CHECK(it != groups_.end(), "unknown parameter group: " + name);
    return it->second;
  }

  const std::vector<Entry>& group(const std::string& name) const {
    auto it = groups_.find(name);
    DAVS_CHECK(it != groups_.end(), "unknown parameter group: " + name);
    return it->second;
  }

  std::vector<std::string> group_names() const {
    std::vector<std::string> out;
    out.reserve(groups_.size());
    for (const auto& [k, v] : groups_) out.push_back(k);
    return out;
  }

  Var<T>* find(const std::string& group, const std::string& name) {
    auto it = groups_.find(group);
    if (it == groups_.end()) return nullptr;
    for (auto& e : it->second)
      if (e.first == name) return &e.second;
    return nullptr;
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& [g, params] : groups_)
      for (auto& [name, var] : params) fn(g, name, var);
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [g, params] : groups_)
      for (const auto& [name, var] : params) fn(g, name, var);
  }

  long total_elements() const {
    long n = 0;
    for_each([&](const std::string&, const std::string&, const Var<T>& v) {
      n += v.numel();
    });
    return n;
  }

  void zero_grad() {
    for_each([](const std::string&, const std::string&, Var<T>& v) {
      v.zero_grad();
    });
  }

  void set_requires_grad(const std::string& group_name, bool rg) {
    for (auto& [name, var] : group(group_name)) var.set_requires_grad(rg);
  }

  // Byte-level snapshot of one group, for bit-identity assertions.
  std::vector<T> snapshot(const std::string& group_name) const {
    std::vector<T> out;
    for (const auto& [name, var] : group(group_name)) {
      const auto& v = var.value().vec();
      out.insert(out.end(), v.begin(), v.end());
    }
    return out;
  }

 private:
  std::map<std::string, std::vector<Entry>> groups_;
};

// Temporarily removes a group from gradient flow. Used for the encoder-side
// adversarial losses where the opposing classifier must stay fixed. Backward
// closures consult each parameter's requires_grad flag when they run, so the
// guard must stay alive across both the forward pass and the backward() call
// it is meant to gate.
template <typename T>
class FreezeGuard {
 public:
  FreezeGuard(ParamStore<T>& store, const std::string& group)
      : store_(&store), group_(group) {
    for (auto& [name, var] : store_->group(group_)) {
      prev_.push_back(var.requires_grad());
      var.set_requires_grad(false);
    }
  }

  ~FreezeGuard() {
    auto& g = store_->group(group_);
    for (size_t i = 0; i < g.size(); ++i)
      g[i].second.set_requires_grad(prev_[i]);
  }

  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParamStore<T>* store_;
  std::string group_;
  std::vector<bool> prev_;
};

// Kaiming-style init for leaky-ReLU stacks, drawn from a stream keyed on the
// parameter's full name so init is independent of construction order.
template <typename T>
Tensor<T> init_normal_fan_in(const Rng& model_rng, const std::string& key,
                             Shape shape, long fan_in, double slope) {
  Rng rng = model_rng.child(key);
  const double gain = std::sqrt(2.0 / (1.0 + slope * slope));
  const double stddev = gain / std::sqrt(static_cast<double>(fan_in));
  Tensor<T> t(std::move(shape));
  for (long i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T>
struct LinearLayer {
  Var<T> w, b;

  LinearLayer() = default;
  LinearLayer(ParamStore<T>& ps, const Rng& model_rng, const std::string& group,
              const std::string& name, long in, long out, double slope = 1.0) {
    w = ps.add(group, name + ".w",
               init_normal_fan_in<T>(model_rng, group + "/" + name + ".w",
                                     {out, in}, in, slope));
    b = ps.add(group, name + ".b", Tensor<T>({out}));
  }

  Var<T> operator()(const Var<T>& x) const { return linear(x, w, b); }
};

template <typename T>
struct ConvLayer {
  Var<T> w, b;
  long stride = 1, pad = 0;

  ConvLayer() = default;
  ConvLayer(ParamStore<T>& ps, const Rng& model_rng, const std::string& group,
            const std::string& name, long ci, long co, long kh, long kw,
            long stride_, long pad_, double slope = 0.2)
      : stride(stride_), pad(pad_) {
    w = ps.add(group, name + ".w",
               init_normal_fan_in<T>(model_rng, group + "/" + name + ".w",
                                     {co, ci, kh, kw}, ci * kh * kw, slope));
    b = ps.add(group, name + ".b", Tensor<T>({co}));
  }

  Var<T> operator()(const Var<T>& x) const {
    return conv2d(x, w, b, stride, pad);
  }
};

}  // namespace davs::core
