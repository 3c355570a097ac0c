// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "davs/core/io_util.hpp"
#include "davs/core/nn.hpp"

namespace davs::train {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with per-group step counts. Each call updates exactly the listed
// groups and nothing else; parameters whose grad buffer was never touched in
// the current step are skipped (their moments stay put), which makes
// "updated the wrong subnetwork" bugs impossible rather than just unlikely.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }

  void update_groups(core::ParamStore<T>& store,
                     const std::vector<std::string>& groups) {
    for (const auto& g : groups) {
      const long t = ++step_[g];
      const T bc1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, t));
      const T bc2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, t));
      for (auto& [name, var] : store.group(g)) {
        if (!var.has_grad()) continue;
        auto& st = state_[g][name];
        if (st.m.numel() != var.numel()) {
          st.m = core::Tensor<T>(var.shape());
          st.v = core::Tensor<T>(var.shape());
        }
        const T* grad = var.node()->grad.data();
        T* m = st.m.data();
        T* v = st.v.data();
        T* p = var.mutable_value().data();
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps);
        const long n = var.numel();
        for (long i = 0; i < n; ++i) {
          m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
          v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
          const T mhat = m[i] / bc1;
          const T vhat = v[i] / bc2;
          p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
      }
    }
  }

  long step_count(const std::string& group) const {
    auto it = step_.find(group);
    return it == step_.end() ? 0 : it->second;
  }

  // Raw little-endian dump of moments and step counts; resuming a run
  // restores the optimizer bit-exactly.
  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out;
    const char magic[8] = {'D', 'A', 'V', 'S', 'O', 'P', 'T', '1'};
    out.insert(out.end(), magic, magic + 8);
    core::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(step_.size()));
    for (const auto& [g, t] : step_) {
      append_str(out, g);
      core::append_le<std::int64_t>(out, t);
    }
    std::uint32_t nparams = 0;
    for (const auto& [g, params] : state_) nparams += params.size();
    core::append_le<std::uint32_t>(out, nparams);
    for (const auto& [g, params] : state_) {
      for (const auto& [name, st] : params) {
        append_str(out, g);
        append_str(out, name);
        core::append_le<std::int64_t>(out, st.m.numel());
        append_blob(out, st.m);
        append_blob(out, st.v);
      }
    }
    return out;
  }

  void deserialize(const std::vector<std::uint8_t>& bytes) {
    core::ByteReader r(bytes, "optimizer state");
    char magic[8];
    r.take_bytes(magic, 8);
    if (std::string(magic, 8) != "DAVSOPT1")
      throw FormatError("optimizer state has wrong magic");
    step_.clear();
    state_.clear();
    const auto ngroups = r.take<std::uint32_t>();
    for (std::uint32_t i = 0; i < ngroups; ++i) {
      std::string g = take_str(r);
      step_[g] = r.take<std::int64_t>();
    }
    const auto nparams = r.take<std::uint32_t>();
    for (std::uint32_t i = 0; i < nparams; ++i) {
      std::string g = take_str(r);
      std::string name = take_str(r);
      const long n = r.take<std::int64_t>();
      auto& st = state_[g][name];
      st.m = core::Tensor<T>({n});
      st.v = core::Tensor<T>({n});
      take_blob(r, st.m);
      take_blob(r, st.v);
    }
    if (!r.done()) throw FormatError("optimizer state has trailing bytes");
  }

  // Moments are stored flat; reattach shapes lazily on the next update.
  void reshape_to(core::ParamStore<T>& store) {
    for (auto& [g, params] : state_)
      for (auto& [name, st] : params) {
        core::Var<T>* var = store.find(g, name);
        if (!var) throw CheckpointMismatchError(
            "optimizer state references unknown parameter " + g + "/" + name);
        if (st.m.numel() != var->numel())
          throw CheckpointMismatchError(
              "optimizer state size mismatch for " + g + "/" + name);
        st.m = st.m.reshaped(var->shape());
        st.v = st.v.reshaped(var->shape());
      }
  }

 private:
  struct State {
    core::Tensor<T> m, v;
  };

  static void append_str(std::vector<std::uint8_t>& out, const std::string& s) {
    core::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }

  static std::string take_str(core::ByteReader& r) {
    const auto n = r.take<std::uint32_t>();
    return r.take_string(n);
  }

  static void append_blob(std::vector<std::uint8_t>& out,
                          const core::Tensor<T>& t) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
    out.insert(out.end(), p, p + sizeof(T) * t.numel());
  }

  static void take_blob(core::ByteReader& r, core::Tensor<T>& t) {
    r.take_bytes(t.data(), sizeof(T) * t.numel());
  }

  AdamConfig cfg_;
  std::map<std::string, std::map<std::string, State>> state_;
  std::map<std::string, long> step_;
};

}  // namespace davs::train
