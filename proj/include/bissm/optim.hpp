#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "bissm/tensor.hpp"

namespace bissm {

/// Cosine decay from base_lr at step 0 to 0 at total_steps; no warmup.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr) {
  if (total_steps <= 0) throw ValueError("cosine_lr: total_steps must be positive");
  if (step < 0) throw ValueError("cosine_lr: negative step");
  if (step > total_steps) {
    std::fprintf(stderr, "cosine_lr: step %lld past total %lld, clamping lr to 0\n",
                 static_cast<long long>(step), static_cast<long long>(total_steps));
    return 0.0;
  }
  constexpr double pi = 3.14159265358979323846;
  return 0.5 * base_lr * (1.0 + std::cos(pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

/// First and second moment buffers for one parameter tensor.
template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<T> m;
  std::vector<T> v;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, applied at the group lr
  double grad_clip = 0.0;     // global-norm clip; 0 disables
};

/// Adam with per-group learning-rate multipliers (used for the layer-wise
/// ladder). step(lr) applies lr * group multiplier to each group.
template <typename T>
class Adam {
public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void add_group(std::vector<Tensor<T>> params, double lr_multiplier = 1.0) {
    for (auto& p : params)
      if (!p.requires_grad()) throw ValueError("Adam: parameter does not require grad");
    groups_.push_back({std::move(params), lr_multiplier});
    states_.emplace_back(groups_.back().params.size());
    for (std::size_t i = 0; i < groups_.back().params.size(); ++i) {
      auto& st = states_.back()[i];
      const auto n = static_cast<std::size_t>(groups_.back().params[i].numel());
      st.m.assign(n, T(0));
      st.v.assign(n, T(0));
    }
  }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& g : groups_) n += g.params.size();
    return n;
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.zero_grad();
  }

  /// One update over every group. Aborts (throws, no state mutated) if any
  /// gradient is non-finite.
  void step(double lr) {
    for (auto& g : groups_)
      for (auto& p : g.params) {
        if (!p.has_grad()) continue;
        for (T gv : p.grad())
          if (!std::isfinite(static_cast<double>(gv)))
            throw NumericError("Adam: non-finite gradient, step aborted");
      }

    double clip_scale = 1.0;
    if (cfg_.grad_clip > 0.0) {
      double sq = 0.0;
      for (auto& g : groups_)
        for (auto& p : g.params) {
          if (!p.has_grad()) continue;
          for (T gv : p.grad()) sq += static_cast<double>(gv) * static_cast<double>(gv);
        }
      const double norm = std::sqrt(sq);
      if (norm > cfg_.grad_clip) clip_scale = cfg_.grad_clip / norm;
    }

    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      auto& group = groups_[gi];
      const double lr_g = lr * group.lr_multiplier;
      for (std::size_t pi = 0; pi < group.params.size(); ++pi) {
        auto& p = group.params[pi];
        if (!p.has_grad()) continue;
        auto& st = states_[gi][pi];
        st.step += 1;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.step));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.step));
        auto vals = p.values_mut();
        auto grads = p.grad();
        for (std::size_t i = 0; i < vals.size(); ++i) {
          const double gv = static_cast<double>(grads[i]) * clip_scale;
          st.m[i] = static_cast<T>(cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gv);
          st.v[i] = static_cast<T>(cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gv * gv);
          const double mhat = static_cast<double>(st.m[i]) / bc1;
          const double vhat = static_cast<double>(st.v[i]) / bc2;
          double upd = lr_g * mhat / (std::sqrt(vhat) + cfg_.eps);
          if (cfg_.weight_decay > 0.0) upd += lr_g * cfg_.weight_decay * static_cast<double>(vals[i]);
          vals[i] = static_cast<T>(static_cast<double>(vals[i]) - upd);
        }
      }
    }
  }

private:
  struct Group {
    std::vector<Tensor<T>> params;
    double lr_multiplier;
  };
  AdamConfig cfg_;
  std::vector<Group> groups_;
  std::vector<std::vector<AdamState<T>>> states_;
};

}  // namespace bissm
