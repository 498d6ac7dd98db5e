#pragma once

// AdamW with decoupled weight decay, and the linear warmup/decay
// learning-rate schedules used for pre-training and finetuning.

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "caplab/tensor.hpp"

namespace caplab {

enum class ScheduleKind { Pretrain, Finetune };

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::Pretrain;
  double peak_lr = 2e-4;
  long total_steps = 1;
  double warmup_fraction = 0.02;  // ignored for finetune

  void validate() const {
    if (total_steps < 1)
      throw std::invalid_argument("ScheduleSpec: total_steps must be >= 1");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
      throw std::invalid_argument("ScheduleSpec: warmup_fraction outside [0,1)");
  }
};

// Pretrain: linear 0 -> peak over the warmup fraction, then linear peak -> 0.
// Finetune: linear peak -> 0 from step 0, no warmup.
inline double lr_at(long step, const ScheduleSpec& spec) {
  spec.validate();
  if (step < 0 || step > spec.total_steps)
    throw std::invalid_argument("lr_at: step " + std::to_string(step) +
                                " outside [0," +
                                std::to_string(spec.total_steps) + "]");
  const double t = static_cast<double>(step);
  const double total = static_cast<double>(spec.total_steps);
  if (spec.kind == ScheduleKind::Finetune)
    return spec.peak_lr * (total - t) / total;
  const double warm = spec.warmup_fraction * total;
  if (warm > 0.0 && t <= warm) return spec.peak_lr * t / warm;
  return spec.peak_lr * (total - t) / (total - warm);
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double grad_clip = 0.0;  // 0 = off
};

// Per-parameter first/second moments plus the shared step counter.
template <class T>
struct OptimizerState {
  AdamWConfig config;
  long step = 0;
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
};

struct NanGradientError : std::runtime_error {
  explicit NanGradientError(const std::string& name)
      : std::runtime_error("non-finite gradient in parameter '" + name + "'") {}
};

// One AdamW update over named parameters. Weight decay is decoupled: applied
// to the parameter directly, never through the moment estimates. Rejects the
// whole step if any gradient is non-finite.
template <class T>
void adamw_step(std::vector<std::pair<std::string, Tensor<T>*>>& params,
                OptimizerState<T>& state, double lr) {
  for (auto& [name, p] : params)
    for (T g : p->grad())
      if (!std::isfinite(static_cast<double>(g))) throw NanGradientError(name);

  if (state.config.grad_clip > 0.0) {
    double sq = 0.0;
    for (auto& [name, p] : params)
      for (T g : p->grad()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm > state.config.grad_clip) {
      const T s = static_cast<T>(state.config.grad_clip / norm);
      for (auto& [name, p] : params)
        for (T& g : p->grad()) g *= s;
    }
  }

  state.step += 1;
  const double b1 = state.config.beta1, b2 = state.config.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != p->numel()) m.assign(p->numel(), T(0));
    if (v.size() != p->numel()) v.assign(p->numel(), T(0));
    auto& pv = p->values();
    auto& pg = p->grad();
    for (size_t i = 0; i < pv.size(); ++i) {
      const double g = static_cast<double>(pg[i]);
      m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g);
      v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * g * g);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double x = static_cast<double>(pv[i]);
      x -= lr * state.config.weight_decay * x;
      x -= lr * mhat / (std::sqrt(vhat) + state.config.eps);
      pv[i] = static_cast<T>(x);
    }
  }
}

}  // namespace caplab
