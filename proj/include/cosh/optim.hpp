#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "cosh/autograd.hpp"
#include "cosh/error.hpp"
#include "cosh/tensor.hpp"

namespace coshdit {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. Gradients are zeroed
// after every step.
class Adam {
 public:
  explicit Adam(std::vector<Var> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    slots_.reserve(params_.size());
    for (const Var& p : params_)
      slots_.push_back({Tensor(p->value.shape()), Tensor(p->value.shape())});
  }

  int step_count() const { return step_count_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step_count_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step_count_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Node& p = *params_[i];
      p.ensure_grad();
      Tensor& m = slots_[i].m;
      Tensor& v = slots_[i].v;
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = p.grad[j];
        if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient");
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        p.value[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
      p.zero_grad();
    }
  }

  // Reset first/second moments for one row of a matrix parameter; used when
  // a codebook entry is re-seeded.
  void reset_moment_rows(const Var& param, int row) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].get() != param.get()) continue;
      const int d = param->value.cols();
      for (int c = 0; c < d; ++c) {
        slots_[i].m(row, c) = 0.0;
        slots_[i].v(row, c) = 0.0;
      }
      return;
    }
    throw ShapeError("adam: parameter not managed by this optimizer");
  }

 private:
  struct Slot {
    Tensor m, v;
  };
  std::vector<Var> params_;
  std::vector<Slot> slots_;
  AdamConfig cfg_;
  int step_count_ = 0;
};

// Central-difference check of the tape. loss_fn must rebuild the graph from
// the current parameter values on every call. Returns the max over all
// parameter entries of |analytic - numeric| / max(1, |analytic|).
inline double grad_check(const std::function<Var()>& loss_fn, const std::vector<Var>& params,
                         double perturbation) {
  if (perturbation < 1e-7 || perturbation > 1e-4)
    throw ValidationError("grad_check: perturbation outside [1e-7, 1e-4]");

  Var loss = loss_fn();
  if (!loss->value.all_finite()) throw NumericError("grad_check: non-finite loss");
  for (const Var& p : params) {
    p->ensure_grad();
    p->zero_grad();
  }
  backward(loss);

  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const Var& p : params) {
    p->ensure_grad();
    analytic.push_back(p->grad);
  }

  double worst = 0.0;
  NoGradGuard ng;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Node& p = *params[pi];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double saved = p.value[j];
      p.value[j] = saved + perturbation;
      const double up = loss_fn()->value[0];
      p.value[j] = saved - perturbation;
      const double dn = loss_fn()->value[0];
      p.value[j] = saved;
      if (!std::isfinite(up) || !std::isfinite(dn))
        throw NumericError("grad_check: non-finite perturbed loss");
      const double numeric = (up - dn) / (2.0 * perturbation);
      const double a = analytic[pi][j];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      worst = std::max(worst, err);
    }
    p.zero_grad();
  }
  return worst;
}

}  // namespace coshdit
