#pragma once

// Masked discrete diffusion over token sequences. The state space is the
// K_c codebook entries plus an absorbing MASK state at index K_c. Matrices
// are column-stochastic: [Q^t]_{mn} = q(d^t = m | d^{t-1} = n).
//
// Schedule family: mask-in gamma_t = 1/(T-t+1), uniform-replace
// beta_t = (u/(K_c T))(1-gamma_t), stay alpha_t = (1-gamma_t)(1-u/T).
// gamma telescopes so the marginal mask probability after t steps is
// exactly t/T for every leak u. Cumulative matrices are built from the
// scalar recurrences of the closed family; tests verify them against
// iterated per-step products.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cosh/error.hpp"
#include "cosh/tensor.hpp"

namespace coshdit {

using TokenSequence = std::vector<int>;

struct TransitionSchedule {
  int steps = 0;      // T
  int codebook = 0;   // K_c
  double leak = 0.0;  // u
  std::vector<Tensor> per_step;    // T matrices of (K_c+1)^2
  std::vector<Tensor> cumulative;  // Q-bar^t = Q^t ... Q^1

  int mask_token() const { return codebook; }
  int num_states() const { return codebook + 1; }

  // t in [1, T]
  const Tensor& step_matrix(int t) const { return per_step[static_cast<std::size_t>(t - 1)]; }
  const Tensor& cumulative_matrix(int t) const {
    return cumulative[static_cast<std::size_t>(t - 1)];
  }
  // Q-bar^0 is the identity; this accessor folds that case in.
  double cumulative_entry(int t, int m, int n) const {
    if (t == 0) return m == n ? 1.0 : 0.0;
    return cumulative_matrix(t)(m, n);
  }

  void check_step(int t) const {
    if (t < 1 || t > steps)
      throw ValidationError("schedule: step " + std::to_string(t) + " outside [1," +
                            std::to_string(steps) + "]");
  }
  void check_state(int s) const {
    if (s < 0 || s > codebook)
      throw ValidationError("schedule: state " + std::to_string(s) + " outside [0," +
                            std::to_string(codebook) + "]");
  }
};

inline TransitionSchedule build_schedule(int steps, int codebook, double leak) {
  if (steps < 1) throw ScheduleError("schedule: T must be >= 1");
  if (codebook < 2) throw ScheduleError("schedule: K_c must be >= 2");
  if (leak < 0.0 || leak > static_cast<double>(steps))
    throw ScheduleError("schedule: leak u must lie in [0, T]");

  TransitionSchedule s;
  s.steps = steps;
  s.codebook = codebook;
  s.leak = leak;
  const int k = codebook;
  const int n = k + 1;
  const int mask = k;
  s.per_step.reserve(static_cast<std::size_t>(steps));
  s.cumulative.reserve(static_cast<std::size_t>(steps));

  double survival = 1.0;   // prod (1 - gamma_s): probability of never masking
  double alpha_bar = 1.0;  // prod alpha_s
  for (int t = 1; t <= steps; ++t) {
    const double gamma = 1.0 / static_cast<double>(steps - t + 1);
    const double beta = leak / (static_cast<double>(k) * steps) * (1.0 - gamma);
    const double alpha = 1.0 - gamma - static_cast<double>(k) * beta;
    if (alpha < 0.0 || beta < 0.0 || gamma < 0.0)
      throw ScheduleError("schedule: negative transition entry at step " + std::to_string(t));

    Tensor q({n, n});
    for (int col = 0; col < k; ++col) {
      for (int row = 0; row < k; ++row) q(row, col) = beta;
      q(col, col) += alpha;
      q(mask, col) = gamma;
    }
    q(mask, mask) = 1.0;  // absorbing
    s.per_step.push_back(std::move(q));

    survival *= 1.0 - gamma;
    alpha_bar *= alpha;
    const double gamma_bar = 1.0 - survival;
    // survival - alpha_bar rather than 1 - gamma_bar - alpha_bar: identical
    // algebraically, but exactly zero when the leak is zero
    const double beta_bar = (survival - alpha_bar) / static_cast<double>(k);
    Tensor qb({n, n});
    for (int col = 0; col < k; ++col) {
      for (int row = 0; row < k; ++row) qb(row, col) = beta_bar;
      qb(col, col) += alpha_bar;
      qb(mask, col) = gamma_bar;
    }
    qb(mask, mask) = 1.0;
    s.cumulative.push_back(std::move(qb));
  }
  return s;
}

namespace detail {

inline int sample_categorical(const double* probs, int n, double total, RandomStream& rng) {
  const double r = rng.uniform() * total;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    acc += probs[i];
    if (r < acc) return i;
  }
  // numerical tail: last state with nonzero mass
  for (int i = n - 1; i >= 0; --i)
    if (probs[i] > 0.0) return i;
  throw SupportError("sample_categorical: empty distribution");
}

}  // namespace detail

// Corrupt a clean sequence to diffusion time t by sampling each position
// independently from the cumulative column of its clean token.
inline TokenSequence q_sample(const TokenSequence& d0, int t, const TransitionSchedule& s,
                              RandomStream& rng) {
  s.check_step(t);
  const Tensor& qb = s.cumulative_matrix(t);
  const int n = s.num_states();
  TokenSequence out(d0.size());
  std::vector<double> col(static_cast<std::size_t>(n));
  for (std::size_t f = 0; f < d0.size(); ++f) {
    const int tok = d0[f];
    if (tok == s.mask_token())
      throw ValidationError("q_sample: MASK in clean input at position " + std::to_string(f));
    s.check_state(tok);
    for (int row = 0; row < n; ++row) col[static_cast<std::size_t>(row)] = qb(row, tok);
    out[f] = detail::sample_categorical(col.data(), n, 1.0, rng);
  }
  return out;
}

// Exact posterior q(d^{t-1} | d^t, d^0) over the K_c+1 states (Bayes over
// the forward chain). Products are evaluated in the log domain.
inline Tensor posterior(int d_t, int d0, int t, const TransitionSchedule& s) {
  s.check_step(t);
  s.check_state(d_t);
  s.check_state(d0);
  const int n = s.num_states();
  const double denom = s.cumulative_entry(t, d_t, d0);
  if (denom <= 0.0)
    throw SupportError("posterior: impossible (d_t, d0) pair under the schedule");
  const double log_denom = std::log(denom);
  const Tensor& q = s.step_matrix(t);
  Tensor out({n});
  for (int j = 0; j < n; ++j) {
    const double a = q(d_t, j);
    const double b = s.cumulative_entry(t - 1, j, d0);
    if (a <= 0.0 || b <= 0.0) continue;
    out[static_cast<std::size_t>(j)] = std::exp(std::log(a) + std::log(b) - log_denom);
  }
  return out;
}

// One reverse step: per position, mix the exact posteriors over all clean
// candidates weighted by the denoiser's distribution p0, then sample.
// keep[f] != 0 copies position f unchanged (prefix clamping). Candidates
// that are impossible given d_t are excluded; if nothing remains the
// mixture is degenerate.
inline TokenSequence reverse_step(const TokenSequence& d_t, const Tensor& p0, int t,
                                  const TransitionSchedule& s, RandomStream& rng,
                                  const std::vector<std::uint8_t>* keep = nullptr) {
  s.check_step(t);
  const int k = s.codebook;
  const int n = s.num_states();
  if (p0.rows() != static_cast<int>(d_t.size()) || p0.cols() != k)
    throw ShapeError("reverse_step: p0 must be positions x K_c");
  if (keep && keep->size() != d_t.size())
    throw ShapeError("reverse_step: keep mask length mismatch");

  const Tensor& q = s.step_matrix(t);
  TokenSequence out(d_t.size());
  std::vector<double> weight(static_cast<std::size_t>(k));
  std::vector<double> mix(static_cast<std::size_t>(n));
  for (std::size_t f = 0; f < d_t.size(); ++f) {
    if (keep && (*keep)[f]) {
      out[f] = d_t[f];
      continue;
    }
    const int cur = d_t[f];
    s.check_state(cur);
    double row_sum = 0.0;
    for (int c = 0; c < k; ++c) {
      const double pc = p0(static_cast<int>(f), c);
      if (pc < 0.0) throw ValidationError("reverse_step: negative p0 entry");
      row_sum += pc;
    }
    if (std::abs(row_sum - 1.0) > 1e-9)
      throw ValidationError("reverse_step: p0 row does not sum to 1");

    for (int c = 0; c < k; ++c) {
      const double pc = p0(static_cast<int>(f), c);
      const double denom = s.cumulative_entry(t, cur, c);
      weight[static_cast<std::size_t>(c)] = (pc > 0.0 && denom > 0.0) ? pc / denom : 0.0;
    }
    double total = 0.0;
    for (int j = 0; j < n; ++j) {
      const double qj = q(cur, j);
      double acc = 0.0;
      if (qj > 0.0) {
        for (int c = 0; c < k; ++c) {
          const double w = weight[static_cast<std::size_t>(c)];
          if (w > 0.0) acc += w * s.cumulative_entry(t - 1, j, c);
        }
        acc *= qj;
      }
      mix[static_cast<std::size_t>(j)] = acc;
      total += acc;
    }
    if (!(total > 0.0))
      throw SupportError("reverse_step: degenerate mixture at position " + std::to_string(f));
    out[f] = detail::sample_categorical(mix.data(), n, total, rng);
  }
  return out;
}

}  // namespace coshdit
