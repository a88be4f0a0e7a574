#pragma once

#include "fusion/denoiser.h"

#include <string_view>
#include <vector>

namespace fusion {

enum class ScheduleKind { Linear, Cosine };

ScheduleKind parse_schedule_kind(std::string_view name);
std::string_view to_string(ScheduleKind kind);

/// Cumulative signal coefficients abar[0..T] with abar[0] = 1, plus the
/// per-step alpha[t] = abar[t] / abar[t-1] and beta[t] = 1 - alpha[t].
struct NoiseSchedule {
  int T = 0;
  ScheduleKind kind = ScheduleKind::Linear;
  std::vector<double> alpha_bar;
  std::vector<double> alpha;
  std::vector<double> beta;

  void check_step(int t) const; // throws StepOutOfRange
  /// Variance of the true posterior q(x_{t-1} | x_t, x_0).
  double posterior_variance(int t) const;
};

/// Linear betas span [1e-4, 2e-2] * (1000 / T) so that abar_T is near zero
/// for any T; cosine follows the squared-cosine abar curve.
NoiseSchedule make_schedule(int T, ScheduleKind kind = ScheduleKind::Linear);

/// X_t = sqrt(abar_t) X_0 + sqrt(1 - abar_t) eps.
template <typename Derived>
RowMatrix<typename Derived::Scalar> q_sample(const NoiseSchedule& s, const Eigen::MatrixBase<Derived>& x0, int t,
                                              const Eigen::MatrixBase<Derived>& eps) {
  s.check_step(t);
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "noise must match the clean motion's shape");
  }
  using S = typename Derived::Scalar;
  const S a = static_cast<S>(std::sqrt(s.alpha_bar[t]));
  const S b = static_cast<S>(std::sqrt(1.0 - s.alpha_bar[t]));
  return a * x0 + b * eps;
}

/// Coefficients of the posterior mean mu = c0 * X0_hat + ct * X_t.
struct PosteriorCoefficients {
  double c0 = 0.0;
  double ct = 0.0;
};
PosteriorCoefficients posterior_coefficients(const NoiseSchedule& s, int t);

enum class AncestralVariance {
  Posterior, // beta_tilde_t, the DDPM posterior
  Beta,      // 1 - alpha_t
};

/// One stochastic reverse step X_t -> X_{t-1}. The t = 1 step adds no noise.
template <typename S>
RowMatrix<S> ancestral_step(const DenoiserT<S>& model, const NoiseSchedule& s, const RowMatrix<S>& x_t, int t,
                            const RowMatrix<S>& noise, AncestralVariance variance = AncestralVariance::Posterior);

/// Generalized DDIM update X_t -> X_{t_next} with stochasticity eta.
/// `noise` is only read when eta > 0.
template <typename S>
RowMatrix<S> ddim_step(const DenoiserT<S>& model, const NoiseSchedule& s, const RowMatrix<S>& x_t, int t, int t_next,
                       double eta = 0.0, const RowMatrix<S>* noise = nullptr);

/// Deterministic update coefficients: X_next = a * X0_hat + b * X_t.
struct DdimCoefficients {
  double a = 0.0;
  double b = 0.0;
};
DdimCoefficients ddim_coefficients(const NoiseSchedule& s, int t, int t_next);

/// `count` uniformly spaced indices from T down to 0 (count + 1 entries).
std::vector<int> ddim_steps(int T, int count = 10);

/// Throws BadStepList unless strictly decreasing, ending at 0, first <= T.
void validate_steps(const NoiseSchedule& s, const std::vector<int>& steps);

/// Saved denoiser calls of a chain, for backpropagation to x_T.
template <typename S>
struct OdeTrace {
  std::vector<int> steps;
  std::vector<ForwardCache<S>> caches;
};

/// Deterministic DDIM chain from x_T through `steps`; returns X_0.
template <typename S>
RowMatrix<S> ode_sample(const DenoiserT<S>& model, const NoiseSchedule& s, const RowMatrix<S>& x_T,
                        const std::vector<int>& steps, OdeTrace<S>* trace = nullptr);

/// dL/dx_T from dL/dX_0 through a recorded chain.
template <typename S>
RowMatrix<S> ode_backward(const DenoiserT<S>& model, const NoiseSchedule& s, const OdeTrace<S>& trace,
                          const RowMatrix<S>& d_x0);

/// Full stochastic sampling T -> 0 with ancestral steps.
template <typename S>
RowMatrix<S> ancestral_sample(const DenoiserT<S>& model, const NoiseSchedule& s, int frames, Rng& rng);

} // namespace fusion
