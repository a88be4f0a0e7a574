#include "fusion/diffusion.h"

#include <cmath>
#include <numbers>

namespace fusion {

ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "linear") {
    return ScheduleKind::Linear;
  }
  if (name == "cosine") {
    return ScheduleKind::Cosine;
  }
  throw Error(ErrorCode::InvalidConfig, "unknown schedule kind '" + std::string(name) + "'");
}

std::string_view to_string(ScheduleKind kind) {
  return kind == ScheduleKind::Linear ? "linear" : "cosine";
}

void NoiseSchedule::check_step(int t) const {
  if (t < 0 || t > T) {
    throw Error(ErrorCode::StepOutOfRange, "step " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  }
}

double NoiseSchedule::posterior_variance(int t) const {
  if (t < 1 || t > T) {
    throw Error(ErrorCode::StepOutOfRange, "posterior variance needs 1 <= t <= T");
  }
  return (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
}

NoiseSchedule make_schedule(int T, ScheduleKind kind) {
  if (T < 1) {
    throw Error(ErrorCode::InvalidConfig, "schedule needs T >= 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.kind = kind;
  s.alpha_bar.assign(T + 1, 1.0);
  s.alpha.assign(T + 1, 1.0);
  s.beta.assign(T + 1, 0.0);
  if (kind == ScheduleKind::Linear) {
    const double scale = 1000.0 / T;
    const double lo = std::min(1e-4 * scale, 0.5);
    const double hi = std::min(2e-2 * scale, 0.999);
    for (int t = 1; t <= T; ++t) {
      s.beta[t] = T == 1 ? hi : lo + (hi - lo) * (t - 1) / (T - 1);
    }
  } else {
    constexpr double offset = 0.008;
    const auto f = [&](double t) {
      const double c = std::cos((t / T + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int t = 1; t <= T; ++t) {
      s.beta[t] = std::min(1.0 - f(t) / f(t - 1), 0.999);
    }
  }
  for (int t = 1; t <= T; ++t) {
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  return s;
}

PosteriorCoefficients posterior_coefficients(const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.T) {
    throw Error(ErrorCode::StepOutOfRange, "posterior needs 1 <= t <= T");
  }
  const double ab = s.alpha_bar[t];
  const double ab_prev = s.alpha_bar[t - 1];
  return {std::sqrt(ab_prev) * s.beta[t] / (1.0 - ab), std::sqrt(s.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab)};
}

template <typename S>
RowMatrix<S> ancestral_step(const DenoiserT<S>& model, const NoiseSchedule& s, const RowMatrix<S>& x_t, int t,
                            const RowMatrix<S>& noise, AncestralVariance variance) {
  const PosteriorCoefficients pc = posterior_coefficients(s, t);
  const RowMatrix<S> x0 = model.forward(x_t, t);
  RowMatrix<S> out = static_cast<S>(pc.c0) * x0 + static_cast<S>(pc.ct) * x_t;
  if (t > 1) {
    if (noise.rows() != x_t.rows() || noise.cols() != x_t.cols()) {
      throw Error(ErrorCode::ShapeMismatch, "noise must match X_t");
    }
    const double var = variance == AncestralVariance::Posterior ? s.posterior_variance(t) : s.beta[t];
    out += static_cast<S>(std::sqrt(var)) * noise;
  }
  return out;
}

template <typename S>
RowMatrix<S> ddim_step(const DenoiserT<S>& model, const NoiseSchedule& s, const RowMatrix<S>& x_t, int t, int t_next,
                       double eta, const RowMatrix<S>* noise) {
  s.check_step(t);
  s.check_step(t_next);
  if (t_next >= t || t < 1) {
    throw Error(ErrorCode::BadStepList, "DDIM step must go from t >= 1 to a smaller index");
  }
  const double ab = s.alpha_bar[t];
  const double ab_next = s.alpha_bar[t_next];
  const double sigma =
      eta * std::sqrt((1.0 - ab_next) / (1.0 - ab)) * std::sqrt(std::max(0.0, 1.0 - ab / ab_next));
  const RowMatrix<S> x0 = model.forward(x_t, t);
  const RowMatrix<S> eps = (x_t - static_cast<S>(std::sqrt(ab)) * x0) / static_cast<S>(std::sqrt(1.0 - ab));
  RowMatrix<S> out = static_cast<S>(std::sqrt(ab_next)) * x0 +
                     static_cast<S>(std::sqrt(std::max(0.0, 1.0 - ab_next - sigma * sigma))) * eps;
  if (sigma > 0.0) {
    if (!noise || noise->rows() != x_t.rows() || noise->cols() != x_t.cols()) {
      throw Error(ErrorCode::ShapeMismatch, "stochastic DDIM step needs noise shaped like X_t");
    }
    out += static_cast<S>(sigma) * *noise;
  }
  return out;
}

DdimCoefficients ddim_coefficients(const NoiseSchedule& s, int t, int t_next) {
  const double ab = s.alpha_bar[t];
  const double ab_next = s.alpha_bar[t_next];
  const double b = std::sqrt(1.0 - ab_next) / std::sqrt(1.0 - ab);
  return {std::sqrt(ab_next) - b * std::sqrt(ab), b};
}

std::vector<int> ddim_steps(int T, int count) {
  if (count < 1 || count > T) {
    throw Error(ErrorCode::BadStepList, "step count must lie in [1, T]");
  }
  std::vector<int> out;
  for (int k = 0; k <= count; ++k) {
    out.push_back(static_cast<int>(std::lround(static_cast<double>(T) * (count - k) / count)));
  }
  return out;
}

void validate_steps(const NoiseSchedule& s, const std::vector<int>& steps) {
  if (steps.size() < 2) {
    throw Error(ErrorCode::BadStepList, "step list needs at least two entries");
  }
  if (steps.front() > s.T || steps.back() != 0) {
    throw Error(ErrorCode::BadStepList, "step list must start at or below T and end at 0");
  }
  for (std::size_t i = 1; i < steps.size(); ++i) {
    if (steps[i] >= steps[i - 1]) {
      throw Error(ErrorCode::BadStepList, "step list must be strictly decreasing");
    }
  }
}

template <typename S>
RowMatrix<S> ode_sample(const DenoiserT<S>& model, const NoiseSchedule& s, const RowMatrix<S>& x_T,
                        const std::vector<int>& steps, OdeTrace<S>* trace) {
  validate_steps(s, steps);
  if (trace) {
    trace->steps = steps;
    trace->caches.assign(steps.size() - 1, ForwardCache<S>{});
  }
  RowMatrix<S> x = x_T;
  for (std::size_t k = 0; k + 1 < steps.size(); ++k) {
    const int t = steps[k];
    const DdimCoefficients c = ddim_coefficients(s, t, steps[k + 1]);
    const RowMatrix<S> x0 = model.forward(x, t, trace ? &trace->caches[k] : nullptr);
    if (c.b == 0.0) {
      x = x0;
    } else {
      x = static_cast<S>(c.a) * x0 + static_cast<S>(c.b) * x;
    }
  }
  return x;
}

template <typename S>
RowMatrix<S> ode_backward(const DenoiserT<S>& model, const NoiseSchedule& s, const OdeTrace<S>& trace,
                          const RowMatrix<S>& d_x0) {
  RowMatrix<S> g = d_x0;
  RowMatrix<S> dx;
  for (std::size_t k = trace.caches.size(); k-- > 0;) {
    const DdimCoefficients c = ddim_coefficients(s, trace.steps[k], trace.steps[k + 1]);
    const RowMatrix<S> d_pred = c.b == 0.0 ? g : RowMatrix<S>(static_cast<S>(c.a) * g);
    model.backward(trace.caches[k], d_pred, &dx, nullptr);
    if (c.b == 0.0) {
      g = dx;
    } else {
      g = static_cast<S>(c.b) * g + dx;
    }
  }
  return g;
}

template <typename S>
RowMatrix<S> ancestral_sample(const DenoiserT<S>& model, const NoiseSchedule& s, int frames, Rng& rng) {
  RowMatrix<S> x(frames, model.config().input_dim);
  fill_normal(x, rng);
  RowMatrix<S> noise(frames, model.config().input_dim);
  for (int t = s.T; t >= 1; --t) {
    fill_normal(noise, rng);
    x = ancestral_step(model, s, x, t, noise);
  }
  return x;
}

#define FUSION_INSTANTIATE(S)                                                                                      \
  template RowMatrix<S> ancestral_step(const DenoiserT<S>&, const NoiseSchedule&, const RowMatrix<S>&, int,        \
                                       const RowMatrix<S>&, AncestralVariance);                                    \
  template RowMatrix<S> ddim_step(const DenoiserT<S>&, const NoiseSchedule&, const RowMatrix<S>&, int, int, double, \
                                  const RowMatrix<S>*);                                                            \
  template RowMatrix<S> ode_sample(const DenoiserT<S>&, const NoiseSchedule&, const RowMatrix<S>&,                 \
                                   const std::vector<int>&, OdeTrace<S>*);                                         \
  template RowMatrix<S> ode_backward(const DenoiserT<S>&, const NoiseSchedule&, const OdeTrace<S>&,                \
                                     const RowMatrix<S>&);                                                         \
  template RowMatrix<S> ancestral_sample(const DenoiserT<S>&, const NoiseSchedule&, int, Rng&);

FUSION_INSTANTIATE(float)
FUSION_INSTANTIATE(double)

#undef FUSION_INSTANTIATE

} // namespace fusion
