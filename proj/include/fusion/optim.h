#pragma once

#include <Eigen/Core>

#include <cmath>

namespace fusion {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled weight decay (AdamW); 0 gives plain Adam.
  double weight_decay = 0.0;
};

/// Adam with bias correction and decoupled weight decay.
template <typename S>
class Adam {
 public:
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  Adam() = default;
  Adam(const AdamConfig& config, Eigen::Index size)
      : config_(config), m_(Vec::Zero(size)), v_(Vec::Zero(size)) {}

  template <typename P, typename G>
  void step(Eigen::MatrixBase<P>& params, const Eigen::MatrixBase<G>& grad) {
    ++t_;
    const S b1 = static_cast<S>(config_.beta1);
    const S b2 = static_cast<S>(config_.beta2);
    const double c1 = 1.0 - std::pow(config_.beta1, t_);
    const double c2 = 1.0 - std::pow(config_.beta2, t_);
    const S lr = static_cast<S>(config_.lr);
    const S step_size = static_cast<S>(config_.lr / c1);
    const S inv_c2 = static_cast<S>(1.0 / std::sqrt(c2));
    const S eps = static_cast<S>(config_.eps);
    auto p = params.derived().reshaped();
    const auto g = grad.derived().reshaped();
    if (config_.weight_decay != 0.0) {
      p *= S(1) - lr * static_cast<S>(config_.weight_decay);
    }
    m_ = b1 * m_ + (S(1) - b1) * g;
    v_ = b2 * v_ + (S(1) - b2) * g.cwiseAbs2();
    p.array() -= step_size * m_.array() / (v_.array().sqrt() * inv_c2 + eps);
  }

  const AdamConfig& config() const {
    return config_;
  }
  AdamConfig& config() {
    return config_;
  }
  long long steps() const {
    return t_;
  }
  const Vec& first_moment() const {
    return m_;
  }
  const Vec& second_moment() const {
    return v_;
  }
  void restore(const Vec& m, const Vec& v, long long steps) {
    m_ = m;
    v_ = v;
    t_ = steps;
  }

 private:
  AdamConfig config_;
  Vec m_;
  Vec v_;
  long long t_ = 0;
};

/// Scales `grad` in place so its L2 norm is at most `max_norm` (when
/// positive); returns the norm before clipping.
template <typename Derived>
double clip_grad_norm(Eigen::MatrixBase<Derived>& grad, double max_norm) {
  const double norm = static_cast<double>(grad.norm());
  if (max_norm > 0.0 && norm > max_norm) {
    grad *= static_cast<typename Derived::Scalar>(max_norm / norm);
  }
  return norm;
}

} // namespace fusion
