#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fusion {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Row-major double matrix used for feature tensors (one row per frame).
using FeatureMatrix = RowMatrix<double>;

enum class ErrorCode {
  DegenerateRotation,
  NotARotation,
  SizeMismatch,
  UnknownLabel,
  IncompleteMirrorMap,
  MissingCapsule,
  InvalidSkeleton,
  GimbalDegenerate,
  TooShort,
  SkeletonMismatch,
  LengthMismatch,
  SideMismatch,
  RetryExhausted,
  InvalidConfig,
  ShapeMismatch,
  NonFiniteInput,
  StepOutOfRange,
  NonFiniteLoss,
  BadStepList,
  EmptyObservationSet,
  UnresolvableReference,
  NonFiniteGradient,
  NoActiveConstraint,
  SchemaError,
  UnknownReference,
  FrameOutOfRange,
  EmptyActiveRange,
  EndpointError,
  InvalidPlanAfterRetries,
  IoError,
};

std::string_view to_string(ErrorCode code);

/// The single exception type thrown by the library. The code identifies the
/// failure class; the message carries the details (and raw payloads where
/// the caller needs them for debugging, e.g. an LLM reply).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept {
    return code_;
  }

 private:
  ErrorCode code_;
};

/// True for error codes caused by malformed user input files (CLI exit 2).
bool is_schema_error(ErrorCode code);

using Rng = std::mt19937_64;

/// Derives an independent generator from a base seed and a stream index
/// (splitmix64 finalizer), so per-step / per-clip randomness does not depend
/// on evaluation order.
Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0);

/// Fills a matrix with standard normal samples in row-major order.
template <typename Derived>
void fill_normal(Eigen::MatrixBase<Derived>& m, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      m(r, c) = static_cast<typename Derived::Scalar>(normal(rng));
    }
  }
}

Mat3 rot_x(double angle);
Mat3 rot_y(double angle);
Mat3 rot_z(double angle);

/// Rotation of `angle` radians about a (not necessarily normalized) axis.
Mat3 axis_angle(const Vec3& axis, double angle);

/// 64-bit FNV-1a over a byte range, chained through `state`.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t state = 1469598103934665603ull);

} // namespace fusion
