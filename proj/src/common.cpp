#include "fusion/common.h"

namespace fusion {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DegenerateRotation:
      return "DegenerateRotation";
    case ErrorCode::NotARotation:
      return "NotARotation";
    case ErrorCode::SizeMismatch:
      return "SizeMismatch";
    case ErrorCode::UnknownLabel:
      return "UnknownLabel";
    case ErrorCode::IncompleteMirrorMap:
      return "IncompleteMirrorMap";
    case ErrorCode::MissingCapsule:
      return "MissingCapsule";
    case ErrorCode::InvalidSkeleton:
      return "InvalidSkeleton";
    case ErrorCode::GimbalDegenerate:
      return "GimbalDegenerate";
    case ErrorCode::TooShort:
      return "TooShort";
    case ErrorCode::SkeletonMismatch:
      return "SkeletonMismatch";
    case ErrorCode::LengthMismatch:
      return "LengthMismatch";
    case ErrorCode::SideMismatch:
      return "SideMismatch";
    case ErrorCode::RetryExhausted:
      return "RetryExhausted";
    case ErrorCode::InvalidConfig:
      return "InvalidConfig";
    case ErrorCode::ShapeMismatch:
      return "ShapeMismatch";
    case ErrorCode::NonFiniteInput:
      return "NonFiniteInput";
    case ErrorCode::StepOutOfRange:
      return "StepOutOfRange";
    case ErrorCode::NonFiniteLoss:
      return "NonFiniteLoss";
    case ErrorCode::BadStepList:
      return "BadStepList";
    case ErrorCode::EmptyObservationSet:
      return "EmptyObservationSet";
    case ErrorCode::UnresolvableReference:
      return "UnresolvableReference";
    case ErrorCode::NonFiniteGradient:
      return "NonFiniteGradient";
    case ErrorCode::NoActiveConstraint:
      return "NoActiveConstraint";
    case ErrorCode::SchemaError:
      return "SchemaError";
    case ErrorCode::UnknownReference:
      return "UnknownReference";
    case ErrorCode::FrameOutOfRange:
      return "FrameOutOfRange";
    case ErrorCode::EmptyActiveRange:
      return "EmptyActiveRange";
    case ErrorCode::EndpointError:
      return "EndpointError";
    case ErrorCode::InvalidPlanAfterRetries:
      return "InvalidPlanAfterRetries";
    case ErrorCode::IoError:
      return "IoError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

bool is_schema_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::SchemaError:
    case ErrorCode::UnknownReference:
    case ErrorCode::UnknownLabel:
    case ErrorCode::FrameOutOfRange:
    case ErrorCode::EmptyActiveRange:
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidSkeleton:
    case ErrorCode::UnresolvableReference:
    case ErrorCode::EmptyObservationSet:
      return true;
    default:
      return false;
  }
}

Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  z = z ^ (z >> 31);
  return Rng(z);
}

Mat3 rot_x(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitX()).toRotationMatrix();
}

Mat3 rot_y(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitY()).toRotationMatrix();
}

Mat3 rot_z(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();
}

Mat3 axis_angle(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t state) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    state ^= bytes[i];
    state *= 1099511628211ull;
  }
  return state;
}

} // namespace fusion
