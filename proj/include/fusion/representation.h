#pragma once

#include "fusion/kinematics.h"

#include <filesystem>
#include <optional>
#include <vector>

namespace fusion {

/// Column offsets of the per-frame feature blocks
/// [root velocity 3 | tilt 6 | heading delta 6 | local rotations 6(J-1) | joints 3J | contacts 4].
struct FeatureLayout {
  int joint_count = 0;

  explicit FeatureLayout(int joints) : joint_count(joints) {}
  explicit FeatureLayout(const SkeletonSpec& skel) : joint_count(static_cast<int>(skel.joint_count())) {}

  static constexpr int velocity = 0;
  static constexpr int tilt = 3;
  static constexpr int heading_delta = 9;
  static constexpr int local_rotations = 15;
  int local_rotation(int joint) const {
    return local_rotations + 6 * (joint - 1);
  }
  int joints() const {
    return local_rotations + 6 * (joint_count - 1);
  }
  int joint(int j) const {
    return joints() + 3 * j;
  }
  int contacts() const {
    return joints() + 3 * joint_count;
  }
  int dim() const {
    return contacts() + 4;
  }
};

/// D = 3 + 6 + 6 + 6 (J - 1) + 3 J + 4.
constexpr int feature_dim(int joint_count) {
  return 3 + 6 + 6 + 6 * (joint_count - 1) + 3 * joint_count + 4;
}

struct MotionFeatures {
  FeatureMatrix data; // N x D
  std::uint64_t skeleton_id = 0;
  double frame_rate = 30.0;

  int frames() const {
    return static_cast<int>(data.rows());
  }
  int dim() const {
    return static_cast<int>(data.cols());
  }
};

struct HeadingSplit {
  Mat3 heading; // rotation about +Z
  Mat3 tilt;    // heading^T * root_orient
  double yaw = 0.0;
};

/// Splits a root orientation into yaw about Z (from the projected forward
/// axis, +Y) and the residual tilt. When the forward axis is within 1e-6 of
/// vertical, `fallback_heading` is used if given, else GimbalDegenerate.
HeadingSplit heading_decompose(const Mat3& root_orient, const std::optional<Mat3>& fallback_heading = std::nullopt);

/// Foot-contact labels: 1 iff height < 0.05 m and per-frame displacement
/// < 0.01 m; the last frame reuses the previous displacement.
Eigen::MatrixX4d contact_labels(const SkeletonSpec& skel, std::span<const Pose> poses);

MotionFeatures encode(const SkeletonSpec& skel, std::span<const Pose> poses,
                      const std::optional<Eigen::MatrixX4d>& contacts = std::nullopt);

struct DecodedPoses {
  std::vector<Pose> poses;
  Eigen::MatrixX4d contacts;
};

DecodedPoses decode(const SkeletonSpec& skel, const MotionFeatures& X, const Vec3& init_position,
                    const Mat3& init_heading);

/// Initial decode state of an encoded clip (root position and heading of frame 0).
struct DecodeOrigin {
  Vec3 position = Vec3::Zero();
  Mat3 heading = Mat3::Identity();
};
DecodeOrigin decode_origin(const Pose& first_frame);

/// World-space motion decoded from a feature matrix, keeping the
/// intermediates needed to pull gradients back onto the features.
struct WorldMotion {
  std::vector<SkeletonState> frames;
  Eigen::MatrixX4d contacts; // clamped to [0, 1]
  // intermediates
  std::vector<Mat3> headings;  // H_i
  std::vector<Mat3> deltas;    // G_i
  std::vector<Mat3> tilts;     // P_i
  std::vector<std::vector<Mat3>> locals;
};

/// Gradient of a scalar w.r.t. world joint positions / rotations / contacts.
struct WorldGradient {
  std::vector<std::vector<Vec3>> positions;
  std::vector<std::vector<Mat3>> rotations;
  Eigen::MatrixX4d contacts;

  WorldGradient() = default;
  WorldGradient(int frames, int joints);
  void reset();
};

WorldMotion decode_world(const SkeletonSpec& skel, const Eigen::Ref<const FeatureMatrix>& X, const Vec3& init_position,
                         const Mat3& init_heading);

/// Accumulates dL/dX into `dX` (same shape as X) for gradients on a decoded motion.
void decode_world_backward(const SkeletonSpec& skel, const Eigen::Ref<const FeatureMatrix>& X, const WorldMotion& motion,
                           const WorldGradient& grad, Eigen::Ref<FeatureMatrix> dX);

// Binary clip format: "FSNMOTN\0", u32 version, u64 skeleton hash, u32 N,
// u32 D, f64 frame rate, N*D little-endian float32 row-major.
void save_motion(const MotionFeatures& m, const std::filesystem::path& path);
MotionFeatures load_motion(const std::filesystem::path& path);
std::string motion_to_json(const SkeletonSpec& skel, const MotionFeatures& m);

} // namespace fusion
