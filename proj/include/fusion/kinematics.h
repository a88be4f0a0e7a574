#pragma once

#include "fusion/common.h"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fusion {

// World convention: Z up, meters, right-handed. The body faces +Y at zero
// heading, so +X is the body's right and the sagittal plane is x = 0.

/// First two columns of a rotation matrix, column-major.
using Rotation6D = Eigen::Matrix<double, 6, 1>;

struct Joint {
  std::string name;
  int parent = -1;
  Vec3 rest_offset = Vec3::Zero();
};

/// Collision proxy: a segment in the joint's local frame swept by a sphere.
struct Capsule {
  int joint = 0;
  double radius = 0.0;
  Vec3 a = Vec3::Zero();
  Vec3 b = Vec3::Zero();
};

/// Single-axis articulation range used by the hand generator.
struct JointLimit {
  int joint = 0;
  Vec3 axis = Vec3::UnitX();
  double min_angle = 0.0;
  double max_angle = 0.0;
};

struct SkeletonSpec {
  std::string name;
  std::vector<Joint> joints;
  /// left ankle, left toe, right ankle, right toe
  std::array<int, 4> foot_joints{};
  /// left, right
  std::array<int, 2> wrist_joints{};
  std::vector<int> left_hand_joints;
  std::vector<int> right_hand_joints;
  std::vector<int> mirror_map;
  std::vector<Capsule> capsules;
  std::vector<JointLimit> limits;
  double frame_rate = 30.0;
  /// Root height when standing in the rest pose with feet on the ground.
  double standing_height = 0.0;

  std::size_t joint_count() const {
    return joints.size();
  }

  /// Index of the named joint or -1.
  int find_joint(std::string_view name) const;
  int joint_index(std::string_view name) const; // throws UnknownLabel

  const JointLimit* limit_for(int joint) const;

  bool is_hand_joint(int joint) const;

  /// Throws InvalidSkeleton / IncompleteMirrorMap on violated invariants.
  void validate() const;

  /// True when rest offsets and parents are reflection-symmetric under the
  /// mirror map (required for exact mirrored-FK identities).
  bool mirror_symmetric(double tol = 1e-12) const;

  /// Stable content hash over topology, offsets, and frame rate.
  std::uint64_t hash() const;
};

struct Pose {
  Vec3 root_position = Vec3::Zero();
  Mat3 root_orient = Mat3::Identity();
  /// One per non-root joint; local_rots[j - 1] belongs to joint j.
  std::vector<Mat3> local_rots;

  static Pose rest(const SkeletonSpec& skel, const Vec3& root_position = Vec3::Zero());

  /// Local rotation of any joint (the root's is root_orient).
  const Mat3& local(int joint) const {
    return joint == 0 ? root_orient : local_rots[joint - 1];
  }
  Mat3& local(int joint) {
    return joint == 0 ? root_orient : local_rots[joint - 1];
  }
};

/// World transforms of every joint.
struct SkeletonState {
  std::vector<Vec3> positions;
  std::vector<Mat3> rotations;
};

struct CatalogEntry {
  std::string label;
  int joint = 0;
  Vec3 offset = Vec3::Zero();
};

/// Semantic surface points attached to joints.
class VertexCatalog {
 public:
  VertexCatalog() = default;
  explicit VertexCatalog(std::vector<CatalogEntry> entries);

  const std::vector<CatalogEntry>& entries() const {
    return entries_;
  }
  std::size_t size() const {
    return entries_.size();
  }
  const CatalogEntry* find(std::string_view label) const;
  const CatalogEntry& at(std::string_view label) const; // throws UnknownLabel
  std::vector<std::string> labels() const;

  void validate(const SkeletonSpec& skel) const;

 private:
  std::vector<CatalogEntry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

Mat3 rot6d_to_matrix(const Rotation6D& r);
Rotation6D rot6d_from_matrix(const Mat3& R);

/// Derivative of rot6d_to_matrix: maps dL/dR to dL/dr.
Rotation6D rot6d_to_matrix_backward(const Rotation6D& r, const Mat3& dR);

SkeletonState skeleton_state(const SkeletonSpec& skel, const Pose& pose);
std::vector<Vec3> forward_kinematics(const SkeletonSpec& skel, const Pose& pose);

std::map<std::string, Vec3> vertex_positions(
    const SkeletonSpec& skel,
    const VertexCatalog& catalog,
    const Pose& pose,
    std::span<const std::string> labels);

/// Reflection across x = 0 with left/right joints exchanged.
Pose mirror_pose(const SkeletonSpec& skel, const Pose& pose);

/// The reflection S = diag(-1, 1, 1).
const Mat3& mirror_matrix();
inline Mat3 mirror_rotation(const Mat3& R) {
  return mirror_matrix() * R * mirror_matrix();
}

/// Closest distance between segments [p0,p1] and [q0,q1].
double segment_distance(const Vec3& p0, const Vec3& p1, const Vec3& q0, const Vec3& q1);

struct PenetrationResult {
  double depth = 0.0;
  int joint_a = -1;
  int joint_b = -1;
};

/// Deepest capsule overlap between the two joint subsets, skipping identical
/// and parent/child pairs. Zero means no penetration.
PenetrationResult self_penetration_detail(
    const SkeletonSpec& skel,
    const SkeletonState& state,
    std::span<const int> subset_a,
    std::span<const int> subset_b);

double self_penetration(
    const SkeletonSpec& skel,
    const Pose& pose,
    std::span<const int> subset_a,
    std::span<const int> subset_b);

// Built-in configurations and JSON config files.

/// 37-joint desk skeleton: pelvis, chest, head; per side hip, knee, ankle,
/// toe, shoulder, elbow, wrist; per hand 5 fingers x 2 segments.
SkeletonSpec make_desk_skeleton();

/// 55-joint configuration with the SMPL-X joint roster (22 body, jaw, eyes,
/// 2 x 15 finger joints), giving a 508-wide feature vector.
SkeletonSpec make_smplx55_skeleton();

/// Default semantic vertex catalog for the desk skeleton.
VertexCatalog make_desk_catalog(const SkeletonSpec& skel);

SkeletonSpec load_skeleton(const std::filesystem::path& path);
void save_skeleton(const SkeletonSpec& skel, const std::filesystem::path& path);
VertexCatalog load_catalog(const std::filesystem::path& path, const SkeletonSpec& skel);
void save_catalog(const VertexCatalog& catalog, const SkeletonSpec& skel, const std::filesystem::path& path);

std::string skeleton_to_json(const SkeletonSpec& skel);
SkeletonSpec skeleton_from_json(const std::string& text);

} // namespace fusion
