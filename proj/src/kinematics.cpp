#include "fusion/kinematics.h"

#include <algorithm>
#include <cmath>
#include <set>

namespace fusion {

int SkeletonSpec::find_joint(std::string_view name) const {
  for (std::size_t i = 0; i < joints.size(); ++i) {
    if (joints[i].name == name) {
      return static_cast<int>(i);
    }
  }
  return -1;
}

int SkeletonSpec::joint_index(std::string_view name) const {
  const int idx = find_joint(name);
  if (idx < 0) {
    throw Error(ErrorCode::UnknownLabel, "no joint named '" + std::string(name) + "'");
  }
  return idx;
}

const JointLimit* SkeletonSpec::limit_for(int joint) const {
  for (const auto& l : limits) {
    if (l.joint == joint) {
      return &l;
    }
  }
  return nullptr;
}

bool SkeletonSpec::is_hand_joint(int joint) const {
  return std::find(left_hand_joints.begin(), left_hand_joints.end(), joint) != left_hand_joints.end() ||
      std::find(right_hand_joints.begin(), right_hand_joints.end(), joint) != right_hand_joints.end();
}

void SkeletonSpec::validate() const {
  const int n = static_cast<int>(joints.size());
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidSkeleton, msg); };
  if (n < 2) {
    fail("skeleton needs at least two joints");
  }
  if (joints[0].parent != -1) {
    fail("joint 0 must be the root");
  }
  std::set<std::string> names;
  for (int i = 0; i < n; ++i) {
    if (!names.insert(joints[i].name).second) {
      fail("duplicate joint name '" + joints[i].name + "'");
    }
    if (i > 0 && (joints[i].parent < 0 || joints[i].parent >= i)) {
      fail("joint '" + joints[i].name + "' must have a parent with a smaller index");
    }
  }
  auto valid = [n](int j) { return j >= 0 && j < n; };
  for (int j : foot_joints) {
    if (!valid(j)) {
      fail("foot joint index out of range");
    }
  }
  for (int j : wrist_joints) {
    if (!valid(j)) {
      fail("wrist joint index out of range");
    }
  }
  for (int j : left_hand_joints) {
    if (!valid(j)) {
      fail("left hand joint out of range");
    }
  }
  for (int j : right_hand_joints) {
    if (!valid(j)) {
      fail("right hand joint out of range");
    }
  }
  for (const auto& c : capsules) {
    if (!valid(c.joint)) {
      fail("capsule joint out of range");
    }
    if (!(c.radius > 0.0)) {
      fail("capsule radius must be positive");
    }
  }
  for (const auto& l : limits) {
    if (!valid(l.joint) || l.axis.norm() < 1e-12 || l.min_angle > l.max_angle) {
      fail("invalid joint limit");
    }
  }
  if (!(frame_rate > 0.0)) {
    fail("frame rate must be positive");
  }

  if (static_cast<int>(mirror_map.size()) != n) {
    throw Error(ErrorCode::IncompleteMirrorMap, "mirror map must cover every joint");
  }
  for (int i = 0; i < n; ++i) {
    if (!valid(mirror_map[i]) || mirror_map[mirror_map[i]] != i) {
      throw Error(ErrorCode::IncompleteMirrorMap, "mirror map is not an involution at '" + joints[i].name + "'");
    }
  }
  if (left_hand_joints.size() != right_hand_joints.size()) {
    throw Error(ErrorCode::IncompleteMirrorMap, "left and right hand sets differ in size");
  }
  for (std::size_t k = 0; k < left_hand_joints.size(); ++k) {
    if (mirror_map[left_hand_joints[k]] != right_hand_joints[k]) {
      throw Error(ErrorCode::IncompleteMirrorMap, "hand sets are not mirror images in order");
    }
  }
  if (mirror_map[wrist_joints[0]] != wrist_joints[1] || mirror_map[foot_joints[0]] != foot_joints[2] ||
      mirror_map[foot_joints[1]] != foot_joints[3]) {
    throw Error(ErrorCode::IncompleteMirrorMap, "wrist/foot joints are not mirror pairs");
  }
}

bool SkeletonSpec::mirror_symmetric(double tol) const {
  if (mirror_map.size() != joints.size()) {
    return false;
  }
  const Mat3& S = mirror_matrix();
  for (std::size_t i = 1; i < joints.size(); ++i) {
    const auto& j = joints[i];
    const auto& m = joints[mirror_map[i]];
    if (m.parent != mirror_map[j.parent]) {
      return false;
    }
    if ((m.rest_offset - S * j.rest_offset).cwiseAbs().maxCoeff() > tol) {
      return false;
    }
  }
  return true;
}

std::uint64_t SkeletonSpec::hash() const {
  std::uint64_t h = fnv1a(name.data(), 0);
  for (const auto& j : joints) {
    h = fnv1a(j.name.data(), j.name.size(), h);
    h = fnv1a(&j.parent, sizeof(j.parent), h);
    h = fnv1a(j.rest_offset.data(), sizeof(double) * 3, h);
  }
  h = fnv1a(foot_joints.data(), sizeof(int) * foot_joints.size(), h);
  h = fnv1a(wrist_joints.data(), sizeof(int) * wrist_joints.size(), h);
  h = fnv1a(&frame_rate, sizeof(frame_rate), h);
  return h;
}

Pose Pose::rest(const SkeletonSpec& skel, const Vec3& root_position) {
  Pose p;
  p.root_position = root_position;
  p.root_orient = Mat3::Identity();
  p.local_rots.assign(skel.joint_count() - 1, Mat3::Identity());
  return p;
}

VertexCatalog::VertexCatalog(std::vector<CatalogEntry> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!index_.emplace(entries_[i].label, i).second) {
      throw Error(ErrorCode::SchemaError, "duplicate catalog label '" + entries_[i].label + "'");
    }
  }
}

const CatalogEntry* VertexCatalog::find(std::string_view label) const {
  auto it = index_.find(label);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

const CatalogEntry& VertexCatalog::at(std::string_view label) const {
  const auto* e = find(label);
  if (e == nullptr) {
    throw Error(ErrorCode::UnknownLabel, "no catalog vertex '" + std::string(label) + "'");
  }
  return *e;
}

std::vector<std::string> VertexCatalog::labels() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) {
    out.push_back(e.label);
  }
  return out;
}

void VertexCatalog::validate(const SkeletonSpec& skel) const {
  for (const auto& e : entries_) {
    if (e.joint < 0 || e.joint >= static_cast<int>(skel.joint_count())) {
      throw Error(ErrorCode::SchemaError, "catalog vertex '" + e.label + "' references an invalid joint");
    }
  }
}

namespace {

constexpr double kMinNorm = 1e-8;

} // namespace

Mat3 rot6d_to_matrix(const Rotation6D& r) {
  const Vec3 a = r.head<3>();
  const Vec3 b = r.tail<3>();
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > kMinNorm) || !(nb > kMinNorm)) {
    throw Error(ErrorCode::DegenerateRotation, "6D rotation has a (near) zero column");
  }
  if (std::abs(a.dot(b)) / (na * nb) >= 1.0 - 1e-8) {
    throw Error(ErrorCode::DegenerateRotation, "6D rotation columns are parallel");
  }
  const Vec3 b1 = a / na;
  const Vec3 u = b - b1.dot(b) * b1;
  const Vec3 b2 = u / u.norm();
  Mat3 R;
  R.col(0) = b1;
  R.col(1) = b2;
  R.col(2) = b1.cross(b2);
  return R;
}

Rotation6D rot6d_to_matrix_backward(const Rotation6D& r, const Mat3& dR) {
  const Vec3 a = r.head<3>();
  const Vec3 b = r.tail<3>();
  const double na = a.norm();
  const Vec3 b1 = a / na;
  const Vec3 u = b - b1.dot(b) * b1;
  const double nu = u.norm();
  const Vec3 b2 = u / nu;

  Vec3 db1 = dR.col(0);
  Vec3 db2 = dR.col(1);
  const Vec3 db3 = dR.col(2);
  // b3 = b1 x b2
  db1 += b2.cross(db3);
  db2 += db3.cross(b1);
  // b2 = u / |u|
  const Vec3 du = (db2 - b2 * b2.dot(db2)) / nu;
  // u = b - (b1.b) b1
  const Vec3 db = du - b1 * b1.dot(du);
  db1 -= b1.dot(b) * du + b * b1.dot(du);
  // b1 = a / |a|
  const Vec3 da = (db1 - b1 * b1.dot(db1)) / na;

  Rotation6D out;
  out.head<3>() = da;
  out.tail<3>() = db;
  return out;
}

Rotation6D rot6d_from_matrix(const Mat3& R) {
  const double orth = (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (!std::isfinite(orth) || orth > 1e-6 || std::abs(R.determinant() - 1.0) > 1e-6) {
    throw Error(ErrorCode::NotARotation, "matrix is not a proper rotation");
  }
  Rotation6D out;
  out.head<3>() = R.col(0);
  out.tail<3>() = R.col(1);
  return out;
}

SkeletonState skeleton_state(const SkeletonSpec& skel, const Pose& pose) {
  const std::size_t n = skel.joint_count();
  if (pose.local_rots.size() + 1 != n) {
    throw Error(ErrorCode::SizeMismatch,
                "pose has " + std::to_string(pose.local_rots.size()) + " local rotations, skeleton needs " +
                    std::to_string(n - 1));
  }
  SkeletonState s;
  s.positions.resize(n);
  s.rotations.resize(n);
  s.positions[0] = pose.root_position;
  s.rotations[0] = pose.root_orient;
  for (std::size_t j = 1; j < n; ++j) {
    const int p = skel.joints[j].parent;
    s.positions[j] = s.positions[p] + s.rotations[p] * skel.joints[j].rest_offset;
    s.rotations[j] = s.rotations[p] * pose.local_rots[j - 1];
  }
  return s;
}

std::vector<Vec3> forward_kinematics(const SkeletonSpec& skel, const Pose& pose) {
  return skeleton_state(skel, pose).positions;
}

std::map<std::string, Vec3> vertex_positions(
    const SkeletonSpec& skel,
    const VertexCatalog& catalog,
    const Pose& pose,
    std::span<const std::string> labels) {
  std::vector<const CatalogEntry*> entries;
  entries.reserve(labels.size());
  for (const auto& l : labels) {
    entries.push_back(&catalog.at(l));
  }
  const SkeletonState s = skeleton_state(skel, pose);
  std::map<std::string, Vec3> out;
  for (const auto* e : entries) {
    out[e->label] = s.positions[e->joint] + s.rotations[e->joint] * e->offset;
  }
  return out;
}

const Mat3& mirror_matrix() {
  static const Mat3 S = Vec3(-1.0, 1.0, 1.0).asDiagonal();
  return S;
}

Pose mirror_pose(const SkeletonSpec& skel, const Pose& pose) {
  const std::size_t n = skel.joint_count();
  if (skel.mirror_map.size() != n) {
    throw Error(ErrorCode::IncompleteMirrorMap, "skeleton has no complete mirror map");
  }
  if (pose.local_rots.size() + 1 != n) {
    throw Error(ErrorCode::SizeMismatch, "pose does not match skeleton");
  }
  const Mat3& S = mirror_matrix();
  Pose out;
  out.root_position = S * pose.root_position;
  out.root_orient = S * pose.root_orient * S;
  out.local_rots.resize(n - 1);
  for (std::size_t j = 1; j < n; ++j) {
    const int m = skel.mirror_map[j];
    if (m <= 0) {
      throw Error(ErrorCode::IncompleteMirrorMap, "non-root joint mirrored onto the root");
    }
    out.local_rots[m - 1] = S * pose.local_rots[j - 1] * S;
  }
  return out;
}

double segment_distance(const Vec3& p0, const Vec3& p1, const Vec3& q0, const Vec3& q1) {
  // Closest points of two segments (Ericson, Real-Time Collision Detection 5.1.9).
  const Vec3 d1 = p1 - p0;
  const Vec3 d2 = q1 - q0;
  const Vec3 r = p0 - q0;
  const double a = d1.squaredNorm();
  const double e = d2.squaredNorm();
  const double f = d2.dot(r);
  constexpr double eps = 1e-14;
  double s = 0.0;
  double t = 0.0;
  if (a <= eps && e <= eps) {
    return r.norm();
  }
  if (a <= eps) {
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = d1.dot(r);
    if (e <= eps) {
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = d1.dot(d2);
      const double denom = a * e - b * b;
      s = denom > eps ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
      t = (b * s + f) / e;
      if (t < 0.0) {
        t = 0.0;
        s = std::clamp(-c / a, 0.0, 1.0);
      } else if (t > 1.0) {
        t = 1.0;
        s = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  return ((p0 + d1 * s) - (q0 + d2 * t)).norm();
}

PenetrationResult self_penetration_detail(
    const SkeletonSpec& skel,
    const SkeletonState& state,
    std::span<const int> subset_a,
    std::span<const int> subset_b) {
  std::vector<std::vector<const Capsule*>> by_joint(skel.joint_count());
  for (const auto& c : skel.capsules) {
    by_joint[c.joint].push_back(&c);
  }
  auto check = [&](int j) {
    if (j < 0 || j >= static_cast<int>(skel.joint_count()) || by_joint[j].empty()) {
      throw Error(ErrorCode::MissingCapsule, "no capsule for joint " + std::to_string(j));
    }
  };
  for (int j : subset_a) {
    check(j);
  }
  for (int j : subset_b) {
    check(j);
  }

  PenetrationResult best;
  for (int ja : subset_a) {
    for (int jb : subset_b) {
      if (ja == jb || skel.joints[ja].parent == jb || skel.joints[jb].parent == ja) {
        continue;
      }
      for (const Capsule* ca : by_joint[ja]) {
        const Vec3 a0 = state.positions[ja] + state.rotations[ja] * ca->a;
        const Vec3 a1 = state.positions[ja] + state.rotations[ja] * ca->b;
        for (const Capsule* cb : by_joint[jb]) {
          const Vec3 b0 = state.positions[jb] + state.rotations[jb] * cb->a;
          const Vec3 b1 = state.positions[jb] + state.rotations[jb] * cb->b;
          const double depth = ca->radius + cb->radius - segment_distance(a0, a1, b0, b1);
          if (depth > best.depth) {
            best = {depth, ja, jb};
          }
        }
      }
    }
  }
  return best;
}

double self_penetration(
    const SkeletonSpec& skel,
    const Pose& pose,
    std::span<const int> subset_a,
    std::span<const int> subset_b) {
  return self_penetration_detail(skel, skeleton_state(skel, pose), subset_a, subset_b).depth;
}

} // namespace fusion
