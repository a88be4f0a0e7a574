#include "fusion/representation.h"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace fusion {

namespace {

constexpr double kContactHeight = 0.05;
constexpr double kContactSpeed = 0.01;

Rotation6D block6(const Eigen::Ref<const FeatureMatrix>& X, int row, int col) {
  return X.row(row).segment<6>(col).transpose();
}

// Heading changes are yaw-only; predicted deltas are projected onto the yaw of
// their forward axis so that tilt errors cannot accumulate into the heading.
Mat3 yaw_delta(const Rotation6D& r) {
  const Vec3 f = rot6d_to_matrix(r).col(1);
  if (f.head<2>().squaredNorm() < 1e-12) {
    return Mat3::Identity();
  }
  return rot_z(std::atan2(-f.x(), f.y()));
}

Rotation6D yaw_delta_backward(const Rotation6D& r, const Mat3& G, const Mat3& dG) {
  const Vec3 f = rot6d_to_matrix(r).col(1);
  const double q = f.head<2>().squaredNorm();
  if (q < 1e-12) {
    return Rotation6D::Zero();
  }
  // G = [[c, -s, 0], [s, c, 0], [0, 0, 1]], dG/dpsi = [[-s, -c, 0], [c, -s, 0], [0, 0, 0]]
  const double c = G(0, 0), s = G(1, 0);
  const double dpsi = -s * dG(0, 0) - c * dG(0, 1) + c * dG(1, 0) - s * dG(1, 1);
  Mat3 dR = Mat3::Zero();
  dR(0, 1) = -dpsi * f.y() / q;
  dR(1, 1) = dpsi * f.x() / q;
  return rot6d_to_matrix_backward(r, dR);
}

} // namespace

HeadingSplit heading_decompose(const Mat3& root_orient, const std::optional<Mat3>& fallback_heading) {
  const Vec3 forward = root_orient.col(1);
  const double horizontal = std::hypot(forward.x(), forward.y());
  HeadingSplit out;
  if (horizontal < 1e-6) {
    if (!fallback_heading) {
      throw Error(ErrorCode::GimbalDegenerate, "root forward axis is vertical");
    }
    out.heading = *fallback_heading;
    out.yaw = std::atan2(out.heading(1, 0), out.heading(0, 0));
  } else {
    // Rz(yaw) * +Y = (-sin yaw, cos yaw, 0)
    out.yaw = std::atan2(-forward.x(), forward.y());
    out.heading = rot_z(out.yaw);
  }
  out.tilt = out.heading.transpose() * root_orient;
  return out;
}

Eigen::MatrixX4d contact_labels(const SkeletonSpec& skel, std::span<const Pose> poses) {
  const int n = static_cast<int>(poses.size());
  if (n < 2) {
    throw Error(ErrorCode::TooShort, "contact labeling needs at least two frames");
  }
  std::vector<std::array<Vec3, 4>> feet(n);
  for (int i = 0; i < n; ++i) {
    const auto p = forward_kinematics(skel, poses[i]);
    for (int k = 0; k < 4; ++k) {
      feet[i][k] = p[skel.foot_joints[k]];
    }
  }
  Eigen::MatrixX4d labels(n, 4);
  for (int i = 0; i < n; ++i) {
    const int a = i < n - 1 ? i : n - 2;
    for (int k = 0; k < 4; ++k) {
      const double disp = (feet[a + 1][k] - feet[a][k]).norm();
      labels(i, k) = (feet[i][k].z() < kContactHeight && disp < kContactSpeed) ? 1.0 : 0.0;
    }
  }
  return labels;
}

MotionFeatures encode(const SkeletonSpec& skel, std::span<const Pose> poses,
                      const std::optional<Eigen::MatrixX4d>& contacts) {
  const int n = static_cast<int>(poses.size());
  if (n < 2) {
    throw Error(ErrorCode::TooShort, "a motion needs at least two frames");
  }
  for (const auto& p : poses) {
    if (p.local_rots.size() + 1 != skel.joint_count()) {
      throw Error(ErrorCode::SkeletonMismatch, "pose does not match skeleton");
    }
  }
  const Eigen::MatrixX4d f = contacts ? *contacts : contact_labels(skel, poses);
  if (f.rows() != n) {
    throw Error(ErrorCode::SizeMismatch, "contact labels must have one row per frame");
  }

  const FeatureLayout layout(skel);
  MotionFeatures out;
  out.skeleton_id = skel.hash();
  out.frame_rate = skel.frame_rate;
  out.data = FeatureMatrix::Zero(n, layout.dim());

  std::vector<HeadingSplit> split(n);
  for (int i = 0; i < n; ++i) {
    split[i] = heading_decompose(poses[i].root_orient,
                                 i > 0 ? std::optional<Mat3>(split[i - 1].heading) : std::nullopt);
  }

  for (int i = 0; i < n; ++i) {
    auto row = out.data.row(i);
    const Mat3& H = split[i].heading;
    const Mat3 Ht = H.transpose();
    if (i < n - 1) {
      row.segment<3>(FeatureLayout::velocity) = Ht * (poses[i + 1].root_position - poses[i].root_position);
      row.segment<6>(FeatureLayout::heading_delta) = rot6d_from_matrix(Ht * split[i + 1].heading);
    } else {
      row.segment<3>(FeatureLayout::velocity) = out.data.row(i - 1).segment<3>(FeatureLayout::velocity);
      row.segment<6>(FeatureLayout::heading_delta) = rot6d_from_matrix(Mat3::Identity());
    }
    row.segment<6>(FeatureLayout::tilt) = rot6d_from_matrix(split[i].tilt);
    for (int j = 1; j < layout.joint_count; ++j) {
      row.segment<6>(layout.local_rotation(j)) = rot6d_from_matrix(poses[i].local_rots[j - 1]);
    }
    const auto world = forward_kinematics(skel, poses[i]);
    const Vec3 ground(poses[i].root_position.x(), poses[i].root_position.y(), 0.0);
    for (int j = 0; j < layout.joint_count; ++j) {
      row.segment<3>(layout.joint(j)) = Ht * (world[j] - ground);
    }
    for (int k = 0; k < 4; ++k) {
      row[layout.contacts() + k] = std::clamp(f(i, k), 0.0, 1.0);
    }
  }
  return out;
}

DecodeOrigin decode_origin(const Pose& first_frame) {
  DecodeOrigin o;
  o.position = first_frame.root_position;
  o.heading = heading_decompose(first_frame.root_orient).heading;
  return o;
}

DecodedPoses decode(const SkeletonSpec& skel, const MotionFeatures& X, const Vec3& init_position,
                    const Mat3& init_heading) {
  const FeatureLayout layout(skel);
  if (X.dim() != layout.dim() || (X.skeleton_id != 0 && X.skeleton_id != skel.hash())) {
    throw Error(ErrorCode::SkeletonMismatch, "features were not produced for this skeleton");
  }
  const int n = X.frames();
  DecodedPoses out;
  out.poses.resize(n);
  out.contacts.resize(n, 4);
  Mat3 H = init_heading;
  Vec3 r = init_position;
  for (int i = 0; i < n; ++i) {
    Pose& p = out.poses[i];
    p.root_position = r;
    p.root_orient = H * rot6d_to_matrix(block6(X.data, i, FeatureLayout::tilt));
    p.local_rots.resize(layout.joint_count - 1);
    for (int j = 1; j < layout.joint_count; ++j) {
      p.local_rots[j - 1] = rot6d_to_matrix(block6(X.data, i, layout.local_rotation(j)));
    }
    for (int k = 0; k < 4; ++k) {
      out.contacts(i, k) = X.data(i, layout.contacts() + k);
    }
    r = r + H * X.data.row(i).segment<3>(FeatureLayout::velocity).transpose();
    H = H * yaw_delta(block6(X.data, i, FeatureLayout::heading_delta));
  }
  return out;
}

WorldGradient::WorldGradient(int frames, int joints)
    : positions(frames, std::vector<Vec3>(joints, Vec3::Zero())),
      rotations(frames, std::vector<Mat3>(joints, Mat3::Zero())),
      contacts(Eigen::MatrixX4d::Zero(frames, 4)) {}

void WorldGradient::reset() {
  for (auto& f : positions) {
    for (auto& v : f) {
      v.setZero();
    }
  }
  for (auto& f : rotations) {
    for (auto& m : f) {
      m.setZero();
    }
  }
  contacts.setZero();
}

WorldMotion decode_world(const SkeletonSpec& skel, const Eigen::Ref<const FeatureMatrix>& X, const Vec3& init_position,
                         const Mat3& init_heading) {
  const FeatureLayout layout(skel);
  if (X.cols() != layout.dim()) {
    throw Error(ErrorCode::SkeletonMismatch, "feature width does not match skeleton");
  }
  const int n = static_cast<int>(X.rows());
  const int nj = layout.joint_count;
  WorldMotion m;
  m.frames.resize(n);
  m.headings.resize(n);
  m.deltas.resize(n);
  m.tilts.resize(n);
  m.locals.assign(n, std::vector<Mat3>(nj));
  m.contacts.resize(n, 4);

  Mat3 H = init_heading;
  Vec3 r = init_position;
  for (int i = 0; i < n; ++i) {
    m.headings[i] = H;
    m.deltas[i] = yaw_delta(block6(X, i, FeatureLayout::heading_delta));
    m.tilts[i] = rot6d_to_matrix(block6(X, i, FeatureLayout::tilt));
    auto& locals = m.locals[i];
    locals[0] = Mat3::Identity();
    for (int j = 1; j < nj; ++j) {
      locals[j] = rot6d_to_matrix(block6(X, i, layout.local_rotation(j)));
    }
    auto& s = m.frames[i];
    s.positions.resize(nj);
    s.rotations.resize(nj);
    s.positions[0] = r;
    s.rotations[0] = H * m.tilts[i];
    for (int j = 1; j < nj; ++j) {
      const int p = skel.joints[j].parent;
      s.positions[j] = s.positions[p] + s.rotations[p] * skel.joints[j].rest_offset;
      s.rotations[j] = s.rotations[p] * locals[j];
    }
    for (int k = 0; k < 4; ++k) {
      m.contacts(i, k) = std::clamp(X(i, layout.contacts() + k), 0.0, 1.0);
    }
    r = r + H * X.row(i).segment<3>(FeatureLayout::velocity).transpose();
    H = H * m.deltas[i];
  }
  return m;
}

void decode_world_backward(const SkeletonSpec& skel, const Eigen::Ref<const FeatureMatrix>& X, const WorldMotion& m,
                           const WorldGradient& grad, Eigen::Ref<FeatureMatrix> dX) {
  const FeatureLayout layout(skel);
  const int n = static_cast<int>(X.rows());
  const int nj = layout.joint_count;

  std::vector<Vec3> dr_local(n);
  std::vector<Mat3> dH_local(n);
  std::vector<Vec3> dp(nj);
  std::vector<Mat3> dW(nj);
  for (int i = 0; i < n; ++i) {
    const auto& s = m.frames[i];
    for (int j = 0; j < nj; ++j) {
      dp[j] = grad.positions[i][j];
      dW[j] = grad.rotations[i][j];
    }
    for (int j = nj - 1; j >= 1; --j) {
      const int p = skel.joints[j].parent;
      // p_j = p_par + W_par * offset_j
      dp[p] += dp[j];
      dW[p] += dp[j] * skel.joints[j].rest_offset.transpose();
      // W_j = W_par * L_j
      dW[p] += dW[j] * m.locals[i][j].transpose();
      const Mat3 dL = s.rotations[p].transpose() * dW[j];
      const int c = layout.local_rotation(j);
      dX.row(i).segment<6>(c) += rot6d_to_matrix_backward(block6(X, i, c), dL).transpose();
    }
    dr_local[i] = dp[0];
    // R_root = H * P
    dH_local[i] = dW[0] * m.tilts[i].transpose();
    const Mat3 dP = m.headings[i].transpose() * dW[0];
    dX.row(i).segment<6>(FeatureLayout::tilt) +=
        rot6d_to_matrix_backward(block6(X, i, FeatureLayout::tilt), dP).transpose();

    for (int k = 0; k < 4; ++k) {
      const double v = X(i, layout.contacts() + k);
      if (v >= 0.0 && v <= 1.0) {
        dX(i, layout.contacts() + k) += grad.contacts(i, k);
      }
    }
  }

  // Reverse through r_{i+1} = r_i + H_i tau_i and H_{i+1} = H_i G_i.
  Vec3 dr_next = Vec3::Zero();
  Mat3 dH_next = Mat3::Zero();
  for (int i = n - 1; i >= 0; --i) {
    Vec3 dr = dr_local[i];
    Mat3 dH = dH_local[i];
    if (i < n - 1) {
      const Vec3 tau = X.row(i).segment<3>(FeatureLayout::velocity).transpose();
      const Mat3& H = m.headings[i];
      dX.row(i).segment<3>(FeatureLayout::velocity) += (H.transpose() * dr_next).transpose();
      dr += dr_next;
      dH += dr_next * tau.transpose() + dH_next * m.deltas[i].transpose();
      const Mat3 dG = H.transpose() * dH_next;
      dX.row(i).segment<6>(FeatureLayout::heading_delta) +=
          yaw_delta_backward(block6(X, i, FeatureLayout::heading_delta), m.deltas[i], dG).transpose();
    }
    dr_next = dr;
    dH_next = dH;
  }
}

namespace {

constexpr char kMotionMagic[8] = {'F', 'S', 'N', 'M', 'O', 'T', 'N', '\0'};
constexpr std::uint32_t kMotionVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) {
    throw Error(ErrorCode::IoError, "truncated motion file");
  }
  return v;
}

} // namespace

void save_motion(const MotionFeatures& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error(ErrorCode::IoError, "cannot write " + path.string());
  }
  out.write(kMotionMagic, sizeof(kMotionMagic));
  put(out, kMotionVersion);
  put(out, m.skeleton_id);
  put(out, static_cast<std::uint32_t>(m.frames()));
  put(out, static_cast<std::uint32_t>(m.dim()));
  put(out, m.frame_rate);
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f = m.data.cast<float>();
  out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(sizeof(float) * f.size()));
}

MotionFeatures load_motion(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::IoError, "cannot open " + path.string());
  }
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMotionMagic, sizeof(magic)) != 0) {
    throw Error(ErrorCode::SchemaError, path.string() + " is not a motion file");
  }
  if (get<std::uint32_t>(in) != kMotionVersion) {
    throw Error(ErrorCode::SchemaError, "unsupported motion file version");
  }
  MotionFeatures m;
  m.skeleton_id = get<std::uint64_t>(in);
  const auto n = get<std::uint32_t>(in);
  const auto d = get<std::uint32_t>(in);
  m.frame_rate = get<double>(in);
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f(n, d);
  in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(sizeof(float) * f.size()));
  if (!in) {
    throw Error(ErrorCode::IoError, "truncated motion file");
  }
  m.data = f.cast<double>();
  return m;
}

std::string motion_to_json(const SkeletonSpec& skel, const MotionFeatures& m) {
  const FeatureLayout layout(skel);
  nlohmann::json j;
  j["skeleton_id"] = m.skeleton_id;
  j["frame_rate"] = m.frame_rate;
  j["frames"] = m.frames();
  j["dim"] = m.dim();
  j["layout"] = {{"velocity", FeatureLayout::velocity},
                 {"tilt", FeatureLayout::tilt},
                 {"heading_delta", FeatureLayout::heading_delta},
                 {"local_rotations", FeatureLayout::local_rotations},
                 {"joints", layout.joints()},
                 {"contacts", layout.contacts()}};
  auto& rows = j["data"] = nlohmann::json::array();
  for (int i = 0; i < m.frames(); ++i) {
    std::vector<double> r(m.data.row(i).data(), m.data.row(i).data() + m.dim());
    rows.push_back(r);
  }
  return j.dump();
}

} // namespace fusion
