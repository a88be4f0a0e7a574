#include "doctest.h"

#include "fusion/representation.h"
#include "generators.h"
#include "oracles.h"

#include <filesystem>

using namespace fusion;

namespace {

std::vector<Pose> transformed(const std::vector<Pose>& clip, double yaw, const Vec3& shift) {
  const Mat3 R = rot_z(yaw);
  std::vector<Pose> out = clip;
  for (auto& p : out) {
    p.root_position = R * p.root_position + shift;
    p.root_orient = R * p.root_orient;
  }
  return out;
}

} // namespace

TEST_CASE("heading decomposition splits yaw from tilt") {
  Rng rng = make_rng(21);
  for (int k = 0; k < 100; ++k) {
    const Mat3 R = gen::rotation(rng);
    const HeadingSplit s = heading_decompose(R);
    CHECK((s.heading * s.tilt - R).norm() < 1e-12);
    CHECK((s.heading - rot_z(s.yaw)).norm() < 1e-12);
    CHECK(s.yaw == doctest::Approx(oracle::yaw(R)).epsilon(1e-12));
    // the tilt leaves the forward axis in the y-z plane
    CHECK(std::abs((s.tilt * Vec3::UnitY()).x()) < 1e-12);
  }
  CHECK_THROWS_AS(heading_decompose(rot_x(M_PI / 2)), Error);
  CHECK_NOTHROW(heading_decompose(rot_x(M_PI / 2), rot_z(0.3)));
}

TEST_CASE("decode inverts encode on random clips") {
  const SkeletonSpec skel = make_desk_skeleton();
  Rng rng = make_rng(22);
  for (int c = 0; c < 100; ++c) {
    const auto clip = gen::clip(rng, skel, 24);
    const MotionFeatures x = encode(skel, clip);
    const DecodeOrigin o = decode_origin(clip.front());
    const WorldMotion m = decode_world(skel, x.data, o.position, o.heading);
    const oracle::Frames f = oracle::decode(skel, x.data, o.position, o.heading);
    double sq = 0.0;
    double sq_oracle = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < clip.size(); ++i) {
      const auto want = oracle::fk(skel, clip[i]);
      for (std::size_t j = 0; j < want.size(); ++j) {
        sq += (m.frames[i].positions[j] - want[j]).squaredNorm();
        sq_oracle += (f.positions[i][j] - want[j]).squaredNorm();
        ++count;
      }
    }
    CHECK(std::sqrt(sq / count) < 1e-5);
    CHECK(std::sqrt(sq_oracle / count) < 1e-5);
  }
}

TEST_CASE("canonical blocks ignore global yaw and translation") {
  const SkeletonSpec skel = make_desk_skeleton();
  const FeatureLayout layout(skel);
  Rng rng = make_rng(23);
  for (int c = 0; c < 40; ++c) {
    const auto clip = gen::clip(rng, skel, 20);
    const auto moved = transformed(clip, gen::uniform(rng, -M_PI, M_PI),
                                   Vec3(gen::uniform(rng, -5, 5), gen::uniform(rng, -5, 5), 0.0));
    const Eigen::MatrixX4d contacts = contact_labels(skel, clip);
    const FeatureMatrix a = encode(skel, clip, contacts).data;
    const FeatureMatrix b = encode(skel, moved, contacts).data;
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-9);
    // the contact block is copied verbatim
    CHECK(a.rightCols(4) == b.rightCols(4));
  }
}

TEST_CASE("encode writes the documented blocks") {
  const SkeletonSpec skel = make_desk_skeleton();
  const FeatureLayout layout(skel);
  Rng rng = make_rng(24);
  const auto clip = gen::clip(rng, skel, 12);
  const FeatureMatrix x = encode(skel, clip).data;
  const int n = static_cast<int>(clip.size());
  for (int i = 0; i < n; ++i) {
    const Mat3 H = rot_z(oracle::yaw(clip[i].root_orient));
    const int a = i < n - 1 ? i : n - 2;
    const Vec3 v = rot_z(oracle::yaw(clip[a].root_orient)).transpose() *
                   (clip[a + 1].root_position - clip[a].root_position);
    CHECK((x.row(i).segment<3>(layout.velocity).transpose() - v).norm() < 1e-9);
    const Mat3 G = i < n - 1 ? Mat3(H.transpose() * rot_z(oracle::yaw(clip[i + 1].root_orient))) : Mat3::Identity();
    CHECK((oracle::rot6d(x.row(i).segment<6>(layout.heading_delta).transpose()) - G).norm() < 1e-9);
    const auto p = oracle::fk(skel, clip[i]);
    const Vec3 ground(clip[i].root_position.x(), clip[i].root_position.y(), 0.0);
    for (int j = 0; j < static_cast<int>(skel.joint_count()); ++j) {
      const Vec3 local = H.transpose() * (p[j] - ground);
      CHECK((x.row(i).segment<3>(layout.joint(j)).transpose() - local).norm() < 1e-9);
    }
    for (int j = 1; j < static_cast<int>(skel.joint_count()); ++j) {
      const Mat3 R = oracle::rot6d(x.row(i).segment<6>(layout.local_rotation(j)).transpose());
      CHECK((R - clip[i].local(j)).norm() < 1e-9);
    }
  }
}

TEST_CASE("heading deltas only contribute their yaw") {
  const SkeletonSpec skel = make_desk_skeleton();
  const FeatureLayout layout(skel);
  Rng rng = make_rng(26);
  const auto clip = gen::clip(rng, skel, 20);
  const FeatureMatrix x = encode(skel, clip).data;
  FeatureMatrix tilted = x;
  for (int i = 0; i < x.rows(); ++i) {
    // a roll about the delta's own forward axis keeps that axis in place
    const Mat3 G = oracle::rot6d(x.row(i).segment<6>(FeatureLayout::heading_delta).transpose());
    const Mat3 R = G * Eigen::AngleAxisd(gen::uniform(rng, -0.5, 0.5), Vec3::UnitY()).toRotationMatrix();
    tilted.row(i).segment<6>(FeatureLayout::heading_delta) = rot6d_from_matrix(R).transpose();
  }
  const DecodeOrigin o = decode_origin(clip.front());
  const WorldMotion a = decode_world(skel, x, o.position, o.heading);
  const WorldMotion b = decode_world(skel, tilted, o.position, o.heading);
  const oracle::Frames c = oracle::decode(skel, tilted, o.position, o.heading);
  for (int i = 0; i < x.rows(); ++i) {
    for (int j = 0; j < layout.joint_count; ++j) {
      CHECK((a.frames[i].positions[j] - b.frames[i].positions[j]).norm() < 1e-9);
      CHECK((c.positions[i][j] - b.frames[i].positions[j]).norm() < 1e-9);
    }
    CHECK(b.headings[i](2, 2) == doctest::Approx(1.0));
  }
}

TEST_CASE("contact labels follow the height and speed rule") {
  const SkeletonSpec skel = make_desk_skeleton();
  Rng rng = make_rng(25);
  int positives = 0;
  for (int c = 0; c < 40; ++c) {
    auto clip = gen::clip(rng, skel, 16);
    // drop the clip so the feet are near the floor and some frames qualify
    const double lowest = oracle::fk(skel, clip.front())[skel.foot_joints[0]].z();
    for (auto& p : clip) {
      p.root_position.z() -= lowest - 0.02;
    }
    if (c % 2 == 0) {
      for (auto& p : clip) {
        p = clip.front();
      }
    }
    const Eigen::MatrixX4d f = contact_labels(skel, clip);
    const int n = static_cast<int>(clip.size());
    for (int i = 0; i < n; ++i) {
      const int a = i < n - 1 ? i : n - 2;
      const auto pa = oracle::fk(skel, clip[a]);
      const auto pb = oracle::fk(skel, clip[a + 1]);
      const auto pi = oracle::fk(skel, clip[i]);
      for (int k = 0; k < 4; ++k) {
        const int j = skel.foot_joints[k];
        const bool want = pi[j].z() < 0.05 && (pb[j] - pa[j]).norm() < 0.01;
        CHECK(f(i, k) == (want ? 1.0 : 0.0));
        positives += want ? 1 : 0;
      }
    }
  }
  CHECK(positives > 0);
}

TEST_CASE("decode_world backward matches finite differences") {
  const SkeletonSpec skel = make_desk_skeleton();
  Rng rng = make_rng(26);
  const auto clip = gen::clip(rng, skel, 6);
  FeatureMatrix x = encode(skel, clip).data + gen::matrix(rng, 6, FeatureLayout(skel).dim(), 0.05);
  const Vec3 origin(0.3, -0.2, 0.9);
  const Mat3 H = rot_z(0.7);

  // random linear functional of positions, rotations and contacts
  const WorldMotion m0 = decode_world(skel, x, origin, H);
  WorldGradient w(6, static_cast<int>(skel.joint_count()));
  for (int i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < skel.joint_count(); ++j) {
      w.positions[i][j] = Vec3(gen::normal(rng), gen::normal(rng), gen::normal(rng));
      for (int e = 0; e < 9; ++e) {
        w.rotations[i][j].data()[e] = gen::normal(rng);
      }
    }
    for (int k = 0; k < 4; ++k) {
      w.contacts(i, k) = gen::normal(rng);
    }
  }
  auto value = [&](const FeatureMatrix& xx) {
    const WorldMotion m = decode_world(skel, xx, origin, H);
    double s = 0.0;
    for (int i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < skel.joint_count(); ++j) {
        s += w.positions[i][j].dot(m.frames[i].positions[j]);
        s += w.rotations[i][j].cwiseProduct(m.frames[i].rotations[j]).sum();
      }
      for (int k = 0; k < 4; ++k) {
        s += w.contacts(i, k) * m.contacts(i, k);
      }
    }
    return s;
  };
  FeatureMatrix dx = FeatureMatrix::Zero(x.rows(), x.cols());
  decode_world_backward(skel, x, m0, w, dx);
  for (int probe = 0; probe < 60; ++probe) {
    const int r = static_cast<int>(rng() % x.rows());
    const int c = static_cast<int>(rng() % x.cols());
    const double keep = x(r, c);
    x(r, c) = keep + 1e-6;
    const double up = value(x);
    x(r, c) = keep - 1e-6;
    const double down = value(x);
    x(r, c) = keep;
    const double fd = (up - down) / 2e-6;
    CHECK(std::abs(dx(r, c) - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("motion files round trip at float precision") {
  const SkeletonSpec skel = make_desk_skeleton();
  Rng rng = make_rng(27);
  const MotionFeatures m = encode(skel, gen::clip(rng, skel, 10));
  const auto path = std::filesystem::temp_directory_path() / "fusion_test_clip.motion";
  save_motion(m, path);
  const MotionFeatures back = load_motion(path);
  std::filesystem::remove(path);
  CHECK(back.skeleton_id == m.skeleton_id);
  CHECK(back.frames() == m.frames());
  CHECK((back.data - m.data.cast<float>().cast<double>()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("decode rejects mismatched inputs") {
  const SkeletonSpec skel = make_desk_skeleton();
  MotionFeatures m;
  m.data = FeatureMatrix::Zero(4, 100);
  CHECK_THROWS_AS(decode(skel, m, Vec3::Zero(), Mat3::Identity()), Error);
  Rng rng = make_rng(28);
  CHECK_THROWS_AS(encode(skel, gen::clip(rng, skel, 1)), Error);
}
