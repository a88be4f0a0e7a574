#include "doctest.h"

#include "fusion/datafuse.h"
#include "generators.h"
#include "oracles.h"

#include <filesystem>

using namespace fusion;

namespace {

double max_pose_diff(const Pose& a, const Pose& b) {
  double d = (a.root_position - b.root_position).cwiseAbs().maxCoeff();
  d = std::max(d, (a.root_orient - b.root_orient).cwiseAbs().maxCoeff());
  for (std::size_t j = 0; j < a.local_rots.size(); ++j) {
    d = std::max(d, (a.local_rots[j] - b.local_rots[j]).cwiseAbs().maxCoeff());
  }
  return d;
}

double max_hand_diff(const HandClip& a, const HandClip& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.local_rots.size(); ++i) {
    for (std::size_t k = 0; k < a.local_rots[i].size(); ++k) {
      d = std::max(d, (a.local_rots[i][k] - b.local_rots[i][k]).cwiseAbs().maxCoeff());
    }
  }
  return d;
}

/// Deepest overlap between a capsule on `a_joints` and one on `b_joints`,
/// measured with sampled segment distances (never deeper than the truth).
double capsule_overlap(const SkeletonSpec& skel, const Pose& pose, const std::vector<int>& a_joints,
                       const std::vector<int>& b_joints, int samples) {
  auto in = [](const std::vector<int>& v, int j) { return std::find(v.begin(), v.end(), j) != v.end(); };
  double best = 0.0;
  for (const auto& ca : skel.capsules) {
    if (!in(a_joints, ca.joint)) continue;
    const auto Ta = oracle::world_transform(skel, pose, ca.joint);
    for (const auto& cb : skel.capsules) {
      if (!in(b_joints, cb.joint)) continue;
      const auto Tb = oracle::world_transform(skel, pose, cb.joint);
      const double d = oracle::segment_distance_sampled(Ta * ca.a, Ta * ca.b, Tb * cb.a, Tb * cb.b, samples);
      best = std::max(best, ca.radius + cb.radius - d);
    }
  }
  return best;
}

HandClip rest_hand(const SkeletonSpec& skel, Side side, int frames) {
  HandClip h;
  h.side = side;
  h.local_rots.assign(frames, std::vector<Mat3>(skel.left_hand_joints.size(), Mat3::Identity()));
  return h;
}

} // namespace

TEST_CASE("flips and time reversal are involutions") {
  const SkeletonSpec skel = make_desk_skeleton();
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const BodyClip body = synth_body_clip(seed, 30, skel);
    const BodyClip back = flip_clip(skel, flip_clip(skel, body));
    CHECK(back.source_tag == body.source_tag);
    CHECK(back.stance == body.stance);
    for (std::size_t i = 0; i < body.poses.size(); ++i) {
      CHECK(max_pose_diff(back.poses[i], body.poses[i]) < 1e-9);
    }
    const HandClip hand = synth_hand_clip(seed, 30, skel, seed % 2 ? Side::Left : Side::Right);
    const HandClip flipped = flip_hand(skel, hand);
    CHECK(flipped.side != hand.side);
    CHECK(flip_hand(skel, flipped).side == hand.side);
    CHECK(max_hand_diff(flip_hand(skel, flipped), hand) < 1e-9);
    CHECK(max_hand_diff(time_reverse(time_reverse(hand)), hand) == 0.0);
    const HandClip rev = time_reverse(hand);
    CHECK(max_hand_diff(HandClip{hand.side, {rev.local_rots.back()}}, HandClip{hand.side, {hand.local_rots.front()}}) ==
          0.0);
  }
}

TEST_CASE("flipped body clips are mirror images in world space") {
  const SkeletonSpec skel = make_desk_skeleton();
  const BodyClip body = synth_body_clip(3, 20, skel);
  const BodyClip flipped = flip_clip(skel, body);
  for (std::size_t i = 0; i < body.poses.size(); ++i) {
    const auto a = oracle::fk(skel, body.poses[i]);
    const auto b = oracle::fk(skel, flipped.poses[i]);
    for (std::size_t j = 0; j < a.size(); ++j) {
      CHECK((b[skel.mirror_map[j]] - mirror_matrix() * a[j]).norm() < 1e-9);
    }
  }
}

TEST_CASE("merging keeps the body's wrist orientation") {
  const SkeletonSpec skel = make_desk_skeleton();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const BodyClip body = synth_body_clip(seed, 24, skel);
    const HandClip right = synth_hand_clip(seed + 100, 24, skel, Side::Right);
    const HandClip left = flip_hand(skel, synth_hand_clip(seed + 200, 24, skel, Side::Right));
    const auto merged = merge_body_hand(skel, body, left, right);
    for (std::size_t i = 0; i < merged.size(); ++i) {
      for (int w : skel.wrist_joints) {
        const auto a = oracle::world_transform(skel, merged[i], w);
        const auto b = oracle::world_transform(skel, body.poses[i], w);
        CHECK((a.linear() - b.linear()).cwiseAbs().maxCoeff() < 1e-9);
        CHECK((a.translation() - b.translation()).cwiseAbs().maxCoeff() < 1e-9);
      }
      for (std::size_t k = 0; k < skel.left_hand_joints.size(); ++k) {
        CHECK(merged[i].local(skel.left_hand_joints[k]) == left.local_rots[i][k]);
        CHECK(merged[i].local(skel.right_hand_joints[k]) == right.local_rots[i][k]);
      }
    }
  }
}

TEST_CASE("merge validates its inputs") {
  const SkeletonSpec skel = make_desk_skeleton();
  const BodyClip body = synth_body_clip(1, 20, skel);
  const HandClip r = rest_hand(skel, Side::Right, 20);
  const HandClip l = rest_hand(skel, Side::Left, 20);
  CHECK_THROWS_AS(merge_body_hand(skel, body, r, r), Error);
  CHECK_THROWS_AS(merge_body_hand(skel, body, rest_hand(skel, Side::Left, 19), r), Error);
  CHECK_NOTHROW(merge_body_hand(skel, body, l, r));
}

TEST_CASE("penetration filter rejects a hand pushed into the hips") {
  const SkeletonSpec skel = make_desk_skeleton();
  const int shoulder = skel.joint_index("left_shoulder");
  const std::vector<int> torso = {0, skel.joint_index("left_hip"), skel.joint_index("right_hip")};

  // swing the left arm through a grid and keep the deepest hand/torso overlap
  Pose best = Pose::rest(skel, Vec3(0, 0, skel.standing_height));
  double depth = 0.0;
  for (int ax = -8; ax <= 8; ++ax) {
    for (int ay = -8; ay <= 8; ++ay) {
      Pose p = Pose::rest(skel, Vec3(0, 0, skel.standing_height));
      p.local(shoulder) = rot_x(0.1 * ax) * rot_y(0.1 * ay);
      const double d = capsule_overlap(skel, p, skel.left_hand_joints, torso, 12);
      if (d > depth) {
        depth = d;
        best = p;
      }
    }
  }
  REQUIRE(capsule_overlap(skel, best, skel.left_hand_joints, torso, 200) > 0.02);

  BodyClip body;
  body.poses.assign(10, best);
  body.stance.assign(10, {true, true});
  const auto merged = merge_body_hand(skel, body, rest_hand(skel, Side::Left, 10), rest_hand(skel, Side::Right, 10));
  const FilterResult r = penetration_filter(skel, merged, 0.005);
  CHECK_FALSE(r.accepted);
  CHECK(r.max_depth > 0.02);
  CHECK(std::find(skel.left_hand_joints.begin(), skel.left_hand_joints.end(), r.joint_a) !=
        skel.left_hand_joints.end());
}

TEST_CASE("penetration filter accepts rest hands on walking bodies") {
  const SkeletonSpec skel = make_desk_skeleton();
  int accepted = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    BodySynthOptions opts;
    opts.gesture = false;
    const BodyClip body = synth_body_clip(seed, 30, skel, opts);
    const auto merged =
        merge_body_hand(skel, body, rest_hand(skel, Side::Left, 30), rest_hand(skel, Side::Right, 30));
    accepted += penetration_filter(skel, merged, 0.005).accepted ? 1 : 0;
  }
  CHECK(accepted == 10);
  const Pose rest = Pose::rest(skel, Vec3(0, 0, skel.standing_height));
  const std::vector<Pose> still(5, rest);
  CHECK(penetration_filter(skel, still, 0.005).accepted);
  CHECK(penetration_filter(skel, still, 0.005).max_depth == 0.0);
}

TEST_CASE("body generator respects the floor and its stance labels") {
  const SkeletonSpec skel = make_desk_skeleton();
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const BodyClip body = synth_body_clip(seed, 60, skel);
    REQUIRE(body.stance.size() == body.poses.size());
    for (std::size_t i = 0; i < body.poses.size(); ++i) {
      const auto p = oracle::fk(skel, body.poses[i]);
      for (int k = 0; k < 4; ++k) {
        CHECK(p[skel.foot_joints[k]].z() > -0.02);
      }
    }
  }
}

TEST_CASE("hand generator stays inside joint limits") {
  const SkeletonSpec skel = make_desk_skeleton();
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const HandClip h = synth_hand_clip(seed, 40, skel, Side::Right, {seed % 2 == 0});
    for (const auto& frame : h.local_rots) {
      for (std::size_t k = 0; k < frame.size(); ++k) {
        const JointLimit* lim = skel.limit_for(skel.right_hand_joints[k]);
        REQUIRE(lim != nullptr);
        const Eigen::AngleAxisd aa(frame[k]);
        const double angle = aa.angle() < 1e-12 ? 0.0 : aa.angle() * aa.axis().dot(lim->axis.normalized());
        CHECK(angle >= lim->min_angle - 1e-9);
        CHECK(angle <= lim->max_angle + 1e-9);
      }
    }
  }
}

TEST_CASE("dataset build is deterministic and counts its augmentations") {
  const SkeletonSpec skel = make_desk_skeleton();
  DatasetConfig cfg;
  cfg.body_clips = 4;
  cfg.hand_clips = 4;
  cfg.frames = 24;
  cfg.seed = 5;
  cfg.threads = 1;
  DatasetManifest m1;
  const auto a = build_dataset_in_memory(skel, cfg, &m1);
  cfg.threads = 3;
  DatasetManifest m2;
  const auto b = build_dataset_in_memory(skel, cfg, &m2);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].data == b[i].data);
  }
  // survivors are counted per source (original or mirrored)
  CHECK(m1.body_original + m1.body_flipped == static_cast<int>(a.size()));
  CHECK(static_cast<int>(a.size()) + m1.dropped == 8);
  CHECK(m1.hand_generated == 8);
  CHECK(m1.hand_flipped == 4);
  CHECK(m1.hand_reversed == 8);
  CHECK(m1.clips.size() == a.size());
  CHECK(m1.skeleton_hash == skel.hash());
  for (const auto& clip : a) {
    CHECK(clip.frames() == 24);
    CHECK(clip.dim() == 346);
  }

  const DatasetManifest back = DatasetManifest::from_json(m1.to_json());
  CHECK(back.clips == m1.clips);
  CHECK(back.rejections == m1.rejections);
  CHECK(back.pairing_log.size() == m1.pairing_log.size());
}

TEST_CASE("dataset directory round trip") {
  const SkeletonSpec skel = make_desk_skeleton();
  DatasetConfig cfg;
  cfg.body_clips = 2;
  cfg.hand_clips = 2;
  cfg.frames = 16;
  cfg.threads = 1;
  const auto dir = std::filesystem::temp_directory_path() / "fusion_test_dataset";
  std::filesystem::remove_all(dir);
  const DatasetManifest m = build_dataset(skel, cfg, dir);
  const auto clips = load_dataset(dir);
  CHECK(clips.size() == m.clips.size());
  std::filesystem::remove_all(dir);
}

TEST_CASE("dataset config parsing is strict") {
  CHECK(dataset_config_from_json(R"({"body_clips": 3, "frames": 40})").body_clips == 3);
  CHECK_THROWS_AS(dataset_config_from_json(R"({"bodyclips": 3})"), Error);
  CHECK_THROWS_AS(dataset_config_from_json("[1]"), Error);
}
