#include "fusion/datafuse.h"

#include "fusion/parallel.h"

#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace fusion {

using nlohmann::json;

std::string_view to_string(Side side) {
  return side == Side::Left ? "left" : "right";
}

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kStanceFraction = 0.6;
constexpr double kAnkleHeight = 0.02;

double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Vec3 forward_of(double yaw) {
  return Vec3(-std::sin(yaw), std::cos(yaw), 0.0);
}

Vec3 right_of(double yaw) {
  return Vec3(std::cos(yaw), std::sin(yaw), 0.0);
}

/// Orthonormal frame whose first column is `u` and second column is the part
/// of `pole` orthogonal to `u`.
Mat3 aim(const Vec3& u, const Vec3& pole) {
  Vec3 p = pole - pole.dot(u) * u;
  if (p.norm() < 1e-6) {
    const Vec3 alt = std::abs(u.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitY();
    p = alt - alt.dot(u) * u;
  }
  p.normalize();
  Mat3 m;
  m.col(0) = u;
  m.col(1) = p;
  m.col(2) = u.cross(p);
  return m;
}

/// World rotation taking a bone's rest direction to `dir`, with the bone's
/// local +Y turned toward `pole`.
Mat3 bone_rotation(const Vec3& rest_dir, const Vec3& dir, const Vec3& pole) {
  return aim(dir, pole) * aim(rest_dir.normalized(), Vec3::UnitY()).transpose();
}

struct TwoBone {
  Vec3 upper; // unit direction root -> mid
  Vec3 lower; // unit direction mid -> end
};

TwoBone solve_two_bone(const Vec3& root, const Vec3& target, double l1, double l2, const Vec3& bend) {
  Vec3 d = target - root;
  double dist = d.norm();
  const Vec3 dh = dist > 1e-9 ? Vec3(d / dist) : Vec3(-Vec3::UnitZ());
  dist = std::clamp(dist, std::abs(l1 - l2) + 1e-4, (l1 + l2) * 0.9999);
  const double cos_a = std::clamp((l1 * l1 + dist * dist - l2 * l2) / (2.0 * l1 * dist), -1.0, 1.0);
  const double sin_a = std::sqrt(1.0 - cos_a * cos_a);
  Vec3 n = bend - bend.dot(dh) * dh;
  if (n.norm() < 1e-9) {
    n = Vec3::UnitY() - dh.y() * dh;
  }
  n.normalize();
  const Vec3 mid = root + l1 * (cos_a * dh + sin_a * n);
  const Vec3 end = root + dist * dh;
  return {(mid - root) / l1, (end - mid) / l2};
}

Mat3 slerp(const Mat3& a, const Mat3& b, double w) {
  const Eigen::Quaterniond qa(a);
  const Eigen::Quaterniond qb(b);
  return qa.slerp(w, qb).toRotationMatrix();
}

struct Gait {
  double speed = 0.0;
  double curvature = 0.0;
  double yaw0 = 0.0;
  Vec3 origin = Vec3::Zero();
  double period = 1.0; // full cycle (two steps), seconds
  double phase0 = 0.0;
  double lift = 0.06;
  double hip_width = 0.09;

  bool idle() const {
    return speed < 0.05;
  }

  double yaw(double t) const {
    return yaw0 + curvature * speed * t;
  }

  Vec3 path(double t) const {
    const double s = speed * t;
    if (std::abs(curvature) < 1e-9) {
      return origin + s * forward_of(yaw0);
    }
    const double y1 = yaw0 + curvature * s;
    return origin + Vec3(std::cos(y1) - std::cos(yaw0), std::sin(y1) - std::sin(yaw0), 0.0) / curvature;
  }

  struct Foot {
    Vec3 ankle;
    double yaw;
    bool planted;
  };

  Foot plant(int side, double t) const {
    const double lateral = side == 0 ? -hip_width : hip_width;
    const double y = yaw(t);
    Vec3 p = path(t) + lateral * right_of(y);
    p.z() = kAnkleHeight;
    return {p, y, true};
  }

  Foot foot(int side, double t) const {
    if (idle()) {
      return plant(side, 0.0);
    }
    const double offset = side == 0 ? 0.0 : 0.5;
    const double c = t / period + offset + phase0;
    const double k = std::floor(c);
    const double p = c - k;
    const double start = (k - offset - phase0) * period;
    const Foot cur = plant(side, start + 0.5 * kStanceFraction * period);
    if (p < kStanceFraction) {
      return cur;
    }
    const Foot next = plant(side, start + period + 0.5 * kStanceFraction * period);
    const double u = (p - kStanceFraction) / (1.0 - kStanceFraction);
    Foot f;
    f.ankle = (1.0 - u) * cur.ankle + u * next.ankle;
    f.ankle.z() += lift * std::sin(kPi * u);
    f.yaw = (1.0 - u) * cur.yaw + u * next.yaw;
    f.planted = false;
    return f;
  }
};

struct Gesture {
  bool active = false;
  double start = 0.0;
  double end = 0.0;
  double ramp = 0.3;
  double gap = 0.15;
  double height = 0.0;
  double reach = 0.32;

  double weight(double t) const {
    if (!active) {
      return 0.0;
    }
    return smoothstep((t - start) / ramp) * smoothstep((end - t) / ramp);
  }
};

struct LegJoints {
  int hip, knee, ankle;
};

struct ArmJoints {
  int shoulder, elbow, wrist;
};

} // namespace

BodyClip synth_body_clip(std::uint64_t seed, int frames, const SkeletonSpec& skel, const BodySynthOptions& opts) {
  if (frames < 2) {
    throw Error(ErrorCode::TooShort, "a clip needs at least two frames");
  }
  Rng rng = make_rng(seed, 0);
  const double fps = skel.frame_rate;

  Gait g;
  const bool idle_draw = uniform(rng, 0, 1) < 0.15;
  g.speed = opts.speed.value_or(idle_draw ? 0.0 : uniform(rng, 0.2, 1.5));
  g.curvature = opts.curvature.value_or(uniform(rng, -0.6, 0.6));
  g.yaw0 = opts.yaw.value_or(uniform(rng, -kPi, kPi));
  g.origin = Vec3(uniform(rng, -1, 1), uniform(rng, -1, 1), 0);
  const double cadence = 1.6 + 0.6 * g.speed; // steps per second
  g.period = 2.0 / cadence;
  g.phase0 = uniform(rng, 0, 1);
  g.lift = 0.05 + 0.02 * g.speed;

  const double duration = (frames - 1) / fps;
  Gesture gesture;
  gesture.active = opts.gesture.value_or(uniform(rng, 0, 1) < 0.35);
  {
    const double len = uniform(rng, 1.0, 2.5);
    gesture.start = uniform(rng, -0.5, std::max(0.0, duration - 0.5));
    gesture.end = gesture.start + len;
    gesture.gap = uniform(rng, 0.10, 0.25);
    gesture.height = uniform(rng, -0.15, 0.05);
    gesture.reach = uniform(rng, 0.28, 0.38);
  }
  const double sway = uniform(rng, 0.02, 0.05);

  const LegJoints legs[2] = {
      {skel.joint_index("left_hip"), skel.joint_index("left_knee"), skel.joint_index("left_ankle")},
      {skel.joint_index("right_hip"), skel.joint_index("right_knee"), skel.joint_index("right_ankle")}};
  const ArmJoints arms[2] = {
      {skel.joint_index("left_shoulder"), skel.joint_index("left_elbow"), skel.joint_index("left_wrist")},
      {skel.joint_index("right_shoulder"), skel.joint_index("right_elbow"), skel.joint_index("right_wrist")}};
  const int chest = skel.joint_index("chest");
  const int head = skel.joint_index("head");
  g.hip_width = std::abs(skel.joints[legs[0].hip].rest_offset.x());

  const double thigh = skel.joints[legs[0].knee].rest_offset.norm();
  const double shin = skel.joints[legs[0].ankle].rest_offset.norm();
  const double reach = 0.985 * (thigh + shin);

  BodyClip clip;
  clip.source_tag = "synth:" + std::to_string(seed);
  clip.poses.reserve(frames);
  clip.stance.reserve(frames);
  const double pace = g.speed / 1.5;

  for (int i = 0; i < frames; ++i) {
    const double t = i / fps;
    const double yaw = g.yaw(t);
    const Mat3 H = rot_z(yaw);
    const Vec3 fwd = forward_of(yaw);
    const double ph = 2.0 * kPi * (t / g.period + g.phase0);

    Pose pose = Pose::rest(skel);
    pose.root_orient = H * rot_x(-0.06 * pace) * rot_y(sway * pace * std::sin(ph));

    Gait::Foot feet[2] = {g.foot(0, t), g.foot(1, t)};
    // A foot counts as planted when it stays on its plant through the next frame.
    const double tn = (i < frames - 1 ? i + 1 : i) / fps;
    const double tp = (i < frames - 1 ? i : i - 1) / fps;
    clip.stance.push_back({g.foot(0, tp).planted && g.foot(0, tn).planted,
                           g.foot(1, tp).planted && g.foot(1, tn).planted});

    // Lowest pelvis height that still lets both feet reach their targets.
    const Vec3 base = g.path(t);
    double z = skel.standing_height;
    for (int s = 0; s < 2; ++s) {
      const Vec3 off = pose.root_orient * skel.joints[legs[s].hip].rest_offset;
      const Vec3 d = feet[s].ankle - (base + off);
      const double horiz = std::hypot(d.x(), d.y());
      const double vert = std::sqrt(std::max(reach * reach - horiz * horiz, 0.09));
      z = std::min(z, feet[s].ankle.z() + vert - off.z());
    }
    if (g.idle()) {
      z -= 0.004 * (1.0 + std::sin(2.0 * kPi * 0.25 * t + g.phase0 * 6.0));
    }
    pose.root_position = Vec3(base.x(), base.y(), z);

    const double twist = 0.12 * pace * std::sin(ph);
    pose.local(chest) = rot_z(-twist) * rot_x(0.04 * pace);
    pose.local(head) = rot_z(twist) * rot_x(-0.04 * pace);

    for (int s = 0; s < 2; ++s) {
      const LegJoints& L = legs[s];
      const Vec3 hip = pose.root_position + pose.root_orient * skel.joints[L.hip].rest_offset;
      const Vec3 pole = (fwd + forward_of(feet[s].yaw)).normalized();
      const TwoBone ik = solve_two_bone(hip, feet[s].ankle, thigh, shin, pole);
      const Vec3 down = -Vec3::UnitZ();
      const Mat3 w_hip = bone_rotation(down, ik.upper, pole);
      const Mat3 w_knee = bone_rotation(down, ik.lower, pole);
      const Mat3 w_ankle = rot_z(feet[s].yaw);
      pose.local(L.hip) = pose.root_orient.transpose() * w_hip;
      pose.local(L.knee) = w_hip.transpose() * w_knee;
      pose.local(L.ankle) = w_knee.transpose() * w_ankle;
    }

    // Arms counter-swing against the same-side leg.
    for (int s = 0; s < 2; ++s) {
      double swing;
      if (g.idle()) {
        swing = 0.04 * std::sin(2.0 * kPi * 0.3 * t + s * 1.7 + g.phase0 * 6.0);
      } else {
        const double lead = (feet[s].ankle - base).dot(fwd);
        swing = std::clamp(-1.6 * lead, -0.55, 0.55);
      }
      pose.local(arms[s].shoulder) = rot_x(swing);
      pose.local(arms[s].elbow) = rot_x(0.15 + 0.3 * std::max(swing, 0.0));
    }

    const double w = gesture.weight(t);
    if (w > 0.0) {
      const SkeletonState state = skeleton_state(skel, pose);
      const Mat3& w_chest = state.rotations[chest];
      const Vec3 right = right_of(yaw);
      const Vec3 center = state.positions[chest] + gesture.reach * fwd + gesture.height * Vec3::UnitZ();
      for (int s = 0; s < 2; ++s) {
        const ArmJoints& A = arms[s];
        const double side = s == 0 ? -1.0 : 1.0;
        const Vec3 target = center + side * 0.5 * gesture.gap * right;
        const Vec3& shoulder = state.positions[A.shoulder];
        const Vec3 b1 = skel.joints[A.elbow].rest_offset;
        const Vec3 b2 = skel.joints[A.wrist].rest_offset;
        const Vec3 bend = -Vec3::UnitZ() + 0.6 * side * right - 0.2 * fwd;
        const TwoBone ik = solve_two_bone(shoulder, target, b1.norm(), b2.norm(), bend);
        const Mat3 w_sh = bone_rotation(b1, ik.upper, fwd);
        const Mat3 w_el = bone_rotation(b2, ik.lower, fwd);
        const Mat3 w_wr = H * rot_x(1.2);
        const Mat3 l_sh = w_chest.transpose() * w_sh;
        const Mat3 l_el = w_sh.transpose() * w_el;
        const Mat3 l_wr = w_el.transpose() * w_wr;
        pose.local(A.shoulder) = slerp(pose.local(A.shoulder), l_sh, w);
        pose.local(A.elbow) = slerp(pose.local(A.elbow), l_el, w);
        pose.local(A.wrist) = slerp(pose.local(A.wrist), l_wr, w);
      }
    }
    clip.poses.push_back(std::move(pose));
  }
  return clip;
}

HandClip synth_hand_clip(std::uint64_t seed, int frames, const SkeletonSpec& skel, Side side,
                         const HandSynthOptions& opts) {
  if (frames < 2) {
    throw Error(ErrorCode::TooShort, "a clip needs at least two frames");
  }
  const auto& joints = side == Side::Left ? skel.left_hand_joints : skel.right_hand_joints;
  const int nj = static_cast<int>(joints.size());
  HandClip clip;
  clip.side = side;
  clip.local_rots.assign(frames, std::vector<Mat3>(nj, Mat3::Identity()));

  // The random draws do not depend on the side, so a flipped left clip equals
  // the right clip generated from the same seed.
  Rng rng = make_rng(seed, 1);
  constexpr int kKnotSpacing = 15;
  const int knots = (frames - 1 + kKnotSpacing - 1) / kKnotSpacing + 1;
  std::vector<std::vector<double>> curl(knots, std::vector<double>(nj, 0.0));
  for (int k = 0; k < knots; ++k) {
    const double grip = uniform(rng, 0.0, 1.0);
    for (int j = 0; j < nj; ++j) {
      curl[k][j] = std::clamp(grip + uniform(rng, -0.3, 0.3), 0.0, 1.0);
    }
  }

  for (int j = 0; j < nj; ++j) {
    const JointLimit* lim = skel.limit_for(joints[j]);
    if (!lim) {
      continue;
    }
    for (int i = 0; i < frames; ++i) {
      double angle;
      if (opts.fist) {
        angle = lim->max_angle * i / (frames - 1);
      } else {
        const int k = i / kKnotSpacing;
        const double u = 0.5 - 0.5 * std::cos(kPi * (i - k * kKnotSpacing) / kKnotSpacing);
        const double c = (1.0 - u) * curl[k][j] + u * curl[std::min(k + 1, knots - 1)][j];
        angle = lim->min_angle + c * (lim->max_angle - lim->min_angle);
      }
      clip.local_rots[i][j] = axis_angle(lim->axis, angle);
    }
  }
  return clip;
}

BodyClip flip_clip(const SkeletonSpec& skel, const BodyClip& clip) {
  BodyClip out;
  const std::string suffix = "|flip";
  const auto& tag = clip.source_tag;
  if (tag.size() >= suffix.size() && tag.compare(tag.size() - suffix.size(), suffix.size(), suffix) == 0) {
    out.source_tag = tag.substr(0, tag.size() - suffix.size());
  } else {
    out.source_tag = tag + suffix;
  }
  out.poses.reserve(clip.poses.size());
  for (const auto& p : clip.poses) {
    out.poses.push_back(mirror_pose(skel, p));
  }
  out.stance.reserve(clip.stance.size());
  for (const auto& s : clip.stance) {
    out.stance.push_back({s[1], s[0]});
  }
  return out;
}

HandClip flip_hand(const SkeletonSpec& skel, const HandClip& clip) {
  const std::size_t nj = skel.left_hand_joints.size();
  HandClip out;
  out.side = clip.side == Side::Left ? Side::Right : Side::Left;
  out.local_rots.reserve(clip.local_rots.size());
  for (const auto& frame : clip.local_rots) {
    if (frame.size() != nj) {
      throw Error(ErrorCode::SizeMismatch, "hand clip does not match skeleton hand joints");
    }
    std::vector<Mat3> m(nj);
    for (std::size_t k = 0; k < nj; ++k) {
      m[k] = mirror_rotation(frame[k]);
    }
    out.local_rots.push_back(std::move(m));
  }
  return out;
}

HandClip time_reverse(const HandClip& clip) {
  HandClip out = clip;
  std::reverse(out.local_rots.begin(), out.local_rots.end());
  return out;
}

std::vector<Pose> merge_body_hand(const SkeletonSpec& skel, const BodyClip& body, const HandClip& left,
                                  const HandClip& right) {
  const std::size_t n = body.poses.size();
  if (left.local_rots.size() != n || right.local_rots.size() != n) {
    throw Error(ErrorCode::LengthMismatch, "hand clips must match the body clip length");
  }
  if (left.side != Side::Left || right.side != Side::Right) {
    throw Error(ErrorCode::SideMismatch, "expected a left and a right hand clip");
  }
  std::vector<Pose> out = body.poses;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < skel.left_hand_joints.size(); ++k) {
      out[i].local(skel.left_hand_joints[k]) = left.local_rots[i].at(k);
      out[i].local(skel.right_hand_joints[k]) = right.local_rots[i].at(k);
    }
  }
  return out;
}

FilterResult penetration_filter(const SkeletonSpec& skel, std::span<const Pose> poses, double threshold) {
  struct Sets {
    std::vector<int> hand;
    std::vector<int> rest;
  };
  Sets sets[2];
  const std::vector<int>* hands[2] = {&skel.left_hand_joints, &skel.right_hand_joints};
  for (int s = 0; s < 2; ++s) {
    sets[s].hand = *hands[s];
    for (int j = 0; j < static_cast<int>(skel.joint_count()); ++j) {
      const bool own = std::find(hands[s]->begin(), hands[s]->end(), j) != hands[s]->end();
      if (!own && j != skel.wrist_joints[s]) {
        sets[s].rest.push_back(j);
      }
    }
  }
  FilterResult result;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const SkeletonState state = skeleton_state(skel, poses[i]);
    for (const auto& set : sets) {
      const auto r = self_penetration_detail(skel, state, set.hand, set.rest);
      if (r.depth > result.max_depth) {
        result.max_depth = r.depth;
        result.frame = static_cast<int>(i);
        result.joint_a = r.joint_a;
        result.joint_b = r.joint_b;
      }
    }
  }
  result.accepted = result.max_depth <= threshold;
  return result;
}

DatasetConfig dataset_config_from_json(const std::string& text) {
  DatasetConfig c;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) {
      throw Error(ErrorCode::SchemaError, "dataset config must be a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
      if (key == "body_clips") {
        c.body_clips = value.get<int>();
      } else if (key == "hand_clips") {
        c.hand_clips = value.get<int>();
      } else if (key == "frames") {
        c.frames = value.get<int>();
      } else if (key == "seed") {
        c.seed = value.get<std::uint64_t>();
      } else if (key == "penetration_threshold") {
        c.penetration_threshold = value.get<double>();
      } else if (key == "retry_budget") {
        c.retry_budget = value.get<int>();
      } else if (key == "skip_merge") {
        c.skip_merge = value.get<bool>();
      } else if (key == "threads") {
        c.threads = value.get<int>();
      } else {
        throw Error(ErrorCode::SchemaError, "unknown dataset config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaError, std::string("dataset config: ") + e.what());
  }
  if (c.body_clips < 1 || c.frames < 2 || c.retry_budget < 1 || c.hand_clips < 1 || c.penetration_threshold < 0) {
    throw Error(ErrorCode::InvalidConfig, "dataset config values out of range");
  }
  return c;
}

std::string DatasetManifest::to_json() const {
  json j;
  j["clips"] = clips;
  j["clip_tags"] = clip_tags;
  j["counts"] = {{"body_original", body_original}, {"body_flipped", body_flipped},
                 {"hand_generated", hand_generated}, {"hand_flipped", hand_flipped},
                 {"hand_reversed", hand_reversed},   {"dropped", dropped},
                 {"total", body_original + body_flipped}};
  j["rejections"] = rejections;
  // Hex string so the full 64-bit hash survives JSON readers that use doubles.
  char hash[17];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(skeleton_hash));
  j["skeleton_hash"] = hash;
  j["seed"] = seed;
  j["frames"] = frames;
  auto& log = j["pairing_log"] = json::array();
  for (const auto& r : pairing_log) {
    log.push_back({{"clip", r.clip},
                   {"attempt", r.attempt},
                   {"left_source", r.left_source},
                   {"right_source", r.right_source},
                   {"accepted", r.accepted},
                   {"depth", r.depth},
                   {"frame", r.frame}});
  }
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  DatasetManifest m;
  try {
    const json j = json::parse(text);
    m.clips = j.at("clips").get<std::vector<std::string>>();
    m.clip_tags = j.value("clip_tags", std::vector<std::string>{});
    const auto& c = j.at("counts");
    m.body_original = c.at("body_original");
    m.body_flipped = c.at("body_flipped");
    m.hand_generated = c.value("hand_generated", 0);
    m.hand_flipped = c.value("hand_flipped", 0);
    m.hand_reversed = c.value("hand_reversed", 0);
    m.dropped = c.value("dropped", 0);
    m.rejections = j.value("rejections", 0);
    m.skeleton_hash = std::stoull(j.at("skeleton_hash").get<std::string>(), nullptr, 16);
    m.seed = j.at("seed");
    m.frames = j.at("frames");
    for (const auto& r : j.value("pairing_log", json::array())) {
      m.pairing_log.push_back({r.at("clip"), r.at("attempt"), r.at("left_source"), r.at("right_source"),
                               r.at("accepted"), r.at("depth"), r.at("frame")});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaError, std::string("manifest: ") + e.what());
  }
  return m;
}

std::vector<HandClip> build_hand_pool(const SkeletonSpec& skel, const DatasetConfig& config, DatasetManifest* counts) {
  std::vector<HandClip> pool;
  for (int h = 0; h < config.hand_clips; ++h) {
    pool.push_back(synth_hand_clip(make_rng(config.seed, 2'000'000 + h)(), config.frames, skel, Side::Right));
  }
  for (int h = 0; h < config.hand_clips; ++h) {
    const HandClip left =
        synth_hand_clip(make_rng(config.seed, 2'500'000 + h)(), config.frames, skel, Side::Left);
    pool.push_back(flip_hand(skel, left));
  }
  const std::size_t forward = pool.size();
  for (std::size_t h = 0; h < forward; ++h) {
    pool.push_back(time_reverse(pool[h]));
  }
  if (counts) {
    counts->hand_generated = 2 * config.hand_clips;
    counts->hand_flipped = config.hand_clips;
    counts->hand_reversed = static_cast<int>(forward);
  }
  return pool;
}

namespace {

struct ClipOutcome {
  std::optional<MotionFeatures> features;
  std::string tag;
  bool flipped = false;
  std::vector<PairingRecord> log;
};

DatasetManifest run_pipeline(const SkeletonSpec& skel, const DatasetConfig& config,
                             std::vector<MotionFeatures>& survivors) {
  skel.validate();
  DatasetManifest manifest;
  manifest.seed = config.seed;
  manifest.frames = config.frames;
  manifest.skeleton_hash = skel.hash();

  const std::vector<HandClip> pool =
      config.skip_merge ? std::vector<HandClip>{} : build_hand_pool(skel, config, &manifest);

  const int total = 2 * config.body_clips;
  std::vector<ClipOutcome> outcomes(total);
  parallel_for(total, config.threads, [&](int idx) {
    const int b = idx / 2;
    const bool flipped = idx % 2 == 1;
    BodyClip body = synth_body_clip(make_rng(config.seed, 1'000'000 + b)(), config.frames, skel);
    if (flipped) {
      body = flip_clip(skel, body);
    }
    ClipOutcome& out = outcomes[idx];
    out.tag = body.source_tag;
    out.flipped = flipped;
    if (config.skip_merge) {
      const FilterResult r = penetration_filter(skel, body.poses, config.penetration_threshold);
      out.log.push_back({idx, 0, -1, -1, r.accepted, r.max_depth, r.frame});
      if (r.accepted) {
        out.features = encode(skel, body.poses);
      }
      return;
    }
    Rng rng = make_rng(config.seed, 3'000'000 + idx);
    std::uniform_int_distribution<int> pick(0, static_cast<int>(pool.size()) - 1);
    for (int attempt = 0; attempt < config.retry_budget; ++attempt) {
      const int ls = pick(rng);
      const int rs = pick(rng);
      const auto poses = merge_body_hand(skel, body, flip_hand(skel, pool[ls]), pool[rs]);
      const FilterResult r = penetration_filter(skel, poses, config.penetration_threshold);
      out.log.push_back({idx, attempt, ls, rs, r.accepted, r.max_depth, r.frame});
      if (r.accepted) {
        out.features = encode(skel, poses);
        return;
      }
    }
  });

  for (int idx = 0; idx < total; ++idx) {
    auto& o = outcomes[idx];
    for (const auto& r : o.log) {
      manifest.pairing_log.push_back(r);
      if (!r.accepted) {
        ++manifest.rejections;
      }
    }
    if (!o.features) {
      ++manifest.dropped;
      continue;
    }
    char name[32];
    std::snprintf(name, sizeof(name), "clip_%05d.motion", static_cast<int>(manifest.clips.size()));
    manifest.clips.push_back(name);
    manifest.clip_tags.push_back(o.tag);
    (o.flipped ? manifest.body_flipped : manifest.body_original)++;
    survivors.push_back(std::move(*o.features));
  }
  return manifest;
}

} // namespace

DatasetManifest build_dataset(const SkeletonSpec& skel, const DatasetConfig& config,
                              const std::filesystem::path& out_dir) {
  std::vector<MotionFeatures> clips;
  DatasetManifest manifest = run_pipeline(skel, config, clips);
  std::filesystem::create_directories(out_dir);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    save_motion(clips[i], out_dir / manifest.clips[i]);
  }
  std::ofstream out(out_dir / "manifest.json");
  if (!out) {
    throw Error(ErrorCode::IoError, "cannot write manifest in " + out_dir.string());
  }
  out << manifest.to_json();
  return manifest;
}

std::vector<MotionFeatures> build_dataset_in_memory(const SkeletonSpec& skel, const DatasetConfig& config,
                                                    DatasetManifest* manifest) {
  std::vector<MotionFeatures> clips;
  DatasetManifest m = run_pipeline(skel, config, clips);
  if (manifest) {
    *manifest = std::move(m);
  }
  return clips;
}

std::vector<MotionFeatures> load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) {
    throw Error(ErrorCode::IoError, "no manifest.json in " + dir.string());
  }
  std::stringstream ss;
  ss << in.rdbuf();
  const DatasetManifest m = DatasetManifest::from_json(ss.str());
  std::vector<MotionFeatures> clips;
  clips.reserve(m.clips.size());
  for (const auto& name : m.clips) {
    clips.push_back(load_motion(dir / name));
  }
  return clips;
}

} // namespace fusion
