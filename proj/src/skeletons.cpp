#include "fusion/kinematics.h"

#include "json.hpp"

#include <fstream>
#include <sstream>

namespace fusion {

using nlohmann::json;

namespace {

struct Builder {
  SkeletonSpec skel;

  int add(const std::string& name, const std::string& parent, const Vec3& offset) {
    Joint j;
    j.name = name;
    j.parent = parent.empty() ? -1 : skel.joint_index(parent);
    j.rest_offset = offset;
    skel.joints.push_back(j);
    return static_cast<int>(skel.joints.size()) - 1;
  }

  /// Adds `left_*` and `right_*` copies; the given offset is the left one.
  void add_pair(const std::string& name, const std::string& parent, const Vec3& left_offset) {
    const auto par = [&](const std::string& side) {
      if (parent.rfind("*", 0) == 0) {
        return side + parent.substr(1);
      }
      return parent;
    };
    add("left_" + name, par("left_"), left_offset);
    add("right_" + name, par("right_"), mirror_matrix() * left_offset);
  }

  void capsule(const std::string& joint, double radius, const Vec3& a, const Vec3& b) {
    skel.capsules.push_back({skel.joint_index(joint), radius, a, b});
  }

  void capsule_pair(const std::string& name, double radius, const Vec3& a, const Vec3& b) {
    capsule("left_" + name, radius, a, b);
    capsule("right_" + name, radius, mirror_matrix() * a, mirror_matrix() * b);
  }

  void limit_pair(const std::string& name, const Vec3& left_axis, double lo, double hi) {
    skel.limits.push_back({skel.joint_index("left_" + name), left_axis, lo, hi});
    // A reflected rotation about `a` is a rotation about -S a.
    skel.limits.push_back({skel.joint_index("right_" + name), -(mirror_matrix() * left_axis), lo, hi});
  }

  void finish_mirror() {
    const int n = static_cast<int>(skel.joints.size());
    skel.mirror_map.resize(n);
    for (int i = 0; i < n; ++i) {
      const std::string& nm = skel.joints[i].name;
      int m = i;
      if (nm.rfind("left_", 0) == 0) {
        m = skel.find_joint("right_" + nm.substr(5));
      } else if (nm.rfind("right_", 0) == 0) {
        m = skel.find_joint("left_" + nm.substr(6));
      }
      skel.mirror_map[i] = m;
    }
  }
};

} // namespace

SkeletonSpec make_desk_skeleton() {
  Builder b;
  b.skel.name = "desk37";
  b.skel.frame_rate = 30.0;
  b.skel.standing_height = 0.93;

  b.add("pelvis", "", Vec3::Zero());
  b.add("chest", "pelvis", Vec3(0, 0, 0.30));
  b.add("head", "chest", Vec3(0, 0, 0.22));
  b.add_pair("hip", "pelvis", Vec3(-0.09, 0, -0.05));
  b.add_pair("knee", "*hip", Vec3(0, 0, -0.42));
  b.add_pair("ankle", "*knee", Vec3(0, 0, -0.44));
  b.add_pair("toe", "*ankle", Vec3(0, 0.14, -0.01));
  b.add_pair("shoulder", "chest", Vec3(-0.18, 0, 0.05));
  b.add_pair("elbow", "*shoulder", Vec3(-0.10, 0, -0.26));
  b.add_pair("wrist", "*elbow", Vec3(-0.06, 0, -0.24));

  // Hands hang beside the thighs with the palm facing the body (+X for the
  // left hand) and the thumb pointing forward.
  struct Finger {
    const char* name;
    Vec3 knuckle;
    double length;
  };
  const Finger fingers[] = {
      {"thumb", Vec3(0.02, 0.04, -0.03), 0.035},
      {"index", Vec3(0, 0.03, -0.09), 0.045},
      {"middle", Vec3(0, 0.01, -0.09), 0.05},
      {"ring", Vec3(0, -0.01, -0.09), 0.045},
      {"pinky", Vec3(0, -0.03, -0.09), 0.035},
  };
  for (const auto& f : fingers) {
    const std::string base = f.name;
    b.add_pair(base + "1", "*wrist", f.knuckle);
    const Vec3 seg = base == "thumb" ? Vec3(0, 0.01, -f.length) : Vec3(0, 0, -f.length);
    b.add_pair(base + "2", "*" + base + "1", seg);
  }

  auto& s = b.skel;
  s.foot_joints = {s.joint_index("left_ankle"), s.joint_index("left_toe"), s.joint_index("right_ankle"),
                   s.joint_index("right_toe")};
  s.wrist_joints = {s.joint_index("left_wrist"), s.joint_index("right_wrist")};
  for (const auto& f : fingers) {
    for (const char* seg : {"1", "2"}) {
      s.left_hand_joints.push_back(s.joint_index(std::string("left_") + f.name + seg));
      s.right_hand_joints.push_back(s.joint_index(std::string("right_") + f.name + seg));
    }
  }
  b.finish_mirror();

  b.capsule("pelvis", 0.10, Vec3(-0.09, 0, -0.02), Vec3(0.09, 0, -0.02));
  b.capsule("pelvis", 0.11, Vec3(0, 0, 0), Vec3(0, 0, 0.22));
  b.capsule("chest", 0.10, Vec3(-0.10, 0, 0.02), Vec3(0.10, 0, 0.02));
  b.capsule("head", 0.09, Vec3(0, 0, 0.02), Vec3(0, 0, 0.14));
  b.capsule_pair("hip", 0.065, Vec3::Zero(), Vec3(0, 0, -0.42));
  b.capsule_pair("knee", 0.05, Vec3::Zero(), Vec3(0, 0, -0.44));
  b.capsule_pair("ankle", 0.035, Vec3::Zero(), Vec3(0, 0.14, -0.01));
  b.capsule_pair("toe", 0.025, Vec3::Zero(), Vec3(0, 0.04, 0));
  b.capsule_pair("shoulder", 0.045, Vec3::Zero(), Vec3(-0.10, 0, -0.26));
  b.capsule_pair("elbow", 0.035, Vec3::Zero(), Vec3(-0.06, 0, -0.24));
  b.capsule_pair("wrist", 0.03, Vec3::Zero(), Vec3(0, 0, -0.07));
  for (const auto& f : fingers) {
    const std::string base = f.name;
    const Vec3 seg = base == "thumb" ? Vec3(0, 0.01, -f.length) : Vec3(0, 0, -f.length);
    b.capsule_pair(base + "1", 0.008, Vec3::Zero(), seg);
    b.capsule_pair(base + "2", 0.008, Vec3::Zero(), Vec3(0, 0, -0.025));
    // Flexion curls the fingers toward the palm (+X on the left hand).
    const double hi = base == "thumb" ? 1.0 : 1.5;
    const double lo = base == "thumb" ? -0.1 : -0.15;
    b.limit_pair(base + "1", Vec3(0, -1, 0), lo, hi);
    b.limit_pair(base + "2", Vec3(0, -1, 0), lo, hi);
  }

  s.validate();
  return s;
}

SkeletonSpec make_smplx55_skeleton() {
  Builder b;
  b.skel.name = "smplx55";
  b.skel.frame_rate = 30.0;
  b.skel.standing_height = 0.89;

  // SMPL-X joint order; offsets approximate the neutral template in a Z-up,
  // +Y forward frame with the arms in T-pose.
  b.add("pelvis", "", Vec3::Zero());
  b.add("left_hip", "pelvis", Vec3(-0.06, -0.01, -0.09));
  b.add("right_hip", "pelvis", Vec3(0.06, -0.01, -0.09));
  b.add("spine1", "pelvis", Vec3(0, -0.01, 0.11));
  b.add("left_knee", "left_hip", Vec3(0, 0, -0.38));
  b.add("right_knee", "right_hip", Vec3(0, 0, -0.38));
  b.add("spine2", "spine1", Vec3(0, 0.01, 0.13));
  b.add("left_ankle", "left_knee", Vec3(0, -0.04, -0.36));
  b.add("right_ankle", "right_knee", Vec3(0, -0.04, -0.36));
  b.add("spine3", "spine2", Vec3(0, 0, 0.05));
  b.add("left_foot", "left_ankle", Vec3(0, 0.12, -0.05));
  b.add("right_foot", "right_ankle", Vec3(0, 0.12, -0.05));
  b.add("neck", "spine3", Vec3(0, -0.03, 0.21));
  b.add("left_collar", "spine3", Vec3(-0.08, 0, 0.11));
  b.add("right_collar", "spine3", Vec3(0.08, 0, 0.11));
  b.add("head", "neck", Vec3(0, 0.05, 0.09));
  b.add("left_shoulder", "left_collar", Vec3(-0.12, 0, 0.03));
  b.add("right_shoulder", "right_collar", Vec3(0.12, 0, 0.03));
  b.add("left_elbow", "left_shoulder", Vec3(-0.26, 0, 0));
  b.add("right_elbow", "right_shoulder", Vec3(0.26, 0, 0));
  b.add("left_wrist", "left_elbow", Vec3(-0.25, 0, 0));
  b.add("right_wrist", "right_elbow", Vec3(0.25, 0, 0));
  b.add("jaw", "head", Vec3(0, 0.03, -0.02));
  b.add("left_eye", "head", Vec3(-0.03, 0.09, 0.03));
  b.add("right_eye", "head", Vec3(0.03, 0.09, 0.03));

  struct Finger {
    const char* name;
    Vec3 base;
    Vec3 seg;
  };
  const Finger fingers[] = {
      {"index", Vec3(-0.09, 0.02, 0), Vec3(-0.035, 0, 0)},
      {"middle", Vec3(-0.095, 0, 0), Vec3(-0.037, 0, 0)},
      {"pinky", Vec3(-0.08, -0.04, 0), Vec3(-0.025, 0, 0)},
      {"ring", Vec3(-0.09, -0.02, 0), Vec3(-0.033, 0, 0)},
      {"thumb", Vec3(-0.03, 0.03, -0.01), Vec3(-0.03, 0.015, 0)},
  };
  for (const char* side : {"left_", "right_"}) {
    const bool left = std::string(side) == "left_";
    for (const auto& f : fingers) {
      const Vec3 base = left ? f.base : Vec3(mirror_matrix() * f.base);
      const Vec3 seg = left ? f.seg : Vec3(mirror_matrix() * f.seg);
      const std::string stem = std::string(side) + f.name;
      b.add(stem + "1", std::string(side) + "wrist", base);
      b.add(stem + "2", stem + "1", seg);
      b.add(stem + "3", stem + "2", seg * 0.8);
    }
  }

  auto& s = b.skel;
  s.foot_joints = {s.joint_index("left_ankle"), s.joint_index("left_foot"), s.joint_index("right_ankle"),
                   s.joint_index("right_foot")};
  s.wrist_joints = {s.joint_index("left_wrist"), s.joint_index("right_wrist")};
  for (int i = 25; i < 40; ++i) {
    s.left_hand_joints.push_back(i);
    s.right_hand_joints.push_back(i + 15);
  }
  b.finish_mirror();

  // One capsule per joint along its first child bone (spheres at leaves).
  const int n = static_cast<int>(s.joints.size());
  for (int j = 0; j < n; ++j) {
    Vec3 end = Vec3::Zero();
    for (int c = j + 1; c < n; ++c) {
      if (s.joints[c].parent == j) {
        end = s.joints[c].rest_offset;
        break;
      }
    }
    double r = 0.04;
    if (s.is_hand_joint(j)) {
      r = 0.008;
    } else if (j == 0 || s.joints[j].name.rfind("spine", 0) == 0) {
      r = 0.10;
    }
    s.capsules.push_back({j, r, Vec3::Zero(), end});
  }
  for (const auto& f : fingers) {
    for (const char* seg : {"1", "2", "3"}) {
      b.limit_pair(std::string(f.name) + seg, Vec3(0, -1, 0), -0.1, 1.4);
    }
  }

  s.validate();
  return s;
}

VertexCatalog make_desk_catalog(const SkeletonSpec& skel) {
  std::vector<CatalogEntry> entries;
  auto add = [&](const std::string& label, const std::string& joint, const Vec3& offset) {
    entries.push_back({label, skel.joint_index(joint), offset});
  };
  // Left-side definition; the right side is the reflection.
  auto add_pair = [&](const std::string& label, const std::string& joint, const Vec3& left_offset) {
    add("left_" + label, "left_" + joint, left_offset);
    add("right_" + label, "right_" + joint, mirror_matrix() * left_offset);
  };

  add("head_top", "head", Vec3(0, 0, 0.23));
  add("forehead", "head", Vec3(0, 0.09, 0.12));
  add("nose", "head", Vec3(0, 0.10, 0.07));
  add("mouth", "head", Vec3(0, 0.095, 0.03));
  add("chin", "head", Vec3(0, 0.07, -0.01));
  add("back_of_head", "head", Vec3(0, -0.09, 0.08));
  add("throat", "chest", Vec3(0, 0.06, 0.16));
  add("chest_center", "chest", Vec3(0, 0.11, 0.02));
  add("upper_back", "chest", Vec3(0, -0.11, 0.02));
  add("belly", "pelvis", Vec3(0, 0.12, 0.12));
  add("navel", "pelvis", Vec3(0, 0.115, 0.06));
  add("lower_back", "pelvis", Vec3(0, -0.12, 0.10));
  add("crotch", "pelvis", Vec3(0, 0.03, -0.11));

  entries.push_back({"left_cheek", skel.joint_index("head"), Vec3(-0.06, 0.07, 0.05)});
  entries.push_back({"right_cheek", skel.joint_index("head"), Vec3(0.06, 0.07, 0.05)});
  entries.push_back({"left_ear", skel.joint_index("head"), Vec3(-0.09, 0, 0.07)});
  entries.push_back({"right_ear", skel.joint_index("head"), Vec3(0.09, 0, 0.07)});
  entries.push_back({"left_chest", skel.joint_index("chest"), Vec3(-0.08, 0.10, 0.02)});
  entries.push_back({"right_chest", skel.joint_index("chest"), Vec3(0.08, 0.10, 0.02)});
  entries.push_back({"left_hip_side", skel.joint_index("pelvis"), Vec3(-0.19, 0, -0.02)});
  entries.push_back({"right_hip_side", skel.joint_index("pelvis"), Vec3(0.19, 0, -0.02)});
  entries.push_back({"left_buttock", skel.joint_index("pelvis"), Vec3(-0.08, -0.10, -0.06)});
  entries.push_back({"right_buttock", skel.joint_index("pelvis"), Vec3(0.08, -0.10, -0.06)});

  add_pair("shoulder_top", "shoulder", Vec3(0, 0, 0.045));
  add_pair("armpit", "shoulder", Vec3(0.03, 0, -0.05));
  add_pair("biceps", "shoulder", Vec3(-0.05, 0.045, -0.13));
  add_pair("triceps", "shoulder", Vec3(-0.05, -0.045, -0.13));
  add_pair("elbow_inside", "elbow", Vec3(0, 0.035, 0));
  add_pair("elbow_outside", "elbow", Vec3(0, -0.035, 0));
  add_pair("forearm", "elbow", Vec3(-0.03, 0.035, -0.12));
  add_pair("wrist_inner", "wrist", Vec3(0.02, 0, 0));
  add_pair("palm", "wrist", Vec3(0.03, 0, -0.05));
  add_pair("palm_heel", "wrist", Vec3(0.03, 0, -0.02));
  add_pair("back_of_hand", "wrist", Vec3(-0.03, 0, -0.05));
  add_pair("thumb_tip", "thumb2", Vec3(0, 0.005, -0.03));
  add_pair("index_tip", "index2", Vec3(0, 0, -0.03));
  add_pair("middle_tip", "middle2", Vec3(0, 0, -0.03));
  add_pair("ring_tip", "ring2", Vec3(0, 0, -0.03));
  add_pair("pinky_tip", "pinky2", Vec3(0, 0, -0.03));
  add_pair("index_knuckle", "index1", Vec3(0.008, 0, 0));
  add_pair("thigh_front", "hip", Vec3(0, 0.065, -0.2));
  add_pair("thigh_outer", "hip", Vec3(-0.065, 0, -0.2));
  add_pair("thigh_inner", "hip", Vec3(0.065, 0, -0.2));
  add_pair("knee_front", "knee", Vec3(0, 0.05, 0));
  add_pair("shin", "knee", Vec3(0, 0.05, -0.2));
  add_pair("calf", "knee", Vec3(0, -0.05, -0.18));
  add_pair("heel", "ankle", Vec3(0, -0.03, -0.01));
  add_pair("foot_top", "ankle", Vec3(0, 0.07, 0.02));

  VertexCatalog catalog(std::move(entries));
  catalog.validate(skel);
  return catalog;
}

namespace {

json vec_json(const Vec3& v) {
  return json::array({v.x(), v.y(), v.z()});
}

Vec3 json_vec(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) {
    throw Error(ErrorCode::SchemaError, what + " must be a 3-element array");
  }
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

int json_joint(const SkeletonSpec& s, const json& j) {
  if (j.is_number_integer()) {
    return j.get<int>();
  }
  const int idx = s.find_joint(j.get<std::string>());
  if (idx < 0) {
    throw Error(ErrorCode::SchemaError, "unknown joint '" + j.get<std::string>() + "'");
  }
  return idx;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::IoError, "cannot open " + path.string());
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) {
    throw Error(ErrorCode::IoError, "cannot write " + path.string());
  }
  out << text;
}

} // namespace

std::string skeleton_to_json(const SkeletonSpec& s) {
  json j;
  j["name"] = s.name;
  j["frame_rate"] = s.frame_rate;
  j["standing_height"] = s.standing_height;
  auto& joints = j["joints"] = json::array();
  for (const auto& jt : s.joints) {
    joints.push_back({{"name", jt.name},
                      {"parent", jt.parent < 0 ? json(nullptr) : json(s.joints[jt.parent].name)},
                      {"offset", vec_json(jt.rest_offset)}});
  }
  auto names = [&](auto&& idx) {
    json a = json::array();
    for (int i : idx) {
      a.push_back(s.joints[i].name);
    }
    return a;
  };
  j["foot_joints"] = names(s.foot_joints);
  j["wrist_joints"] = names(s.wrist_joints);
  j["left_hand_joints"] = names(s.left_hand_joints);
  j["right_hand_joints"] = names(s.right_hand_joints);
  auto& pairs = j["mirror_pairs"] = json::array();
  for (std::size_t i = 0; i < s.mirror_map.size(); ++i) {
    if (static_cast<int>(i) < s.mirror_map[i]) {
      pairs.push_back({s.joints[i].name, s.joints[s.mirror_map[i]].name});
    }
  }
  auto& caps = j["capsules"] = json::array();
  for (const auto& c : s.capsules) {
    caps.push_back({{"joint", s.joints[c.joint].name}, {"radius", c.radius}, {"a", vec_json(c.a)}, {"b", vec_json(c.b)}});
  }
  auto& lims = j["limits"] = json::array();
  for (const auto& l : s.limits) {
    lims.push_back({{"joint", s.joints[l.joint].name}, {"axis", vec_json(l.axis)}, {"min", l.min_angle}, {"max", l.max_angle}});
  }
  return j.dump(1);
}

SkeletonSpec skeleton_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaError, std::string("skeleton JSON: ") + e.what());
  }
  SkeletonSpec s;
  try {
    s.name = j.value("name", "");
    s.frame_rate = j.value("frame_rate", 30.0);
    s.standing_height = j.value("standing_height", 0.0);
    for (const auto& jt : j.at("joints")) {
      Joint joint;
      joint.name = jt.at("name").get<std::string>();
      const auto& parent = jt.at("parent");
      joint.parent = parent.is_null() ? -1 : json_joint(s, parent);
      joint.rest_offset = json_vec(jt.at("offset"), "joint offset");
      s.joints.push_back(joint);
    }
    const auto& foot = j.at("foot_joints");
    const auto& wrist = j.at("wrist_joints");
    if (foot.size() != 4 || wrist.size() != 2) {
      throw Error(ErrorCode::InvalidSkeleton, "need exactly 4 foot joints and 2 wrist joints");
    }
    for (int i = 0; i < 4; ++i) {
      s.foot_joints[i] = json_joint(s, foot[i]);
    }
    for (int i = 0; i < 2; ++i) {
      s.wrist_joints[i] = json_joint(s, wrist[i]);
    }
    for (const auto& h : j.value("left_hand_joints", json::array())) {
      s.left_hand_joints.push_back(json_joint(s, h));
    }
    for (const auto& h : j.value("right_hand_joints", json::array())) {
      s.right_hand_joints.push_back(json_joint(s, h));
    }
    s.mirror_map.resize(s.joints.size());
    for (std::size_t i = 0; i < s.joints.size(); ++i) {
      s.mirror_map[i] = static_cast<int>(i);
    }
    for (const auto& p : j.value("mirror_pairs", json::array())) {
      const int a = json_joint(s, p.at(0));
      const int b = json_joint(s, p.at(1));
      s.mirror_map[a] = b;
      s.mirror_map[b] = a;
    }
    for (const auto& c : j.value("capsules", json::array())) {
      s.capsules.push_back({json_joint(s, c.at("joint")), c.at("radius").get<double>(), json_vec(c.at("a"), "capsule a"),
                            json_vec(c.at("b"), "capsule b")});
    }
    for (const auto& l : j.value("limits", json::array())) {
      s.limits.push_back({json_joint(s, l.at("joint")), json_vec(l.at("axis"), "limit axis"), l.at("min").get<double>(),
                          l.at("max").get<double>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaError, std::string("skeleton JSON: ") + e.what());
  }
  s.validate();
  return s;
}

SkeletonSpec load_skeleton(const std::filesystem::path& path) {
  return skeleton_from_json(read_file(path));
}

void save_skeleton(const SkeletonSpec& skel, const std::filesystem::path& path) {
  write_file(path, skeleton_to_json(skel) + "\n");
}

VertexCatalog load_catalog(const std::filesystem::path& path, const SkeletonSpec& skel) {
  std::vector<CatalogEntry> entries;
  try {
    const json j = json::parse(read_file(path));
    for (const auto& v : j.at("vertices")) {
      entries.push_back({v.at("label").get<std::string>(), json_joint(skel, v.at("joint")), json_vec(v.at("offset"), "vertex offset")});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaError, std::string("catalog JSON: ") + e.what());
  }
  VertexCatalog catalog(std::move(entries));
  catalog.validate(skel);
  return catalog;
}

void save_catalog(const VertexCatalog& catalog, const SkeletonSpec& skel, const std::filesystem::path& path) {
  json j;
  auto& vs = j["vertices"] = json::array();
  for (const auto& e : catalog.entries()) {
    vs.push_back({{"label", e.label}, {"joint", skel.joints[e.joint].name}, {"offset", vec_json(e.offset)}});
  }
  write_file(path, j.dump(1) + "\n");
}

} // namespace fusion
