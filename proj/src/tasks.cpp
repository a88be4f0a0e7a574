#include "fusion/tasks.h"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace fusion {

using nlohmann::json;

namespace {

Vec3 parse_vec3(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) {
    throw Error(ErrorCode::SchemaError, what + " must be a 3-element array");
  }
  Vec3 v;
  for (int a = 0; a < 3; ++a) {
    if (!j[a].is_number()) {
      throw Error(ErrorCode::SchemaError, what + " must contain numbers");
    }
    v[a] = j[a].get<double>();
  }
  if (!v.allFinite()) {
    throw Error(ErrorCode::SchemaError, what + " must be finite");
  }
  return v;
}

json vec_json(const Vec3& v) {
  return json::array({v.x(), v.y(), v.z()});
}

int parse_frames(const json& j) {
  const int n = j.value("frames", 60);
  if (n < 2) {
    throw Error(ErrorCode::SchemaError, "\"frames\" must be at least 2");
  }
  return n;
}

void check_frame(int f, int frames) {
  if (f < 0 || f >= frames) {
    throw Error(ErrorCode::FrameOutOfRange,
                "frame " + std::to_string(f) + " outside [0, " + std::to_string(frames) + ")");
  }
}

Placement parse_placement(const json& j) {
  Placement p;
  if (!j.contains("init")) {
    return p;
  }
  const json& init = j.at("init");
  if (!init.is_object()) {
    throw Error(ErrorCode::SchemaError, "\"init\" must be an object");
  }
  for (const auto& [key, v] : init.items()) {
    if (key == "position") {
      p.position = parse_vec3(v, "init.position");
    } else if (key == "yaw") {
      p.yaw = v.get<double>();
    } else {
      throw Error(ErrorCode::SchemaError, "unknown init key '" + key + "'");
    }
  }
  return p;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& what) {
  if (!j.is_object()) {
    throw Error(ErrorCode::SchemaError, what + " must be a JSON object");
  }
  for (const auto& [key, v] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw Error(ErrorCode::SchemaError, "unknown " + what + " key '" + key + "'");
    }
  }
}

void check_reference(const SkeletonSpec& skel, const VertexCatalog& catalog, const std::string& ref) {
  if (skel.find_joint(ref) < 0 && !catalog.find(ref)) {
    throw Error(ErrorCode::UnknownReference,
                "'" + ref + "' is neither a joint nor a catalog label (closest label: " +
                    nearest_label(catalog, ref) + ")");
  }
}

Mat3 parse_rotation(const json& e) {
  if (e.contains("rotation")) {
    const json& r = e.at("rotation");
    if (!r.is_array() || r.size() != 3) {
      throw Error(ErrorCode::SchemaError, "rotation must be a 3x3 nested array");
    }
    Mat3 R;
    for (int i = 0; i < 3; ++i) {
      R.row(i) = parse_vec3(r[i], "rotation row").transpose();
    }
    if (!(R.transpose() * R).isIdentity(1e-6) || R.determinant() < 0) {
      throw Error(ErrorCode::SchemaError, "rotation is not orthonormal");
    }
    return R;
  }
  if (e.contains("axis_angle")) {
    const Vec3 aa = parse_vec3(e.at("axis_angle"), "axis_angle");
    const double angle = aa.norm();
    return angle < 1e-15 ? Mat3::Identity() : axis_angle(aa / angle, angle);
  }
  return Mat3::Identity();
}

template <typename F>
auto with_schema_errors(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaError, std::string(what) + ": " + e.what());
  }
}

json parse_object(const std::string& text, const std::string& type) {
  json j = json::parse(text);
  if (!j.is_object()) {
    throw Error(ErrorCode::SchemaError, "task must be a JSON object");
  }
  const std::string t = j.value("type", type);
  if (t != type) {
    throw Error(ErrorCode::SchemaError, "expected a \"" + type + "\" task, got \"" + t + "\"");
  }
  return j;
}

} // namespace

TrackingTask parse_tracking_task(const std::string& text, const SkeletonSpec& skel, const VertexCatalog& catalog) {
  return with_schema_errors("tracking task", [&] {
    const json j = parse_object(text, "tracking");
    check_keys(j, {"type", "frames", "init", "observations", "tracks"}, "tracking task");
    TrackingTask t;
    t.frames = parse_frames(j);
    t.init = parse_placement(j);
    for (const auto& o : j.value("observations", json::array())) {
      check_keys(o, {"ref", "frame", "target"}, "observation");
      Observation ob{o.at("ref").get<std::string>(), o.at("frame").get<int>(), parse_vec3(o.at("target"), "target")};
      check_reference(skel, catalog, ob.reference);
      check_frame(ob.frame, t.frames);
      t.entries.push_back(ob);
    }
    for (const auto& tr : j.value("tracks", json::array())) {
      check_keys(tr, {"ref", "frames", "targets"}, "track");
      const std::string ref = tr.at("ref").get<std::string>();
      check_reference(skel, catalog, ref);
      const auto& frames = tr.at("frames");
      const auto& targets = tr.at("targets");
      if (!frames.is_array() || !targets.is_array() || frames.size() != targets.size()) {
        throw Error(ErrorCode::SchemaError, "track '" + ref + "' needs equally long frames and targets");
      }
      for (std::size_t k = 0; k < frames.size(); ++k) {
        const int f = frames[k].get<int>();
        check_frame(f, t.frames);
        t.entries.push_back({ref, f, parse_vec3(targets[k], "target")});
      }
    }
    if (t.entries.empty()) {
      throw Error(ErrorCode::SchemaError, "tracking task has no observations");
    }
    return t;
  });
}

std::string tracking_task_to_json(const TrackingTask& task) {
  json obs = json::array();
  for (const auto& o : task.entries) {
    obs.push_back({{"ref", o.reference}, {"frame", o.frame}, {"target", vec_json(o.target)}});
  }
  json j = {{"type", "tracking"}, {"frames", task.frames}, {"observations", obs}};
  if (task.init.position || task.init.yaw != 0.0) {
    json init = {{"yaw", task.init.yaw}};
    if (task.init.position) {
      init["position"] = vec_json(*task.init.position);
    }
    j["init"] = init;
  }
  return j.dump(2);
}

GraspTask parse_grasp_task(const std::string& text, const SkeletonSpec& skel, const VertexCatalog& catalog) {
  return with_schema_errors("grasp task", [&] {
    const json j = parse_object(text, "grasp");
    check_keys(j, {"type", "frames", "init", "active", "trajectory", "grasp"}, "grasp task");
    GraspTask g;
    g.frames = parse_frames(j);
    g.init = parse_placement(j);
    const auto& traj = j.at("trajectory");
    if (!traj.is_array() || static_cast<int>(traj.size()) != g.frames) {
      throw Error(ErrorCode::SchemaError, "trajectory must hold one transform per frame");
    }
    for (const auto& e : traj) {
      check_keys(e, {"translation", "rotation", "axis_angle"}, "trajectory entry");
      RigidTransform T;
      T.rotation = parse_rotation(e);
      T.translation = e.contains("translation") ? parse_vec3(e.at("translation"), "translation") : Vec3::Zero();
      g.trajectory.push_back(T);
    }
    const auto& grasp = j.at("grasp");
    if (!grasp.is_object() || grasp.empty()) {
      throw Error(ErrorCode::SchemaError, "grasp must map at least one hand point to a position");
    }
    for (const auto& [ref, pos] : grasp.items()) {
      check_reference(skel, catalog, ref);
      g.grasp.emplace_back(ref, parse_vec3(pos, "grasp position"));
    }
    const auto& active = j.at("active");
    if (!active.is_array() || active.size() != 2) {
      throw Error(ErrorCode::SchemaError, "active must be [begin, end)");
    }
    g.active_begin = active[0].get<int>();
    g.active_end = active[1].get<int>();
    if (g.active_begin < 0 || g.active_end > g.frames) {
      throw Error(ErrorCode::FrameOutOfRange, "active range outside the clip");
    }
    return g;
  });
}

ObservationSet compose_grasp_targets(const GraspTask& task) {
  if (task.active_begin >= task.active_end) {
    throw Error(ErrorCode::EmptyActiveRange, "grasp active range is empty");
  }
  if (static_cast<int>(task.trajectory.size()) < task.active_end) {
    throw Error(ErrorCode::LengthMismatch, "object trajectory is shorter than the active range");
  }
  ObservationSet out;
  for (int k = task.active_begin; k < task.active_end; ++k) {
    const RigidTransform& T = task.trajectory[k];
    for (const auto& [ref, local] : task.grasp) {
      out.entries.push_back({ref, k, T.rotation * local + T.translation});
    }
  }
  return out;
}

ContactPlan dedupe_plan(const ContactPlan& plan) {
  ContactPlan out;
  std::set<std::tuple<std::string, std::string, int>> seen;
  for (const auto& t : plan.triples) {
    if (seen.insert({t.a, t.b, t.frame}).second) {
      out.triples.push_back(t);
    }
  }
  return out;
}

ContactPlan parse_contact_plan(const std::string& text, const VertexCatalog& catalog, int frames) {
  return with_schema_errors("contact plan", [&] {
    const json j = parse_object(text, "plan");
    check_keys(j, {"type", "frames", "init", "contacts", "instruction"}, "contact plan");
    const auto& contacts = j.at("contacts");
    if (!contacts.is_array() || contacts.empty()) {
      throw Error(ErrorCode::SchemaError, "plan needs a non-empty \"contacts\" array");
    }
    ContactPlan plan;
    for (const auto& c : contacts) {
      check_keys(c, {"a", "b", "frame"}, "contact");
      ContactTriple t{c.at("a").get<std::string>(), c.at("b").get<std::string>(), c.at("frame").get<int>()};
      for (const auto* label : {&t.a, &t.b}) {
        if (!catalog.find(*label)) {
          throw Error(ErrorCode::UnknownLabel,
                      "unknown label '" + *label + "' (closest: " + nearest_label(catalog, *label) + ")");
        }
      }
      if (t.a == t.b) {
        throw Error(ErrorCode::SchemaError, "contact pairs '" + t.a + "' with itself");
      }
      check_frame(t.frame, frames);
      plan.triples.push_back(t);
    }
    return dedupe_plan(plan);
  });
}

std::string contact_plan_to_json(const ContactPlan& plan, int frames) {
  json arr = json::array();
  for (const auto& t : plan.triples) {
    arr.push_back({{"a", t.a}, {"b", t.b}, {"frame", t.frame}});
  }
  return json{{"type", "plan"}, {"frames", frames}, {"contacts", arr}}.dump(2);
}

std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1);
  std::vector<std::size_t> cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) {
    prev[j] = j;
  }
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string nearest_label(const VertexCatalog& catalog, std::string_view label) {
  std::string best;
  std::size_t best_d = std::numeric_limits<std::size_t>::max();
  for (const auto& e : catalog.entries()) {
    const std::size_t d = edit_distance(label, e.label);
    if (d < best_d) {
      best_d = d;
      best = e.label;
    }
  }
  return best;
}

std::vector<PlanViolation> validate_plan(const ContactPlan& plan, const VertexCatalog& catalog, int frames) {
  std::vector<PlanViolation> out;
  if (plan.triples.empty()) {
    out.push_back({0, "plan has no contacts"});
  }
  for (std::size_t i = 0; i < plan.triples.size(); ++i) {
    const auto& t = plan.triples[i];
    for (const auto* label : {&t.a, &t.b}) {
      if (!catalog.find(*label)) {
        out.push_back({i, "unknown label '" + *label + "'; did you mean '" + nearest_label(catalog, *label) + "'?"});
      }
    }
    if (t.a == t.b) {
      out.push_back({i, "label '" + t.a + "' paired with itself"});
    }
    if (t.frame < 0 || t.frame >= frames) {
      out.push_back({i, "frame " + std::to_string(t.frame) + " outside [0, " + std::to_string(frames) + ")"});
    }
  }
  return out;
}

namespace {

void apply_placement(const Placement& p, DnoTask& task) {
  task.init_position = p.position;
  task.init_heading = rot_z(p.yaw);
}

} // namespace

DnoTask parse_task(const std::string& text, const SkeletonSpec& skel, const VertexCatalog& catalog) {
  const std::string type = with_schema_errors("task", [&] {
    const json j = json::parse(text);
    if (!j.is_object() || !j.contains("type") || !j.at("type").is_string()) {
      throw Error(ErrorCode::SchemaError, "task needs a string \"type\"");
    }
    return j.at("type").get<std::string>();
  });
  DnoTask task;
  if (type == "tracking") {
    const TrackingTask t = parse_tracking_task(text, skel, catalog);
    task.frames = t.frames;
    task.observations = t.observations();
    apply_placement(t.init, task);
  } else if (type == "grasp") {
    const GraspTask g = parse_grasp_task(text, skel, catalog);
    task.frames = g.frames;
    task.observations = compose_grasp_targets(g);
    apply_placement(g.init, task);
  } else if (type == "plan") {
    const auto [frames, placement] = with_schema_errors("plan", [&] {
      const json j = json::parse(text);
      return std::make_pair(parse_frames(j), parse_placement(j));
    });
    task.frames = frames;
    task.plan = parse_contact_plan(text, catalog, frames);
    apply_placement(placement, task);
  } else {
    throw Error(ErrorCode::SchemaError, "unknown task type '" + type + "'");
  }
  return task;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::IoError, "cannot open " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

DnoTask load_task(const std::filesystem::path& path, const SkeletonSpec& skel, const VertexCatalog& catalog) {
  return parse_task(read_text_file(path), skel, catalog);
}

} // namespace fusion
