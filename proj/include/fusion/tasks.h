#pragma once

#include "fusion/dno.h"

#include <filesystem>
#include <string>
#include <vector>

namespace fusion {

// Task files are JSON objects with a "type" of "tracking", "grasp" or "plan".
// Every type accepts "frames" (default 60) and an optional decode placement
// "init": {"position": [x, y, z], "yaw": radians}.
//
// tracking:
//   {"type": "tracking", "frames": 60,
//    "observations": [{"ref": "pelvis", "frame": 0, "target": [x, y, z]}, ...],
//    "tracks": [{"ref": "head", "frames": [0, 4, ...], "targets": [[x, y, z], ...]}]}
//   Both lists are optional; each track expands to one observation per frame.
// grasp:
//   {"type": "grasp", "frames": 60, "active": [begin, end),
//    "trajectory": [{"translation": [x, y, z], "rotation": [[r00, r01, r02], ...]}
//                   or {"translation": ..., "axis_angle": [ax, ay, az]}, ... N entries],
//    "grasp": {"right_index_tip": [x, y, z], ...}}
// plan:
//   {"type": "plan", "frames": 60,
//    "contacts": [{"a": "left_palm", "b": "right_palm", "frame": 30}, ...]}

struct Placement {
  std::optional<Vec3> position;
  double yaw = 0.0;
};

struct TrackingTask {
  int frames = 60;
  Placement init;
  std::vector<Observation> entries;

  ObservationSet observations() const {
    return ObservationSet{entries};
  }
};

/// Throws SchemaError, UnknownReference, FrameOutOfRange.
TrackingTask parse_tracking_task(const std::string& text, const SkeletonSpec& skel, const VertexCatalog& catalog);
std::string tracking_task_to_json(const TrackingTask& task);

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
};

struct GraspTask {
  int frames = 60;
  Placement init;
  std::vector<RigidTransform> trajectory; // one per frame
  std::vector<std::pair<std::string, Vec3>> grasp; // reference -> object-local position
  int active_begin = 0;
  int active_end = 0; // exclusive
};

GraspTask parse_grasp_task(const std::string& text, const SkeletonSpec& skel, const VertexCatalog& catalog);

/// c_j^k = R_k g_j + t_k for every active frame k and grasped point j.
/// Throws EmptyActiveRange, LengthMismatch.
ObservationSet compose_grasp_targets(const GraspTask& task);

/// Drops repeated triples, keeping first occurrences.
ContactPlan dedupe_plan(const ContactPlan& plan);

/// Labels must be catalog labels. Throws SchemaError, UnknownLabel,
/// FrameOutOfRange.
ContactPlan parse_contact_plan(const std::string& text, const VertexCatalog& catalog, int frames);
std::string contact_plan_to_json(const ContactPlan& plan, int frames);

struct PlanViolation {
  std::size_t triple = 0;
  std::string message;
};

/// Empty when the plan is usable. Unknown labels name the closest catalog
/// label by edit distance.
std::vector<PlanViolation> validate_plan(const ContactPlan& plan, const VertexCatalog& catalog, int frames);

/// Levenshtein distance.
std::size_t edit_distance(std::string_view a, std::string_view b);
std::string nearest_label(const VertexCatalog& catalog, std::string_view label);

/// Any task file as an optimization target.
DnoTask parse_task(const std::string& text, const SkeletonSpec& skel, const VertexCatalog& catalog);
DnoTask load_task(const std::filesystem::path& path, const SkeletonSpec& skel, const VertexCatalog& catalog);

std::string read_text_file(const std::filesystem::path& path);

} // namespace fusion
