#pragma once

#include "fusion/dno.h"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace fusion {

/// Keyframe location errors in meters, one inner vector per trajectory.
using ErrorTable = std::vector<std::vector<double>>;

/// Percent of trajectories with any keyframe error above the threshold.
double traj_error(const ErrorTable& errors, double threshold_m);
/// Percent of keyframes with error above the threshold.
double loc_error(const ErrorTable& errors, double threshold_m);
/// Mean keyframe error in centimeters.
double avg_error_cm(const ErrorTable& errors);

constexpr double kSkateHeight = 0.05;
constexpr double kSkateStep = 0.025;

/// Percent of frame transitions where some foot joint below 5 cm moves more
/// than 2.5 cm horizontally to the next frame.
double skating_ratio(const SkeletonSpec& skel, const std::vector<std::vector<Vec3>>& positions);
double skating_ratio(const SkeletonSpec& skel, const WorldMotion& motion);

/// Distances between each observation's reference and its target, grouped
/// into one trajectory per reference in first-appearance order.
ErrorTable keyframe_errors(const ResolvedTask& task, const WorldMotion& motion);

constexpr std::array<double, 3> kReportThresholds = {0.50, 0.10, 0.05};

struct TrackingReport {
  std::array<double, 3> traj{};
  std::array<double, 3> loc{};
  double avg_cm = 0.0;
  double skating = 0.0;
  std::size_t keyframes = 0;
  std::size_t trajectories = 0;
};

TrackingReport make_report(const ErrorTable& errors, double skating);

struct EvalRun {
  std::string task;
  std::uint64_t seed = 0;
  TrackingReport report;
  DnoLosses losses;
};

struct EvalResult {
  std::vector<EvalRun> runs;
  TrackingReport overall; // pooled over every run's trajectories
};

struct NamedTask {
  std::string name;
  DnoTask task;
};

/// Optimizes every (task, seed) pair and scores the decoded motions. Runs are
/// independent and may execute on `threads` workers; results keep task-major,
/// seed-minor order.
EvalResult evaluate(const Denoiser& model, const NoiseSchedule& schedule, const SkeletonSpec& skel,
                    const VertexCatalog& catalog, const std::vector<NamedTask>& tasks,
                    const std::vector<std::uint64_t>& seeds, const std::vector<OptStage>& stages,
                    const DnoOptions& options = {}, int threads = 1);

/// Every *.json task in a directory, sorted by file name.
std::vector<NamedTask> load_task_suite(const std::filesystem::path& dir, const SkeletonSpec& skel,
                                       const VertexCatalog& catalog);

/// Columns: task,seed,traj_50,traj_10,traj_5,loc_50,loc_10,loc_5,avg_cm,skating,keyframes,trajectories
/// with a final "all" row.
void write_report_csv(const EvalResult& result, const std::filesystem::path& path);
std::string report_csv(const EvalResult& result);

} // namespace fusion
