#include "fusion/eval.h"

#include "fusion/parallel.h"
#include "fusion/tasks.h"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace fusion {

double traj_error(const ErrorTable& errors, double threshold_m) {
  if (errors.empty()) {
    return 0.0;
  }
  std::size_t failed = 0;
  for (const auto& traj : errors) {
    if (std::any_of(traj.begin(), traj.end(), [&](double e) { return e > threshold_m; })) {
      ++failed;
    }
  }
  return 100.0 * static_cast<double>(failed) / static_cast<double>(errors.size());
}

double loc_error(const ErrorTable& errors, double threshold_m) {
  std::size_t total = 0;
  std::size_t over = 0;
  for (const auto& traj : errors) {
    total += traj.size();
    over += static_cast<std::size_t>(std::count_if(traj.begin(), traj.end(), [&](double e) { return e > threshold_m; }));
  }
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(over) / static_cast<double>(total);
}

double avg_error_cm(const ErrorTable& errors) {
  std::size_t total = 0;
  double sum = 0.0;
  for (const auto& traj : errors) {
    total += traj.size();
    for (double e : traj) {
      sum += e;
    }
  }
  return total == 0 ? 0.0 : 100.0 * sum / static_cast<double>(total);
}

double skating_ratio(const SkeletonSpec& skel, const std::vector<std::vector<Vec3>>& positions) {
  const std::size_t n = positions.size();
  if (n < 2) {
    return 0.0;
  }
  std::size_t skating = 0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    for (int j : skel.foot_joints) {
      const Vec3& p = positions[i][j];
      const Vec3& q = positions[i + 1][j];
      if (p.z() < kSkateHeight && (q - p).head<2>().norm() > kSkateStep) {
        ++skating;
        break;
      }
    }
  }
  return 100.0 * static_cast<double>(skating) / static_cast<double>(n - 1);
}

double skating_ratio(const SkeletonSpec& skel, const WorldMotion& motion) {
  std::vector<std::vector<Vec3>> positions;
  positions.reserve(motion.frames.size());
  for (const auto& f : motion.frames) {
    positions.push_back(f.positions);
  }
  return skating_ratio(skel, positions);
}

ErrorTable keyframe_errors(const ResolvedTask& task, const WorldMotion& motion) {
  ErrorTable out;
  std::map<std::string, std::size_t> slot;
  for (const auto& t : task.targets) {
    auto [it, inserted] = slot.try_emplace(t.ref.name, out.size());
    if (inserted) {
      out.emplace_back();
    }
    out[it->second].push_back((reference_position(motion.frames[t.frame], t.ref) - t.target).norm());
  }
  return out;
}

TrackingReport make_report(const ErrorTable& errors, double skating) {
  TrackingReport r;
  for (std::size_t k = 0; k < kReportThresholds.size(); ++k) {
    r.traj[k] = traj_error(errors, kReportThresholds[k]);
    r.loc[k] = loc_error(errors, kReportThresholds[k]);
  }
  r.avg_cm = avg_error_cm(errors);
  r.skating = skating;
  r.trajectories = errors.size();
  for (const auto& t : errors) {
    r.keyframes += t.size();
  }
  return r;
}

EvalResult evaluate(const Denoiser& model, const NoiseSchedule& schedule, const SkeletonSpec& skel,
                    const VertexCatalog& catalog, const std::vector<NamedTask>& tasks,
                    const std::vector<std::uint64_t>& seeds, const std::vector<OptStage>& stages,
                    const DnoOptions& options, int threads) {
  EvalResult result;
  const std::size_t runs = tasks.size() * seeds.size();
  result.runs.resize(runs);
  std::vector<ErrorTable> tables(runs);
  std::vector<double> skating(runs);
  DnoOptions quiet = options;
  quiet.on_iteration = nullptr;
  parallel_for(static_cast<int>(runs), threads, [&](int ri) {
    const auto r = static_cast<std::size_t>(ri);
    const NamedTask& nt = tasks[r / seeds.size()];
    const std::uint64_t seed = seeds[r % seeds.size()];
    const DnoResult res = optimize_noise(model, schedule, skel, catalog, nt.task, stages, seed, quiet);
    const ResolvedTask resolved = resolve_task(skel, catalog, nt.task);
    const WorldMotion m = decode_world(skel, res.x0, resolved.init_position, resolved.init_heading);
    tables[r] = keyframe_errors(resolved, m);
    skating[r] = skating_ratio(skel, m);
    result.runs[r] = {nt.name, seed, make_report(tables[r], skating[r]), res.final_losses};
  });
  ErrorTable pooled;
  double skate_sum = 0.0;
  for (std::size_t r = 0; r < runs; ++r) {
    pooled.insert(pooled.end(), tables[r].begin(), tables[r].end());
    skate_sum += skating[r];
  }
  result.overall = make_report(pooled, runs ? skate_sum / runs : 0.0);
  return result;
}

std::vector<NamedTask> load_task_suite(const std::filesystem::path& dir, const SkeletonSpec& skel,
                                       const VertexCatalog& catalog) {
  if (!std::filesystem::is_directory(dir)) {
    throw Error(ErrorCode::IoError, dir.string() + " is not a directory");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<NamedTask> out;
  for (const auto& f : files) {
    out.push_back({f.stem().string(), load_task(f, skel, catalog)});
  }
  return out;
}

namespace {

void write_row(std::ostream& out, const std::string& task, const std::string& seed, const TrackingReport& r) {
  out << task << ',' << seed;
  for (double v : r.traj) {
    out << ',' << v;
  }
  for (double v : r.loc) {
    out << ',' << v;
  }
  out << ',' << r.avg_cm << ',' << r.skating << ',' << r.keyframes << ',' << r.trajectories << '\n';
}

} // namespace

std::string report_csv(const EvalResult& result) {
  std::ostringstream out;
  out << std::setprecision(9);
  out << "task,seed,traj_50,traj_10,traj_5,loc_50,loc_10,loc_5,avg_cm,skating,keyframes,trajectories\n";
  for (const auto& run : result.runs) {
    write_row(out, run.task, std::to_string(run.seed), run.report);
  }
  write_row(out, "all", "", result.overall);
  return out.str();
}

void write_report_csv(const EvalResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw Error(ErrorCode::IoError, "cannot write " + path.string());
  }
  out << report_csv(result);
}

} // namespace fusion
