// Command-line entry point. Exit codes: 0 success, 2 malformed input, 3 runtime failure.

#include "fusion/checkpoint.h"
#include "fusion/datafuse.h"
#include "fusion/dno.h"
#include "fusion/eval.h"
#include "fusion/llm.h"
#include "fusion/tasks.h"
#include "fusion/training.h"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>

using namespace fusion;
using nlohmann::json;

namespace {

constexpr int kExitSchema = 2;
constexpr int kExitRuntime = 3;

struct Common {
  std::string skeleton;
  std::string catalog;
  std::string data_dir = FUSION_DATA_DIR;
};

SkeletonSpec load_skel(const Common& c) {
  return c.skeleton.empty() ? make_desk_skeleton() : load_skeleton(c.skeleton);
}

SkeletonSpec skel_for(const Common& c, const Checkpoint& ckpt) {
  if (c.skeleton.empty() && ckpt.skeleton) {
    return *ckpt.skeleton;
  }
  return load_skel(c);
}

VertexCatalog load_cat(const Common& c, const SkeletonSpec& skel) {
  return c.catalog.empty() ? make_desk_catalog(skel) : load_catalog(c.catalog, skel);
}

std::vector<OptStage> load_stages(const std::string& path) {
  return path.empty() ? default_stages() : stages_from_json(read_text_file(path));
}

void print_losses(const DnoLosses& l) {
  std::cout << "lk " << l.lk << "  foot " << l.foot << "  ch " << l.ch << "  close " << l.close << "  contact "
            << l.contact << "  decorr " << l.decorr << "  total " << l.total << "\n";
}

// ---- gen-data

struct GenArgs {
  std::string out;
  std::string config;
  int body_clips = -1;
  int hand_clips = -1;
  int frames = -1;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = -1;
  bool skip_merge = false;
};

int run_gen(const Common& common, const GenArgs& a) {
  DatasetConfig cfg = a.config.empty() ? DatasetConfig{} : dataset_config_from_json(read_text_file(a.config));
  if (a.body_clips >= 0) cfg.body_clips = a.body_clips;
  if (a.hand_clips >= 0) cfg.hand_clips = a.hand_clips;
  if (a.frames >= 0) cfg.frames = a.frames;
  if (a.seed_set) cfg.seed = a.seed;
  if (a.threads >= 0) cfg.threads = a.threads;
  if (a.skip_merge) cfg.skip_merge = true;
  const SkeletonSpec skel = load_skel(common);
  const DatasetManifest m = build_dataset(skel, cfg, a.out);
  std::cout << "wrote " << m.clips.size() << " clips to " << a.out << " (bodies " << m.body_original << "+"
            << m.body_flipped << " flipped, hands " << m.hand_generated << "+" << m.hand_flipped << " flipped+"
            << m.hand_reversed << " reversed, " << m.rejections << " rejected pairings, " << m.dropped
            << " dropped)\n";
  return 0;
}

// ---- train

struct TrainArgs {
  std::string data;
  std::string out;
  std::string config;
  std::string resume;
  std::string loss_csv;
  int steps = -1;
  int batch = -1;
  double lr = -1;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int checkpoint_every = -1;
  int log_every = 100;
};

int run_train(const Common& common, const TrainArgs& a) {
  TrainConfig tc;
  DenoiserConfig mc;
  ScheduleKind kind = ScheduleKind::Linear;
  int T = 300;
  if (!a.config.empty()) {
    const std::string text = read_text_file(a.config);
    tc = TrainConfig::from_json(text);
    try {
      const json j = json::parse(text);
      if (j.contains("model")) mc = DenoiserConfig::from_json(j.at("model").dump());
      if (j.contains("schedule")) kind = parse_schedule_kind(j.at("schedule").get<std::string>());
      if (j.contains("T")) T = j.at("T").get<int>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::SchemaError, std::string("training config: ") + e.what());
    }
  }
  if (a.steps >= 0) tc.steps = a.steps;
  if (a.batch > 0) tc.batch = a.batch;
  if (a.lr >= 0) tc.lr = a.lr;
  if (a.seed_set) tc.seed = a.seed;
  if (a.checkpoint_every >= 0) tc.checkpoint_every = a.checkpoint_every;
  tc.checkpoint_path = a.out;

  const SkeletonSpec skel = load_skel(common);
  const std::vector<MotionFeatures> data = load_dataset(a.data);
  if (data.empty()) {
    throw Error(ErrorCode::SizeMismatch, "dataset " + a.data + " is empty");
  }
  mc.input_dim = data.front().dim();
  mc.max_len = std::max(mc.max_len, data.front().frames());
  mc.diffusion_steps = T;

  TrainState state;
  NoiseSchedule sched = make_schedule(T, kind);
  if (!a.resume.empty()) {
    const Checkpoint ck = load_checkpoint(a.resume);
    state = state_from_checkpoint(ck);
    sched = ck.schedule();
    std::cout << "resuming from step " << state.step << "\n";
  } else {
    state = make_train_state(mc, tc, tc.seed);
  }
  std::cout << "training " << state.model.param_count() << " parameters on " << data.size() << " clips\n";
  const auto start = std::chrono::steady_clock::now();
  LossTerms window;
  int count = 0;
  train(state, tc, data, sched, skel, tc.steps, [&](const TrainRecord& r) {
    window.recon += r.terms.recon;
    window.geo += r.terms.geo;
    window.foot += r.terms.foot;
    ++count;
    if (a.log_every > 0 && r.step % a.log_every == 0) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::cout << "step " << r.step << "  recon " << window.recon / count << "  geo " << window.geo / count
                << "  foot " << window.foot / count << "  grad_norm " << r.grad_norm << "  " << std::fixed
                << std::setprecision(1) << secs << "s" << std::defaultfloat << std::setprecision(6) << std::endl;
      window = {};
      count = 0;
    }
  });
  save_checkpoint(checkpoint_from_state(state, sched, skel, tc.seed), a.out);
  if (!a.loss_csv.empty()) {
    write_loss_csv(state.history, a.loss_csv);
  }
  std::cout << "saved " << a.out << " at step " << state.step << "\n";
  return 0;
}

// ---- sample

struct SampleArgs {
  std::string checkpoint;
  std::string out;
  int frames = 60;
  std::uint64_t seed = 0;
  int ddim = 10;
  bool ancestral = false;
};

int run_sample(const Common& common, const SampleArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const SkeletonSpec skel = skel_for(common, ck);
  const Denoiser model = ck.model();
  const NoiseSchedule sched = ck.schedule();
  Rng rng = make_rng(a.seed, 0);
  RowMatrix<float> x;
  if (a.ancestral) {
    x = ancestral_sample(model, sched, a.frames, rng);
  } else {
    RowMatrix<float> xT(a.frames, model.config().input_dim);
    fill_normal(xT, rng);
    x = ode_sample(model, sched, xT, ddim_steps(sched.T, a.ddim));
  }
  MotionFeatures m{x.cast<double>(), skel.hash(), skel.frame_rate};
  save_motion(m, a.out);
  std::cout << "wrote " << a.frames << " frames to " << a.out << "\n";
  return 0;
}

// ---- optimize

struct OptimizeArgs {
  std::string checkpoint;
  std::string task;
  std::string stages;
  std::string out;
  std::string trace;
  std::uint64_t seed = 0;
  int ddim = 10;
  int log_every = 100;
};

int run_optimize(const Common& common, const OptimizeArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const SkeletonSpec skel = skel_for(common, ck);
  const VertexCatalog catalog = load_cat(common, skel);
  const DnoTask task = load_task(a.task, skel, catalog);
  const std::vector<OptStage> stages = load_stages(a.stages);
  const Denoiser model = ck.model();
  DnoOptions opts;
  opts.ddim_count = a.ddim;
  opts.on_iteration = [&](const DnoIteration& it) {
    if (a.log_every > 0 && it.iteration % a.log_every == 0) {
      std::cout << "iter " << it.iteration << " stage " << it.stage << "  ";
      print_losses(it.losses);
    }
  };
  DnoResult res;
  try {
    res = optimize_noise(model, ck.schedule(), skel, catalog, task, stages, a.seed, opts);
  } catch (const DnoAborted& e) {
    if (!a.trace.empty()) {
      write_trace_csv(e.trace(), a.trace);
    }
    throw;
  }
  std::cout << "final  ";
  print_losses(res.final_losses);
  const ResolvedTask resolved = resolve_task(skel, catalog, task);
  if (!resolved.targets.empty()) {
    const WorldMotion m = decode_world(skel, res.x0, resolved.init_position, resolved.init_heading);
    std::cout << "average keyframe error " << avg_error_cm(keyframe_errors(resolved, m)) << " cm\n";
  }
  save_motion({res.x0, skel.hash(), skel.frame_rate}, a.out);
  if (!a.trace.empty()) {
    write_trace_csv(res.trace, a.trace);
  }
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

// ---- eval

struct EvalArgs {
  std::string checkpoint;
  std::string suite;
  std::string stages;
  std::string out;
  std::vector<std::uint64_t> seeds{0};
  int threads = 1;
  int ddim = 10;
};

int run_eval(const Common& common, const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const SkeletonSpec skel = skel_for(common, ck);
  const VertexCatalog catalog = load_cat(common, skel);
  const std::vector<NamedTask> tasks = load_task_suite(a.suite, skel, catalog);
  DnoOptions opts;
  opts.ddim_count = a.ddim;
  const EvalResult r =
      evaluate(ck.model(), ck.schedule(), skel, catalog, tasks, a.seeds, load_stages(a.stages), opts, a.threads);
  const std::string csv = report_csv(r);
  if (!a.out.empty()) {
    write_report_csv(r, a.out);
  }
  std::cout << csv;
  return 0;
}

// ---- plan

struct PlanArgs {
  std::string instruction;
  std::string fixture;
  std::string out;
  int frames = 60;
  int retries = 3;
};

int run_plan(const Common& common, const PlanArgs& a) {
  const SkeletonSpec skel = load_skel(common);
  const VertexCatalog catalog = load_cat(common, skel);
  std::unique_ptr<ChatTransport> transport;
  if (!a.fixture.empty()) {
    transport = std::make_unique<FixtureTransport>(FixtureTransport::from_file(fixture_path(common.data_dir, a.fixture)));
  } else {
    transport = std::make_unique<HttpChatTransport>(EndpointConfig::from_env());
  }
  try {
    const PlanOutcome o = llm_plan(a.instruction, catalog, a.frames, *transport, a.retries);
    const std::string text = contact_plan_to_json(o.plan, a.frames);
    if (!a.out.empty()) {
      std::ofstream(a.out) << text << "\n";
    }
    std::cout << text << "\n";
    std::cerr << "plan accepted after " << o.attempts << " attempt(s)\n";
  } catch (const PlanError& e) {
    for (std::size_t i = 0; i < e.replies().size(); ++i) {
      std::cerr << "--- reply " << i + 1 << " ---\n" << e.replies()[i] << "\n";
    }
    throw;
  }
  return 0;
}

// ---- grad-check

struct GradArgs {
  std::uint64_t seed = 0;
  int coords = 20;
  double step = 1e-4;
  double tolerance = 1e-3;
};

int run_grad(const Common& common, const GradArgs& a) {
  const SkeletonSpec skel = load_skel(common);
  const VertexCatalog catalog = load_cat(common, skel);
  const GradCheckResult r = dno_gradient_check(skel, catalog, a.seed, a.coords, a.step);
  std::cout << "max relative error " << r.max_relative_error << " over " << r.coordinates << " coordinates ("
            << r.seconds << " s)\n";
  return r.max_relative_error < a.tolerance ? 0 : kExitRuntime;
}

// ---- export

struct ExportArgs {
  std::string motion;
  std::string csv;
  std::string obj;
  std::string skeleton_out;
  std::string catalog_out;
  std::vector<double> init;
  double yaw = 0.0;
};

int run_export(const Common& common, const ExportArgs& a) {
  const SkeletonSpec skel = load_skel(common);
  if (!a.skeleton_out.empty()) {
    save_skeleton(skel, a.skeleton_out);
  }
  if (!a.catalog_out.empty()) {
    save_catalog(load_cat(common, skel), skel, a.catalog_out);
  }
  if (a.motion.empty()) {
    return 0;
  }
  const MotionFeatures m = load_motion(a.motion);
  if (m.skeleton_id != 0 && m.skeleton_id != skel.hash()) {
    throw Error(ErrorCode::SkeletonMismatch, a.motion + " was encoded for a different skeleton");
  }
  Vec3 origin(0.0, 0.0, skel.standing_height);
  if (!a.init.empty()) {
    if (a.init.size() != 3) {
      throw Error(ErrorCode::SchemaError, "--init takes three numbers");
    }
    origin = Vec3(a.init[0], a.init[1], a.init[2]);
  }
  const WorldMotion w = decode_world(skel, m.data, origin, rot_z(a.yaw));
  if (!a.csv.empty()) {
    std::ofstream out(a.csv);
    if (!out) {
      throw Error(ErrorCode::IoError, "cannot write " + a.csv);
    }
    out << "frame,joint,name,x,y,z\n" << std::setprecision(9);
    for (std::size_t i = 0; i < w.frames.size(); ++i) {
      for (std::size_t j = 0; j < skel.joint_count(); ++j) {
        const Vec3& p = w.frames[i].positions[j];
        out << i << ',' << j << ',' << skel.joints[j].name << ',' << p.x() << ',' << p.y() << ',' << p.z() << '\n';
      }
    }
  }
  if (!a.obj.empty()) {
    std::ofstream out(a.obj);
    if (!out) {
      throw Error(ErrorCode::IoError, "cannot write " + a.obj);
    }
    out << std::setprecision(7);
    std::size_t base = 1;
    for (std::size_t i = 0; i < w.frames.size(); ++i) {
      out << "o frame_" << i << "\n";
      for (const Vec3& p : w.frames[i].positions) {
        out << "v " << p.x() << ' ' << p.y() << ' ' << p.z() << "\n";
      }
      for (std::size_t j = 1; j < skel.joint_count(); ++j) {
        out << "l " << base + skel.joints[j].parent << ' ' << base + j << "\n";
      }
      base += skel.joint_count();
    }
  }
  std::cout << "exported " << w.frames.size() << " frames\n";
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Motion prior training and noise-optimization toolkit"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--skeleton", common.skeleton, "Skeleton JSON (default: built-in desk skeleton)");
  app.add_option("--catalog", common.catalog, "Vertex catalog JSON (default: built-in desk catalog)");
  app.add_option("--data-dir", common.data_dir, "Data directory holding fixtures")->capture_default_str();

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Synthesize, augment, filter and encode a training set");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--config", gen.config, "Dataset config JSON");
  g->add_option("--body-clips", gen.body_clips, "Body clips before mirroring");
  g->add_option("--hand-clips", gen.hand_clips, "Hand clips per side before augmentation");
  g->add_option("--frames", gen.frames, "Frames per clip");
  g->add_option("--seed", gen.seed, "Random seed")->each([&](const std::string&) { gen.seed_set = true; });
  g->add_option("--threads", gen.threads, "Worker threads (0 = all cores)");
  g->add_flag("--skip-merge", gen.skip_merge, "Keep rest hands instead of merging sampled hands");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the denoiser");
  t->add_option("--data", tr.data, "Dataset directory from gen-data")->required();
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--config", tr.config, "Training config JSON");
  t->add_option("--resume", tr.resume, "Checkpoint to resume from");
  t->add_option("--loss-csv", tr.loss_csv, "Per-step loss CSV");
  t->add_option("--steps", tr.steps, "Total optimizer steps");
  t->add_option("--batch", tr.batch, "Clips per batch");
  t->add_option("--lr", tr.lr, "Learning rate");
  t->add_option("--seed", tr.seed, "Seed")->each([&](const std::string&) { tr.seed_set = true; });
  t->add_option("--checkpoint-every", tr.checkpoint_every, "Save every K steps (0 = only at the end)");
  t->add_option("--log-every", tr.log_every, "Print running means every K steps")->capture_default_str();

  SampleArgs sa;
  auto* s = app.add_subcommand("sample", "Draw a motion from a checkpoint");
  s->add_option("--checkpoint", sa.checkpoint, "Checkpoint")->required();
  s->add_option("--out", sa.out, "Output motion file")->required();
  s->add_option("--frames", sa.frames, "Frames")->capture_default_str();
  s->add_option("--seed", sa.seed, "Seed")->capture_default_str();
  s->add_option("--ddim", sa.ddim, "DDIM step count")->capture_default_str();
  s->add_flag("--ancestral", sa.ancestral, "Use the full stochastic sampler");

  OptimizeArgs op;
  auto* o = app.add_subcommand("optimize", "Optimize diffusion noise for a task");
  o->add_option("--checkpoint", op.checkpoint, "Checkpoint")->required();
  o->add_option("--task", op.task, "Task JSON")->required();
  o->add_option("--stages", op.stages, "Stage schedule JSON (default: two-stage table)");
  o->add_option("--out", op.out, "Output motion file")->required();
  o->add_option("--trace", op.trace, "Per-iteration loss CSV");
  o->add_option("--seed", op.seed, "Seed")->capture_default_str();
  o->add_option("--ddim", op.ddim, "DDIM step count")->capture_default_str();
  o->add_option("--log-every", op.log_every, "Print losses every K iterations")->capture_default_str();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Run a task suite and report tracking metrics");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint")->required();
  e->add_option("--suite", ev.suite, "Directory of task JSON files")->required();
  e->add_option("--stages", ev.stages, "Stage schedule JSON");
  e->add_option("--seeds", ev.seeds, "Seeds")->delimiter(',')->capture_default_str();
  e->add_option("--out", ev.out, "Report CSV");
  e->add_option("--threads", ev.threads, "Parallel runs")->capture_default_str();
  e->add_option("--ddim", ev.ddim, "DDIM step count")->capture_default_str();

  PlanArgs pl;
  auto* p = app.add_subcommand("plan", "Turn an instruction into a contact plan");
  p->add_option("--instruction", pl.instruction, "Instruction text")->required();
  p->add_option("--offline-fixture", pl.fixture, "Replay data/fixtures/plans/<name>.json instead of calling the endpoint");
  p->add_option("--frames", pl.frames, "Sequence length")->capture_default_str();
  p->add_option("--retries", pl.retries, "Extra attempts after an invalid reply")->capture_default_str();
  p->add_option("--out", pl.out, "Write the plan task JSON here");

  GradArgs gr;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the noise gradient");
  gc->add_option("--seed", gr.seed, "Seed")->capture_default_str();
  gc->add_option("--coords", gr.coords, "Coordinates to probe")->capture_default_str();
  gc->add_option("--step", gr.step, "Central-difference step")->capture_default_str();
  gc->add_option("--tolerance", gr.tolerance, "Maximum accepted relative error")->capture_default_str();

  ExportArgs ex;
  auto* x = app.add_subcommand("export", "Decode a motion to joint CSV / OBJ, or dump the skeleton");
  x->add_option("--motion", ex.motion, "Motion file");
  x->add_option("--csv", ex.csv, "Joint trajectory CSV");
  x->add_option("--obj", ex.obj, "OBJ point/line sequence");
  x->add_option("--init", ex.init, "Frame-0 root position x,y,z")->delimiter(',');
  x->add_option("--yaw", ex.yaw, "Frame-0 heading (radians)");
  x->add_option("--skeleton-out", ex.skeleton_out, "Write the skeleton JSON");
  x->add_option("--catalog-out", ex.catalog_out, "Write the vertex catalog JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitSchema;
  }

  try {
    if (*g) return run_gen(common, gen);
    if (*t) return run_train(common, tr);
    if (*s) return run_sample(common, sa);
    if (*o) return run_optimize(common, op);
    if (*e) return run_eval(common, ev);
    if (*p) return run_plan(common, pl);
    if (*gc) return run_grad(common, gr);
    if (*x) return run_export(common, ex);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return is_schema_error(err.code()) ? kExitSchema : kExitRuntime;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
