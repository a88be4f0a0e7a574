#include "fusion/training.h"

#include "fusion/checkpoint.h"

#include "json.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fusion {

using nlohmann::json;

Vec3 geo_origin(const SkeletonSpec& skel, const FeatureMatrix& x0) {
  const FeatureLayout layout(skel);
  return Vec3(0.0, 0.0, x0(0, layout.joint(0) + 2));
}

std::vector<std::vector<Vec3>> reference_positions(const SkeletonSpec& skel, const FeatureMatrix& x0) {
  const WorldMotion w = decode_world(skel, x0, geo_origin(skel, x0), Mat3::Identity());
  std::vector<std::vector<Vec3>> out;
  out.reserve(w.frames.size());
  for (const auto& f : w.frames) {
    out.push_back(f.positions);
  }
  return out;
}

LossTerms motion_losses(const SkeletonSpec& skel, const FeatureMatrix& x0,
                        const std::vector<std::vector<Vec3>>& x0_positions, const FeatureMatrix& xhat,
                        const LossWeights& w, FeatureMatrix* d_xhat, double scale) {
  const FeatureLayout layout(skel);
  const int n = static_cast<int>(x0.rows());
  const int nj = layout.joint_count;
  if (xhat.rows() != n || xhat.cols() != x0.cols() || x0.cols() != layout.dim()) {
    throw Error(ErrorCode::ShapeMismatch, "prediction does not match the clean clip");
  }
  if (static_cast<int>(x0_positions.size()) != n) {
    throw Error(ErrorCode::ShapeMismatch, "reference positions do not match the clip length");
  }
  LossTerms terms;
  const FeatureMatrix diff = xhat - x0;
  terms.recon = diff.rowwise().squaredNorm().sum() / n;
  if (d_xhat) {
    *d_xhat += (scale * w.recon * 2.0 / n) * diff;
  }

  const WorldMotion world = decode_world(skel, xhat, geo_origin(skel, x0), Mat3::Identity());
  WorldGradient grad;
  if (d_xhat) {
    grad = WorldGradient(n, nj);
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < nj; ++j) {
      const Vec3 e = world.frames[i].positions[j] - x0_positions[i][j];
      terms.geo += e.squaredNorm();
      if (d_xhat) {
        grad.positions[i][j] += (scale * w.geo * 2.0 / n) * e;
      }
    }
  }
  terms.geo /= n;

  if (n >= 2) {
    for (int i = 0; i + 1 < n; ++i) {
      for (int k = 0; k < 4; ++k) {
        const int j = skel.foot_joints[k];
        const double f = x0(i, layout.contacts() + k);
        const Vec3 v = (world.frames[i + 1].positions[j] - world.frames[i].positions[j]) * f;
        terms.foot += v.squaredNorm();
        if (d_xhat) {
          const Vec3 g = (scale * w.foot * 2.0 / (n - 1)) * f * v;
          grad.positions[i + 1][j] += g;
          grad.positions[i][j] -= g;
        }
      }
    }
    terms.foot /= n - 1;
  }
  if (d_xhat) {
    decode_world_backward(skel, xhat, world, grad, *d_xhat);
  }
  terms.total = w.recon * terms.recon + w.geo * terms.geo + w.foot * terms.foot;
  return terms;
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) {
      throw Error(ErrorCode::SchemaError, "training config must be a JSON object");
    }
    for (const auto& [key, v] : j.items()) {
      if (key == "lr") {
        c.lr = v.get<double>();
      } else if (key == "batch") {
        c.batch = v.get<int>();
      } else if (key == "steps") {
        c.steps = v.get<int>();
      } else if (key == "lambda_recon") {
        c.weights.recon = v.get<double>();
      } else if (key == "lambda_geo") {
        c.weights.geo = v.get<double>();
      } else if (key == "lambda_foot") {
        c.weights.foot = v.get<double>();
      } else if (key == "grad_clip") {
        c.grad_clip = v.get<double>();
      } else if (key == "weight_decay") {
        c.weight_decay = v.get<double>();
      } else if (key == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else if (key == "checkpoint_every") {
        c.checkpoint_every = v.get<int>();
      } else if (key == "threads") {
        c.threads = v.get<int>();
      } else if (key != "model" && key != "schedule" && key != "T") {
        throw Error(ErrorCode::SchemaError, "unknown training config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaError, std::string("training config: ") + e.what());
  }
  if (c.batch < 1 || c.steps < 0 || c.lr < 0 || c.grad_clip < 0) {
    throw Error(ErrorCode::InvalidConfig, "training config values out of range");
  }
  return c;
}

TrainState make_train_state(const DenoiserConfig& model_config, const TrainConfig& config, std::uint64_t init_seed) {
  TrainState s;
  s.model = Denoiser::init(model_config, init_seed);
  AdamConfig ac;
  ac.lr = config.lr;
  ac.weight_decay = config.weight_decay;
  s.optimizer = Adam<float>(ac, static_cast<Eigen::Index>(s.model.param_count()));
  return s;
}

LossTerms training_losses(const Denoiser& model, const NoiseSchedule& schedule, const SkeletonSpec& skel,
                          const std::vector<MotionFeatures>& data,
                          const std::vector<std::vector<std::vector<Vec3>>>& positions, const TrainConfig& config,
                          Rng& rng, Eigen::VectorXf* grad) {
  if (data.empty()) {
    throw Error(ErrorCode::SizeMismatch, "training needs at least one clip");
  }
  const int B = config.batch;
  const int N = data[0].frames();
  const int D = data[0].dim();
  std::uniform_int_distribution<int> pick(0, static_cast<int>(data.size()) - 1);
  std::uniform_int_distribution<int> step(1, schedule.T);
  std::vector<int> idx(B);
  std::vector<int> ts(B);
  for (int b = 0; b < B; ++b) {
    idx[b] = pick(rng);
  }
  for (int b = 0; b < B; ++b) {
    ts[b] = step(rng);
  }
  RowMatrix<float> eps(B * N, D);
  fill_normal(eps, rng);

  RowMatrix<float> xt(B * N, D);
  for (int b = 0; b < B; ++b) {
    const MotionFeatures& clip = data[idx[b]];
    if (clip.frames() != N || clip.dim() != D) {
      throw Error(ErrorCode::ShapeMismatch, "training clips must share one shape");
    }
    const float a = static_cast<float>(std::sqrt(schedule.alpha_bar[ts[b]]));
    const float s = static_cast<float>(std::sqrt(1.0 - schedule.alpha_bar[ts[b]]));
    xt.middleRows(b * N, N) = a * clip.data.cast<float>() + s * eps.middleRows(b * N, N);
  }

  ForwardCache<float> cache;
  const RowMatrix<float> xhat = model.forward(xt, ts, grad ? &cache : nullptr);

  LossTerms mean;
  RowMatrix<float> dy;
  if (grad) {
    dy.resize(B * N, D);
  }
  FeatureMatrix d_clip;
  for (int b = 0; b < B; ++b) {
    const MotionFeatures& clip = data[idx[b]];
    const FeatureMatrix pred = xhat.middleRows(b * N, N).cast<double>();
    if (grad) {
      d_clip.setZero(N, D);
    }
    LossTerms t;
    try {
      t = motion_losses(skel, clip.data, positions[idx[b]], pred, config.weights, grad ? &d_clip : nullptr,
                        1.0 / B);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DegenerateRotation) {
        throw;
      }
      // A collapsed 6D block cannot be decoded; train that clip on L_recon only.
      LossWeights recon_only{config.weights.recon, 0.0, 0.0};
      if (grad) {
        d_clip.setZero(N, D);
        d_clip = (2.0 * config.weights.recon / (B * N)) * (pred - clip.data);
      }
      t.recon = (pred - clip.data).rowwise().squaredNorm().sum() / N;
      t.total = recon_only.recon * t.recon;
    }
    mean.recon += t.recon / B;
    mean.geo += t.geo / B;
    mean.foot += t.foot / B;
    mean.total += t.total / B;
    if (grad) {
      dy.middleRows(b * N, N) = d_clip.cast<float>();
    }
  }
  if (grad) {
    model.backward(cache, dy, nullptr, grad);
  }
  return mean;
}

void train(TrainState& state, const TrainConfig& config, const std::vector<MotionFeatures>& data,
           const NoiseSchedule& schedule, const SkeletonSpec& skel, int until_step, const TrainCallback& on_step) {
  std::vector<std::vector<std::vector<Vec3>>> positions;
  positions.reserve(data.size());
  for (const auto& clip : data) {
    positions.push_back(reference_positions(skel, clip.data));
  }
  state.optimizer.config().lr = config.lr;
  state.optimizer.config().weight_decay = config.weight_decay;
  Eigen::VectorXf grad(static_cast<Eigen::Index>(state.model.param_count()));
  while (state.step < until_step) {
    Rng rng = make_rng(config.seed, static_cast<std::uint64_t>(state.step));
    grad.setZero();
    const LossTerms terms = training_losses(state.model, schedule, skel, data, positions, config, rng, &grad);
    const double norm = clip_grad_norm(grad, config.grad_clip);
    if (!std::isfinite(terms.total) || !std::isfinite(norm)) {
      std::ostringstream msg;
      msg << "non-finite training loss at step " << state.step << ": recon=" << terms.recon << " geo=" << terms.geo
          << " foot=" << terms.foot << " grad_norm=" << norm;
      if (!config.checkpoint_path.empty()) {
        auto dump = config.checkpoint_path;
        dump += ".nonfinite";
        save_checkpoint(checkpoint_from_state(state, schedule, skel, config.seed), dump);
        msg << " (state dumped to " << dump.string() << ")";
      }
      throw Error(ErrorCode::NonFiniteLoss, msg.str());
    }
    state.optimizer.step(state.model.params(), grad);
    ++state.step;
    TrainRecord rec{state.step, terms, norm};
    state.history.push_back(rec);
    if (on_step) {
      on_step(rec);
    }
    if (config.checkpoint_every > 0 && !config.checkpoint_path.empty() && state.step % config.checkpoint_every == 0) {
      save_checkpoint(checkpoint_from_state(state, schedule, skel, config.seed), config.checkpoint_path);
    }
  }
}

void write_loss_csv(const std::vector<TrainRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw Error(ErrorCode::IoError, "cannot write " + path.string());
  }
  out << "step,recon,geo,foot,total,grad_norm\n" << std::setprecision(9);
  for (const auto& r : history) {
    out << r.step << ',' << r.terms.recon << ',' << r.terms.geo << ',' << r.terms.foot << ',' << r.terms.total << ','
        << r.grad_norm << '\n';
  }
}

} // namespace fusion
