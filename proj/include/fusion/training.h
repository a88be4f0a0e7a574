#pragma once

#include "fusion/diffusion.h"
#include "fusion/optim.h"
#include "fusion/representation.h"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace fusion {

struct LossWeights {
  double recon = 1.0;
  double geo = 1.0;
  double foot = 1.0;
};

struct LossTerms {
  double recon = 0.0;
  double geo = 0.0;
  double foot = 0.0;
  double total = 0.0;
};

/// Decode origin used by the geometric losses: root at (0, 0, z) with z the
/// clip's first-frame canonical root height, identity heading.
Vec3 geo_origin(const SkeletonSpec& skel, const FeatureMatrix& x0);

/// World joint positions of a ground-truth clip decoded from geo_origin.
std::vector<std::vector<Vec3>> reference_positions(const SkeletonSpec& skel, const FeatureMatrix& x0);

/// Reconstruction, FK-geometry, and foot-skating losses of one prediction
/// against its clean clip. L_recon and L_geo average per-frame squared norms
/// over the N frames; L_foot averages over the N-1 frame pairs and uses the
/// ground-truth contact labels. Adds the weighted gradient (times `scale`)
/// into `d_xhat` when given.
LossTerms motion_losses(const SkeletonSpec& skel, const FeatureMatrix& x0,
                        const std::vector<std::vector<Vec3>>& x0_positions, const FeatureMatrix& xhat,
                        const LossWeights& w, FeatureMatrix* d_xhat = nullptr, double scale = 1.0);

struct TrainConfig {
  double lr = 1e-4;
  int batch = 32;
  int steps = 5000;
  LossWeights weights;
  double grad_clip = 1.0;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;
  std::filesystem::path checkpoint_path;
  int threads = 1;

  static TrainConfig from_json(const std::string& text);
};

struct TrainRecord {
  int step = 0;
  LossTerms terms;
  double grad_norm = 0.0;
};

/// Mutable training state; everything needed to resume bit-identically.
struct TrainState {
  Denoiser model;
  Adam<float> optimizer;
  int step = 0;
  std::vector<TrainRecord> history;
};

TrainState make_train_state(const DenoiserConfig& model_config, const TrainConfig& config, std::uint64_t init_seed);

/// One batch: draws clips, steps and noise from `rng`, evaluates the losses,
/// and fills the parameter gradient when given.
LossTerms training_losses(const Denoiser& model, const NoiseSchedule& schedule, const SkeletonSpec& skel,
                          const std::vector<MotionFeatures>& data,
                          const std::vector<std::vector<std::vector<Vec3>>>& positions, const TrainConfig& config,
                          Rng& rng, Eigen::VectorXf* grad);

using TrainCallback = std::function<void(const TrainRecord&)>;

/// Runs AdamW steps until state.step reaches `until_step`. Step k draws its
/// randomness from make_rng(config.seed, k), so an interrupted run resumed
/// from a checkpoint follows the same trajectory.
void train(TrainState& state, const TrainConfig& config, const std::vector<MotionFeatures>& data,
           const NoiseSchedule& schedule, const SkeletonSpec& skel, int until_step,
           const TrainCallback& on_step = {});

void write_loss_csv(const std::vector<TrainRecord>& history, const std::filesystem::path& path);

} // namespace fusion
