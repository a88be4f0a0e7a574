#include "doctest.h"

#include "fusion/checkpoint.h"
#include "fusion/training.h"
#include "generators.h"
#include "oracles.h"

#include <filesystem>
#include <fstream>

using namespace fusion;

namespace {

DenoiserConfig small_config(int dim) {
  DenoiserConfig c;
  c.d_model = 16;
  c.layers = 1;
  c.heads = 2;
  c.ff = 32;
  c.input_dim = dim;
  c.max_len = 16;
  c.time_dim = 16;
  c.diffusion_steps = 50;
  return c;
}

std::vector<MotionFeatures> random_clips(const SkeletonSpec& skel, int count, int frames, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::vector<MotionFeatures> out;
  for (int k = 0; k < count; ++k) {
    out.push_back(encode(skel, gen::clip(rng, skel, frames)));
  }
  return out;
}

} // namespace

TEST_CASE("training losses equal brute-force recomputation") {
  const SkeletonSpec skel = make_desk_skeleton();
  Rng rng = make_rng(51);
  for (int k = 0; k < 50; ++k) {
    const int n = 4 + static_cast<int>(rng() % 8);
    const FeatureMatrix x0 = encode(skel, gen::clip(rng, skel, n)).data;
    const FeatureMatrix xhat = x0 + gen::matrix(rng, n, static_cast<int>(x0.cols()), 0.1);
    const LossTerms t = motion_losses(skel, x0, reference_positions(skel, x0), xhat, {});
    const auto [geo, foot] = oracle::geo_foot(skel, x0, xhat);
    const double recon = oracle::recon(x0, xhat);
    CHECK(t.recon == doctest::Approx(recon).epsilon(1e-9));
    CHECK(t.geo == doctest::Approx(geo).epsilon(1e-9));
    CHECK(t.foot == doctest::Approx(foot).epsilon(1e-9));
    CHECK(std::abs(t.recon - recon) <= 1e-9 * std::max(1.0, recon));
    CHECK(std::abs(t.geo - geo) <= 1e-9 * std::max(1.0, geo));
    CHECK(std::abs(t.foot - foot) <= 1e-9 * std::max(1.0, foot));
    CHECK(t.recon >= 0.0);
    CHECK(t.geo >= 0.0);
    CHECK(t.foot >= 0.0);
    CHECK(t.total == doctest::Approx(t.recon + t.geo + t.foot));
  }
}

TEST_CASE("losses vanish on a perfect prediction") {
  const SkeletonSpec skel = make_desk_skeleton();
  Rng rng = make_rng(52);
  const FeatureMatrix x0 = encode(skel, gen::clip(rng, skel, 10)).data;
  const LossTerms t = motion_losses(skel, x0, reference_positions(skel, x0), x0, {});
  CHECK(t.recon == 0.0);
  CHECK(t.geo < 1e-24);
}

TEST_CASE("motion loss gradient matches finite differences") {
  const SkeletonSpec skel = make_desk_skeleton();
  Rng rng = make_rng(53);
  const FeatureMatrix x0 = encode(skel, gen::clip(rng, skel, 6)).data;
  FeatureMatrix xhat = x0 + gen::matrix(rng, 6, static_cast<int>(x0.cols()), 0.1);
  const auto ref = reference_positions(skel, x0);
  const LossWeights w{0.7, 1.3, 2.0};
  FeatureMatrix g = FeatureMatrix::Zero(xhat.rows(), xhat.cols());
  motion_losses(skel, x0, ref, xhat, w, &g);
  for (int k = 0; k < 60; ++k) {
    const int r = static_cast<int>(rng() % xhat.rows()), c = static_cast<int>(rng() % xhat.cols());
    const double keep = xhat(r, c);
    xhat(r, c) = keep + 1e-6;
    const double up = motion_losses(skel, x0, ref, xhat, w).total;
    xhat(r, c) = keep - 1e-6;
    const double down = motion_losses(skel, x0, ref, xhat, w).total;
    xhat(r, c) = keep;
    const double fd = (up - down) / 2e-6;
    CHECK(std::abs(g(r, c) - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("training reduces the loss on a tiny set") {
  const SkeletonSpec skel = make_desk_skeleton();
  const auto data = random_clips(skel, 8, 8, 54);
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.batch = 4;
  cfg.steps = 60;
  cfg.seed = 3;
  const NoiseSchedule s = make_schedule(50);
  TrainState state = make_train_state(small_config(346), cfg, 1);
  train(state, cfg, data, s, skel, cfg.steps);
  REQUIRE(state.history.size() == 60);
  double first = 0.0, last = 0.0;
  for (int k = 0; k < 10; ++k) {
    first += state.history[k].terms.recon;
    last += state.history[50 + k].terms.recon;
  }
  CHECK(last < first);
  CHECK(state.step == 60);
}

TEST_CASE("resuming from a checkpoint follows the same trajectory") {
  const SkeletonSpec skel = make_desk_skeleton();
  const auto data = random_clips(skel, 6, 8, 55);
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.batch = 3;
  cfg.seed = 9;
  const NoiseSchedule s = make_schedule(50);

  TrainState full = make_train_state(small_config(346), cfg, 2);
  train(full, cfg, data, s, skel, 6);

  TrainState half = make_train_state(small_config(346), cfg, 2);
  train(half, cfg, data, s, skel, 3);
  const auto path = std::filesystem::temp_directory_path() / "fusion_test_resume.ckpt";
  save_checkpoint(checkpoint_from_state(half, s, skel, cfg.seed), path);
  const Checkpoint ck = load_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(ck.step == 3);
  CHECK(ck.schedule().alpha_bar == s.alpha_bar);
  REQUIRE(ck.skeleton.has_value());
  CHECK(ck.skeleton->hash() == skel.hash());
  TrainState resumed = state_from_checkpoint(ck);
  train(resumed, cfg, data, s, skel, 6);
  CHECK(resumed.model.params() == full.model.params());
}

TEST_CASE("train config parsing is strict") {
  const TrainConfig c = TrainConfig::from_json(R"({"lr": 0.001, "batch": 8, "lambda_foot": 0.5})");
  CHECK(c.lr == 0.001);
  CHECK(c.batch == 8);
  CHECK(c.weights.foot == 0.5);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"learning_rate": 0.1})"), Error);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto path = std::filesystem::temp_directory_path() / "fusion_test_bad.ckpt";
  {
    std::ofstream out(path, std::ios::binary);
    out << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(path), Error);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), Error);
}
