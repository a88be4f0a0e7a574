#pragma once

#include "fusion/diffusion.h"
#include "fusion/kinematics.h"
#include "fusion/training.h"

#include <filesystem>
#include <optional>

namespace fusion {

/// Model weights plus the context needed to use or resume them.
struct Checkpoint {
  DenoiserConfig config;
  Eigen::VectorXf params;
  int schedule_T = 300;
  ScheduleKind schedule_kind = ScheduleKind::Linear;
  std::optional<SkeletonSpec> skeleton;
  int step = 0;
  std::uint64_t train_seed = 0;
  // Optimizer state (empty when saved for inference only).
  AdamConfig optimizer_config;
  Eigen::VectorXf moment1;
  Eigen::VectorXf moment2;
  long long optimizer_steps = 0;

  Denoiser model() const;
  NoiseSchedule schedule() const;
};

Checkpoint checkpoint_from_state(const TrainState& state, const NoiseSchedule& schedule, const SkeletonSpec& skel,
                                 std::uint64_t train_seed);
TrainState state_from_checkpoint(const Checkpoint& ckpt);

// File layout: "FSNCKPT\0", u32 version, u64 header length, JSON header
// (config, tensor table, schedule, skeleton, step, optimizer settings), then
// float32 blobs: parameters, and first/second moments when present.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace fusion
