#pragma once

#include "fusion/representation.h"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fusion {

enum class Side { Left, Right };

std::string_view to_string(Side side);

struct BodyClip {
  std::vector<Pose> poses; // hand joints at rest
  std::string source_tag;
  /// Generator ground truth: per frame, whether the left / right foot is planted.
  std::vector<std::array<bool, 2>> stance;
};

struct HandClip {
  Side side = Side::Left;
  /// N x hand joint count, ordered like SkeletonSpec::{left,right}_hand_joints.
  std::vector<std::vector<Mat3>> local_rots;

  int frames() const {
    return static_cast<int>(local_rots.size());
  }
};

/// Overrides for the body generator; unset fields are drawn from the seed.
struct BodySynthOptions {
  std::optional<double> speed;     // m/s, in [0, 1.5]
  std::optional<double> curvature; // 1/m, signed, positive turns left
  std::optional<double> yaw;       // initial heading
  std::optional<bool> gesture;     // bring both hands together in front of the chest
};

BodyClip synth_body_clip(std::uint64_t seed, int frames, const SkeletonSpec& skel, const BodySynthOptions& opts = {});

struct HandSynthOptions {
  /// Curl every finger linearly from rest to its upper limit.
  bool fist = false;
};

HandClip synth_hand_clip(std::uint64_t seed, int frames, const SkeletonSpec& skel, Side side,
                         const HandSynthOptions& opts = {});

BodyClip flip_clip(const SkeletonSpec& skel, const BodyClip& clip);
HandClip flip_hand(const SkeletonSpec& skel, const HandClip& clip);
HandClip time_reverse(const HandClip& clip);

/// Body poses with the finger rotations taken from the hand clips. Wrist
/// rotations always come from the body.
std::vector<Pose> merge_body_hand(const SkeletonSpec& skel, const BodyClip& body, const HandClip& left,
                                  const HandClip& right);

struct FilterResult {
  bool accepted = true;
  double max_depth = 0.0; // deepest overlap over the clip
  int frame = -1;         // frame of max_depth
  int joint_a = -1;
  int joint_b = -1;
};

/// Checks each hand's finger capsules against every joint outside that hand
/// (its own wrist excluded). Rejects when any frame exceeds `threshold`.
FilterResult penetration_filter(const SkeletonSpec& skel, std::span<const Pose> poses, double threshold);

struct DatasetConfig {
  int body_clips = 10;
  int hand_clips = 10; // per side, before augmentation
  int frames = 120;
  std::uint64_t seed = 0;
  double penetration_threshold = 0.005;
  int retry_budget = 8;
  /// Keep the bodies' own (rest) hands instead of merging sampled hands.
  bool skip_merge = false;
  int threads = 0; // 0 = hardware concurrency
};

DatasetConfig dataset_config_from_json(const std::string& text);

struct PairingRecord {
  int clip = 0;
  int attempt = 0;
  int left_source = -1; // index into the hand pool
  int right_source = -1;
  bool accepted = false;
  double depth = 0.0;
  int frame = -1;
};

struct DatasetManifest {
  std::vector<std::string> clips; // file names relative to the output dir
  std::vector<std::string> clip_tags;
  int body_original = 0;
  int body_flipped = 0;
  int hand_generated = 0;
  int hand_flipped = 0;
  int hand_reversed = 0;
  int dropped = 0;
  int rejections = 0;
  std::uint64_t skeleton_hash = 0;
  std::uint64_t seed = 0;
  int frames = 0;
  std::vector<PairingRecord> pairing_log;

  std::string to_json() const;
  static DatasetManifest from_json(const std::string& text);
};

/// Hand pool used by build_dataset: right-hand clips generated directly,
/// flipped left-hand clips, and time-reversed copies of both.
std::vector<HandClip> build_hand_pool(const SkeletonSpec& skel, const DatasetConfig& config, DatasetManifest* counts);

/// Runs the full pipeline and writes `<out>/clip_XXXXX.motion` files plus
/// `<out>/manifest.json`. Clips that exhaust the retry budget are dropped.
DatasetManifest build_dataset(const SkeletonSpec& skel, const DatasetConfig& config,
                              const std::filesystem::path& out_dir);

/// In-memory variant returning the encoded clips in manifest order.
std::vector<MotionFeatures> build_dataset_in_memory(const SkeletonSpec& skel, const DatasetConfig& config,
                                                    DatasetManifest* manifest = nullptr);

/// Loads every clip listed in a manifest directory.
std::vector<MotionFeatures> load_dataset(const std::filesystem::path& dir);

} // namespace fusion
