#pragma once

#include "fusion/diffusion.h"
#include "fusion/optim.h"
#include "fusion/representation.h"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace fusion {

/// A body point: a joint (zero offset) or a catalog vertex on a joint.
struct Reference {
  std::string name;
  int joint = 0;
  Vec3 offset = Vec3::Zero();
};

/// Joint names take precedence over catalog labels. Throws UnresolvableReference.
Reference resolve_reference(const SkeletonSpec& skel, const VertexCatalog& catalog, const std::string& name);

/// p_j + R_j * offset.
Vec3 reference_position(const SkeletonState& state, const Reference& ref);

struct Observation {
  std::string reference;
  int frame = 0;
  Vec3 target = Vec3::Zero();
};

struct ObservationSet {
  std::vector<Observation> entries;

  bool empty() const {
    return entries.empty();
  }
};

struct ContactTriple {
  std::string a;
  std::string b;
  int frame = 0;

  bool operator==(const ContactTriple&) const = default;
};

struct ContactPlan {
  std::vector<ContactTriple> triples;

  bool empty() const {
    return triples.empty();
  }
};

/// One block of optimization iterations with fixed loss weights.
struct OptStage {
  int epochs = 800;
  double lambda_lk = 0.5;
  double lambda_foot = 0.5;
  double lambda_ch = 0.5;
  double lambda_close = 1.0;
  /// Weight of L_contact; negative means "same as lambda_close".
  double lambda_contact = -1.0;
  double lambda_decorr = 1.0;
  double lr = 5e-2;
  /// Anneal the rate from lr to zero over the stage with a half cosine.
  bool cosine_decay = true;

  double contact_weight() const {
    return lambda_contact < 0.0 ? lambda_close : lambda_contact;
  }
  void validate() const; // throws InvalidConfig
};

/// (800, 0.5, 0.5, 0.5, 1) followed by (800, 0.1, 0.1, 0.1, 1).
std::vector<OptStage> default_stages();

/// {"stages": [{"epochs": 800, "lambda_lk": 0.5, ...}, ...]}; omitted keys take
/// the OptStage defaults. Throws SchemaError / InvalidConfig.
std::vector<OptStage> stages_from_json(const std::string& text);
std::string stages_to_json(const std::vector<OptStage>& stages);

/// What the optimized motion must satisfy, plus the world placement used to
/// decode it.
struct DnoTask {
  int frames = 60;
  ObservationSet observations;
  ContactPlan plan;
  /// Root position of frame 0; defaults to (0, 0, standing height).
  std::optional<Vec3> init_position;
  Mat3 init_heading = Mat3::Identity();

  Vec3 origin(const SkeletonSpec& skel) const {
    return init_position ? *init_position : Vec3(0.0, 0.0, skel.standing_height);
  }
};

/// Task with every reference looked up. Throws UnresolvableReference,
/// FrameOutOfRange, or SchemaError for a triple touching itself.
struct ResolvedTask {
  struct Target {
    Reference ref;
    int frame = 0;
    Vec3 target = Vec3::Zero();
  };
  struct Contact {
    Reference a;
    Reference b;
    int frame = 0;
  };
  int frames = 0;
  std::vector<Target> targets;
  std::vector<Contact> contacts;
  Vec3 init_position = Vec3::Zero();
  Mat3 init_heading = Mat3::Identity();
};

ResolvedTask resolve_task(const SkeletonSpec& skel, const VertexCatalog& catalog, const DnoTask& task);

// Losses. Each returns the value and, when `grad` is given, adds scale * dL
// to it.

/// (1/N) sum_i |x_T^i|^2 over noise rows.
double loss_lk(const FeatureMatrix& xT, FeatureMatrix* grad = nullptr, double scale = 1.0);

/// Multi-scale lag-1 autocorrelation plus moment matching of the noise.
/// For s in {1, 2, 4}: rows are mean-pooled in blocks of s (tail dropped),
/// and r_s = [sum y_i . y_{i+1} / (D (M-1))] / [sum |y|^2 / (D M)] is pooled
/// over all columns; the loss is sum_s r_s^2 + mean^2 + (var - 1)^2.
double loss_decorr(const FeatureMatrix& xT, FeatureMatrix* grad = nullptr, double scale = 1.0);

/// (1/(N-1)) sum_{i<N-1} sum_feet |z * f| with f the clamped predicted contacts.
double loss_ch(const SkeletonSpec& skel, const WorldMotion& m, WorldGradient* grad = nullptr, double scale = 1.0);

/// (1/(N-1)) sum_{i<N-1} sum_feet |(p_{i+1} - p_i) f_i|^2 with predicted contacts.
double loss_foot_skate(const SkeletonSpec& skel, const WorldMotion& m, WorldGradient* grad = nullptr,
                       double scale = 1.0);

/// (1/|O|) sum |c_hat - c|_1. Throws EmptyObservationSet.
double loss_close(const ResolvedTask& task, const WorldMotion& m, WorldGradient* grad = nullptr, double scale = 1.0);

/// (1/|nu|) sum |v_a - v_b|_1 over the plan's triples; 0 without a plan.
double loss_contact(const ResolvedTask& task, const WorldMotion& m, WorldGradient* grad = nullptr,
                    double scale = 1.0);

/// Decodes X_0 with the task's placement, then evaluates loss_close.
double loss_close(const SkeletonSpec& skel, const VertexCatalog& catalog, const FeatureMatrix& x0,
                  const DnoTask& task);
double loss_contact(const SkeletonSpec& skel, const VertexCatalog& catalog, const FeatureMatrix& x0,
                    const DnoTask& task);

/// Factor on lambda_lk in the objective (1/D); DnoLosses::lk stays unscaled.
inline double lk_weight_scale(int feature_dim) {
  return 1.0 / static_cast<double>(feature_dim);
}

struct DnoLosses {
  double lk = 0.0;
  double foot = 0.0;
  double ch = 0.0;
  double close = 0.0;
  double contact = 0.0;
  double decorr = 0.0;
  double total = 0.0;
};

/// Task losses of a decoded X_0 plus the noise regularizers, weighted by the
/// stage. Fills dL/dX_0 and the direct dL/dx_T when given.
DnoLosses dno_losses(const SkeletonSpec& skel, const ResolvedTask& task, const OptStage& weights,
                     const FeatureMatrix& xT, const FeatureMatrix& x0, FeatureMatrix* d_x0 = nullptr,
                     FeatureMatrix* d_xT = nullptr);

/// Total loss of ODE(model, x_T) and its gradient w.r.t. x_T through the chain.
template <typename S>
DnoLosses dno_objective(const DenoiserT<S>& model, const NoiseSchedule& schedule, const std::vector<int>& steps,
                        const SkeletonSpec& skel, const ResolvedTask& task, const OptStage& weights,
                        const FeatureMatrix& xT, FeatureMatrix* grad = nullptr, FeatureMatrix* x0_out = nullptr);

struct DnoIteration {
  int iteration = 0;
  int stage = 0;
  DnoLosses losses;
  double grad_norm = 0.0;
};

struct DnoOptions {
  int ddim_count = 10;
  double grad_clip = 1.0;
  std::function<void(const DnoIteration&)> on_iteration;
};

struct DnoResult {
  FeatureMatrix xT;
  FeatureMatrix x0;
  std::vector<DnoIteration> trace;
  DnoLosses final_losses; // at the returned x_T, last stage's weights
};

/// Raised on a non-finite gradient; carries the trace up to the failure.
class DnoAborted : public Error {
 public:
  DnoAborted(const std::string& message, std::vector<DnoIteration> trace)
      : Error(ErrorCode::NonFiniteGradient, message), trace_(std::move(trace)) {}
  const std::vector<DnoIteration>& trace() const {
    return trace_;
  }

 private:
  std::vector<DnoIteration> trace_;
};

/// Optimizes x_T (seeded standard normal start) through the deterministic
/// DDIM chain with Adam, running the stages in order with one moment state.
/// Throws NoActiveConstraint when the task has neither observations nor a plan.
template <typename S>
DnoResult optimize_noise(const DenoiserT<S>& model, const NoiseSchedule& schedule, const SkeletonSpec& skel,
                         const VertexCatalog& catalog, const DnoTask& task, const std::vector<OptStage>& stages,
                         std::uint64_t seed, const DnoOptions& options = {});

struct GradCheckResult {
  double max_relative_error = 0.0;
  int coordinates = 0;
  double seconds = 0.0;
};

/// Compares dno_objective's x_T gradient with central differences on a tiny
/// 64-bit denoiser (d_model 16, 2 layers), a 10-step DDIM chain, and a random
/// task touching every loss term.
GradCheckResult dno_gradient_check(const SkeletonSpec& skel, const VertexCatalog& catalog, std::uint64_t seed,
                                   int coordinates = 20, double step = 1e-4, int frames = 16);

void write_trace_csv(const std::vector<DnoIteration>& trace, const std::filesystem::path& path);

} // namespace fusion
