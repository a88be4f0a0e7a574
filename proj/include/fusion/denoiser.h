#pragma once

#include "fusion/common.h"

#include <span>
#include <string>
#include <vector>

namespace fusion {

struct DenoiserConfig {
  int d_model = 128;
  int layers = 4;
  int heads = 4;
  int ff = 512;
  int input_dim = 346;
  int max_len = 120;
  int time_dim = 128;
  /// Largest diffusion step accepted by forward().
  int diffusion_steps = 300;

  /// Throws InvalidConfig.
  void validate() const;
  std::string to_json() const;
  static DenoiserConfig from_json(const std::string& text);
  bool operator==(const DenoiserConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0; // 1 for vectors

  std::size_t size() const {
    return static_cast<std::size_t>(rows) * cols;
  }
};

/// Offsets of every tensor inside the flat parameter vector. Weight matrices
/// are stored row-major as (fan_in x fan_out) so activations multiply on the
/// right.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::size_t in_w = 0, in_b = 0;
  std::size_t t1_w = 0, t1_b = 0, t2_w = 0, t2_b = 0;
  std::vector<Layer> layers;
  std::size_t out_w = 0, out_b = 0;
  std::size_t total = 0;
  std::vector<TensorInfo> tensors;

  explicit ParamLayout(const DenoiserConfig& c);
  ParamLayout() = default;
};

/// Intermediates of one batched forward pass, consumed by backward().
template <typename S>
struct ForwardCache {
  using Mat = RowMatrix<S>;
  struct Layer {
    Mat xhat1;      // normalized (pre-gain) LN1 output
    Eigen::Matrix<S, Eigen::Dynamic, 1> rstd1;
    Mat a;          // LN1 output
    Mat qkv;
    std::vector<Mat> probs; // per (clip, head): (N+1) x (N+1)
    Mat ctx;
    Mat xhat2;
    Eigen::Matrix<S, Eigen::Dynamic, 1> rstd2;
    Mat c;          // LN2 output
    Mat u;          // pre-activation
    Mat g;          // GELU(u)
  };
  int batch = 0;
  int frames = 0;
  Mat x;            // B*N x D input
  Mat time_sin;     // B x time_dim
  Mat time_pre;     // B x d (before SiLU)
  Mat time_act;     // B x d (after SiLU)
  std::vector<Layer> layers;
  Mat h_out;        // final residual stream, B*(N+1) x d
};

/// Transformer denoiser predicting the clean motion from (X_t, t). A time
/// token is prepended to the frame tokens; positions use fixed sinusoids.
template <typename S>
class DenoiserT {
 public:
  using Mat = RowMatrix<S>;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  DenoiserT() = default;
  explicit DenoiserT(const DenoiserConfig& config);

  /// Variance-scaled uniform fan-in init; LN gains 1; all biases 0.
  static DenoiserT init(const DenoiserConfig& config, std::uint64_t seed);

  const DenoiserConfig& config() const {
    return config_;
  }
  const ParamLayout& layout() const {
    return layout_;
  }
  Vec& params() {
    return params_;
  }
  const Vec& params() const {
    return params_;
  }
  std::size_t param_count() const {
    return layout_.total;
  }

  /// Batched forward: `x` stacks B clips of N frames (B*N x D), `t` holds one
  /// step per clip. The cache is filled when given.
  Mat forward(const Mat& x, std::span<const int> t, ForwardCache<S>* cache = nullptr) const;

  /// Single clip.
  Mat forward(const Mat& x, int t, ForwardCache<S>* cache = nullptr) const;

  /// Pulls dL/dY back to dL/dX (if dx) and accumulates dL/dparams (if dparams).
  void backward(const ForwardCache<S>& cache, const Mat& dy, Mat* dx, Vec* dparams) const;

  template <typename T>
  DenoiserT<T> cast() const {
    DenoiserT<T> out(config_);
    out.params() = params_.template cast<T>();
    return out;
  }

 private:
  DenoiserConfig config_;
  ParamLayout layout_;
  Vec params_;
};

using Denoiser = DenoiserT<float>;
using DenoiserD = DenoiserT<double>;

/// Closed-form parameter count for a configuration.
std::size_t denoiser_param_count(const DenoiserConfig& c);

/// Default desk-scale configuration for a feature width.
DenoiserConfig desk_denoiser_config(int input_dim, int max_len = 120);

} // namespace fusion
