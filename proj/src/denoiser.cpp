#include "fusion/denoiser.h"

#include "json.hpp"

#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <array>
#include <cmath>

namespace fusion {

using nlohmann::json;

void DenoiserConfig::validate() const {
  if (d_model <= 0 || layers < 0 || heads <= 0 || ff <= 0 || input_dim <= 0 || max_len <= 0 || time_dim <= 0 ||
      diffusion_steps <= 0) {
    throw Error(ErrorCode::InvalidConfig, "denoiser dimensions must be positive");
  }
  if (d_model % heads != 0) {
    throw Error(ErrorCode::InvalidConfig, "d_model must be divisible by the head count");
  }
  if (time_dim % 2 != 0 || d_model % 2 != 0) {
    throw Error(ErrorCode::InvalidConfig, "time_dim and d_model must be even");
  }
}

std::string DenoiserConfig::to_json() const {
  json j = {{"d_model", d_model}, {"layers", layers},       {"heads", heads},
            {"ff", ff},           {"input_dim", input_dim}, {"max_len", max_len},
            {"time_dim", time_dim}, {"diffusion_steps", diffusion_steps}};
  return j.dump();
}

DenoiserConfig DenoiserConfig::from_json(const std::string& text) {
  DenoiserConfig c;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) {
      throw Error(ErrorCode::SchemaError, "denoiser config must be a JSON object");
    }
    static const std::array<const char*, 8> known = {"d_model", "layers",  "heads",    "ff",
                                                     "input_dim", "max_len", "time_dim", "diffusion_steps"};
    for (const auto& [key, v] : j.items()) {
      if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end()) {
        throw Error(ErrorCode::SchemaError, "unknown denoiser config key '" + key + "'");
      }
    }
    c.d_model = j.value("d_model", c.d_model);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.ff = j.value("ff", c.ff);
    c.input_dim = j.value("input_dim", c.input_dim);
    c.max_len = j.value("max_len", c.max_len);
    c.time_dim = j.value("time_dim", c.time_dim);
    c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaError, std::string("denoiser config: ") + e.what());
  }
  c.validate();
  return c;
}

ParamLayout::ParamLayout(const DenoiserConfig& c) {
  const int d = c.d_model;
  auto add = [&](const std::string& name, int rows, int cols) {
    TensorInfo t{name, total, rows, cols};
    tensors.push_back(t);
    total += t.size();
    return t.offset;
  };
  in_w = add("input.weight", c.input_dim, d);
  in_b = add("input.bias", d, 1);
  t1_w = add("time.fc1.weight", c.time_dim, d);
  t1_b = add("time.fc1.bias", d, 1);
  t2_w = add("time.fc2.weight", d, d);
  t2_b = add("time.fc2.bias", d, 1);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Layer L{};
    L.ln1_g = add(p + "ln1.gain", d, 1);
    L.ln1_b = add(p + "ln1.bias", d, 1);
    L.wqkv = add(p + "attn.qkv.weight", d, 3 * d);
    L.bqkv = add(p + "attn.qkv.bias", 3 * d, 1);
    L.wo = add(p + "attn.out.weight", d, d);
    L.bo = add(p + "attn.out.bias", d, 1);
    L.ln2_g = add(p + "ln2.gain", d, 1);
    L.ln2_b = add(p + "ln2.bias", d, 1);
    L.w1 = add(p + "ff.fc1.weight", d, c.ff);
    L.b1 = add(p + "ff.fc1.bias", c.ff, 1);
    L.w2 = add(p + "ff.fc2.weight", c.ff, d);
    L.b2 = add(p + "ff.fc2.bias", d, 1);
    layers.push_back(L);
  }
  out_w = add("output.weight", d, c.input_dim);
  out_b = add("output.bias", c.input_dim, 1);
}

std::size_t denoiser_param_count(const DenoiserConfig& c) {
  const std::size_t d = c.d_model, D = c.input_dim, f = c.ff, td = c.time_dim;
  const std::size_t per_layer = 4 * d + 3 * d * d + 3 * d + d * d + d + d * f + f + f * d + d;
  return (D * d + d) + (td * d + d + d * d + d) + c.layers * per_layer + (d * D + D);
}

DenoiserConfig desk_denoiser_config(int input_dim, int max_len) {
  DenoiserConfig c;
  c.input_dim = input_dim;
  c.max_len = max_len;
  return c;
}

namespace {

constexpr double kLnEps = 1e-5;

template <typename S>
using MatS = RowMatrix<S>;
template <typename S>
using VecS = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using RowVecS = Eigen::Matrix<S, 1, Eigen::Dynamic>;

template <typename S>
Eigen::Map<const MatS<S>> cmat(const VecS<S>& p, std::size_t off, int rows, int cols) {
  return Eigen::Map<const MatS<S>>(p.data() + off, rows, cols);
}

template <typename S>
Eigen::Map<const RowVecS<S>> cvec(const VecS<S>& p, std::size_t off, int n) {
  return Eigen::Map<const RowVecS<S>>(p.data() + off, n);
}

template <typename S>
Eigen::Map<MatS<S>> mmat(VecS<S>& p, std::size_t off, int rows, int cols) {
  return Eigen::Map<MatS<S>>(p.data() + off, rows, cols);
}

template <typename S>
Eigen::Map<RowVecS<S>> mvec(VecS<S>& p, std::size_t off, int n) {
  return Eigen::Map<RowVecS<S>>(p.data() + off, n);
}

/// Sinusoidal embedding: [sin(p w_k), cos(p w_k)] with w_k = 10000^(-k / half).
template <typename S>
void sinusoid(double pos, int dim, S* out) {
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double w = std::exp(-std::log(10000.0) * k / half);
    out[k] = static_cast<S>(std::sin(pos * w));
    out[half + k] = static_cast<S>(std::cos(pos * w));
  }
}

template <typename S>
void layer_norm(const MatS<S>& x, const Eigen::Map<const RowVecS<S>>& g, const Eigen::Map<const RowVecS<S>>& b,
                MatS<S>& xhat, VecS<S>& rstd, MatS<S>& y) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  xhat.resize(n, d);
  rstd.resize(n);
  y.resize(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const S mean = x.row(r).mean();
    const S var = (x.row(r).array() - mean).square().mean();
    const S rs = S(1) / std::sqrt(var + S(kLnEps));
    rstd[r] = rs;
    xhat.row(r) = (x.row(r).array() - mean) * rs;
    y.row(r) = xhat.row(r).cwiseProduct(g) + b;
  }
}

/// dx from dy for y = xhat * g + b; accumulates dg, db when given.
template <typename S>
void layer_norm_backward(const MatS<S>& dy, const MatS<S>& xhat, const VecS<S>& rstd,
                         const Eigen::Map<const RowVecS<S>>& g, MatS<S>& dx, S* dg, S* db) {
  const Eigen::Index n = dy.rows();
  const Eigen::Index d = dy.cols();
  dx.resize(n, d);
  if (dg) {
    Eigen::Map<RowVecS<S>>(dg, d) += (dy.cwiseProduct(xhat)).colwise().sum();
    Eigen::Map<RowVecS<S>>(db, d) += dy.colwise().sum();
  }
  for (Eigen::Index r = 0; r < n; ++r) {
    const RowVecS<S> dxh = dy.row(r).cwiseProduct(g);
    const S m1 = dxh.mean();
    const S m2 = dxh.dot(xhat.row(r)) / S(d);
    dx.row(r) = rstd[r] * (dxh.array() - m1 - xhat.row(r).array() * m2).matrix();
  }
}

template <typename S>
void gelu(const MatS<S>& u, MatS<S>& g) {
  const S inv_sqrt2 = S(0.70710678118654752440);
  g = (S(0.5) * u.array() * (S(1) + (u.array() * inv_sqrt2).erf())).matrix();
}

template <typename S>
void gelu_backward(const MatS<S>& u, MatS<S>& dg) {
  const S inv_sqrt2 = S(0.70710678118654752440);
  const S inv_sqrt2pi = S(0.39894228040143267794);
  dg.array() *= S(0.5) * (S(1) + (u.array() * inv_sqrt2).erf()) +
                u.array() * inv_sqrt2pi * (S(-0.5) * u.array().square()).exp();
}

template <typename S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

} // namespace

template <typename S>
DenoiserT<S>::DenoiserT(const DenoiserConfig& config) : config_(config), layout_(config) {
  config_.validate();
  params_ = VecS<S>::Zero(static_cast<Eigen::Index>(layout_.total));
}

template <typename S>
DenoiserT<S> DenoiserT<S>::init(const DenoiserConfig& config, std::uint64_t seed) {
  DenoiserT m(config);
  Rng rng = make_rng(seed, 0);
  for (const auto& t : m.layout_.tensors) {
    const bool is_gain = t.name.find(".gain") != std::string::npos;
    const bool is_weight = t.name.find(".weight") != std::string::npos;
    S* p = m.params_.data() + t.offset;
    if (is_gain) {
      std::fill(p, p + t.size(), S(1));
    } else if (is_weight) {
      const double bound = std::sqrt(3.0 / t.rows);
      std::uniform_real_distribution<double> u(-bound, bound);
      for (std::size_t i = 0; i < t.size(); ++i) {
        p[i] = static_cast<S>(u(rng));
      }
    }
  }
  return m;
}

template <typename S>
typename DenoiserT<S>::Mat DenoiserT<S>::forward(const Mat& x, int t, ForwardCache<S>* cache) const {
  const int steps[1] = {t};
  return forward(x, std::span<const int>(steps, 1), cache);
}

template <typename S>
typename DenoiserT<S>::Mat DenoiserT<S>::forward(const Mat& x, std::span<const int> t, ForwardCache<S>* cache) const {
  const DenoiserConfig& c = config_;
  const int B = static_cast<int>(t.size());
  if (B == 0 || x.rows() % B != 0 || x.cols() != c.input_dim) {
    throw Error(ErrorCode::ShapeMismatch, "denoiser input must be (B*N) x " + std::to_string(c.input_dim));
  }
  const int N = static_cast<int>(x.rows()) / B;
  if (N < 1 || N > c.max_len) {
    throw Error(ErrorCode::ShapeMismatch, "sequence length " + std::to_string(N) + " outside [1, max_len]");
  }
  if (!x.allFinite()) {
    throw Error(ErrorCode::NonFiniteInput, "denoiser input contains NaN or Inf");
  }
  for (int s : t) {
    if (s < 1 || s > c.diffusion_steps) {
      throw Error(ErrorCode::StepOutOfRange, "diffusion step " + std::to_string(s) + " outside [1, T]");
    }
  }
  const int d = c.d_model;
  const int M = N + 1;
  const int R = B * M;
  const int H = c.heads;
  const int hdim = d / H;
  const S scale = S(1) / std::sqrt(S(hdim));
  const VecS<S>& P = params_;

  ForwardCache<S> local;
  ForwardCache<S>& fc = cache ? *cache : local;
  fc.batch = B;
  fc.frames = N;
  fc.x = x;
  fc.layers.resize(c.layers);

  // Time token.
  fc.time_sin.resize(B, c.time_dim);
  for (int b = 0; b < B; ++b) {
    sinusoid<S>(t[b], c.time_dim, fc.time_sin.row(b).data());
  }
  fc.time_pre.noalias() = fc.time_sin * cmat(P, layout_.t1_w, c.time_dim, d);
  fc.time_pre.rowwise() += cvec(P, layout_.t1_b, d);
  fc.time_act = fc.time_pre.unaryExpr([](S v) { return v * sigmoid(v); });
  Mat emb = fc.time_act * cmat(P, layout_.t2_w, d, d);
  emb.rowwise() += cvec(P, layout_.t2_b, d);

  Mat pe(M, d);
  for (int i = 0; i < M; ++i) {
    sinusoid<S>(i, d, pe.row(i).data());
  }

  Mat xin = x * cmat(P, layout_.in_w, c.input_dim, d);
  xin.rowwise() += cvec(P, layout_.in_b, d);
  Mat h(R, d);
  for (int b = 0; b < B; ++b) {
    h.row(b * M) = emb.row(b) + pe.row(0);
    h.block(b * M + 1, 0, N, d) = xin.block(b * N, 0, N, d) + pe.bottomRows(N);
  }

  Mat scores(M, M);
  for (int l = 0; l < c.layers; ++l) {
    const auto& L = layout_.layers[l];
    auto& lc = fc.layers[l];
    layer_norm<S>(h, cvec(P, L.ln1_g, d), cvec(P, L.ln1_b, d), lc.xhat1, lc.rstd1, lc.a);
    lc.qkv.noalias() = lc.a * cmat(P, L.wqkv, d, 3 * d);
    lc.qkv.rowwise() += cvec(P, L.bqkv, 3 * d);
    lc.ctx.resize(R, d);
    lc.probs.resize(static_cast<std::size_t>(B) * H);
    for (int b = 0; b < B; ++b) {
      for (int hd = 0; hd < H; ++hd) {
        const auto q = lc.qkv.block(b * M, hd * hdim, M, hdim);
        const auto k = lc.qkv.block(b * M, d + hd * hdim, M, hdim);
        const auto v = lc.qkv.block(b * M, 2 * d + hd * hdim, M, hdim);
        Mat& pr = lc.probs[static_cast<std::size_t>(b) * H + hd];
        pr.noalias() = (q * k.transpose()) * scale;
        for (int r = 0; r < M; ++r) {
          const S mx = pr.row(r).maxCoeff();
          pr.row(r) = (pr.row(r).array() - mx).exp();
          pr.row(r) /= pr.row(r).sum();
        }
        lc.ctx.block(b * M, hd * hdim, M, hdim).noalias() = pr * v;
      }
    }
    Mat o = lc.ctx * cmat(P, L.wo, d, d);
    o.rowwise() += cvec(P, L.bo, d);
    h += o;

    layer_norm<S>(h, cvec(P, L.ln2_g, d), cvec(P, L.ln2_b, d), lc.xhat2, lc.rstd2, lc.c);
    lc.u.noalias() = lc.c * cmat(P, L.w1, d, c.ff);
    lc.u.rowwise() += cvec(P, L.b1, c.ff);
    gelu<S>(lc.u, lc.g);
    Mat f = lc.g * cmat(P, L.w2, c.ff, d);
    f.rowwise() += cvec(P, L.b2, d);
    h += f;
  }
  if (!cache) {
    fc.layers.clear();
  }

  Mat hf(B * N, d);
  for (int b = 0; b < B; ++b) {
    hf.block(b * N, 0, N, d) = h.block(b * M + 1, 0, N, d);
  }
  fc.h_out = std::move(h);
  Mat y = hf * cmat(P, layout_.out_w, d, c.input_dim);
  y.rowwise() += cvec(P, layout_.out_b, c.input_dim);
  return y;
}

template <typename S>
void DenoiserT<S>::backward(const ForwardCache<S>& fc, const Mat& dy, Mat* dx, Vec* dparams) const {
  const DenoiserConfig& c = config_;
  const int B = fc.batch;
  const int N = fc.frames;
  const int d = c.d_model;
  const int M = N + 1;
  const int R = B * M;
  const int H = c.heads;
  const int hdim = d / H;
  const S scale = S(1) / std::sqrt(S(hdim));
  const VecS<S>& P = params_;
  if (dy.rows() != B * N || dy.cols() != c.input_dim) {
    throw Error(ErrorCode::ShapeMismatch, "output gradient has the wrong shape");
  }
  if (static_cast<int>(fc.layers.size()) != c.layers) {
    throw Error(ErrorCode::ShapeMismatch, "forward cache does not belong to this model");
  }
  VecS<S>* G = dparams;
  if (G && G->size() != static_cast<Eigen::Index>(layout_.total)) {
    G->setZero(static_cast<Eigen::Index>(layout_.total));
  }

  Mat hf(B * N, d);
  for (int b = 0; b < B; ++b) {
    hf.block(b * N, 0, N, d) = fc.h_out.block(b * M + 1, 0, N, d);
  }
  if (G) {
    mmat(*G, layout_.out_w, d, c.input_dim).noalias() += hf.transpose() * dy;
    mvec(*G, layout_.out_b, c.input_dim) += dy.colwise().sum();
  }
  const Mat dhf = dy * cmat(P, layout_.out_w, d, c.input_dim).transpose();
  Mat dh = Mat::Zero(R, d);
  for (int b = 0; b < B; ++b) {
    dh.block(b * M + 1, 0, N, d) = dhf.block(b * N, 0, N, d);
  }

  Mat tmp, dln;
  for (int l = c.layers - 1; l >= 0; --l) {
    const auto& L = layout_.layers[l];
    const auto& lc = fc.layers[l];

    // Feed-forward branch.
    if (G) {
      mmat(*G, L.w2, c.ff, d).noalias() += lc.g.transpose() * dh;
      mvec(*G, L.b2, d) += dh.colwise().sum();
    }
    Mat du = dh * cmat(P, L.w2, c.ff, d).transpose();
    gelu_backward<S>(lc.u, du);
    if (G) {
      mmat(*G, L.w1, d, c.ff).noalias() += lc.c.transpose() * du;
      mvec(*G, L.b1, c.ff) += du.colwise().sum();
    }
    tmp.noalias() = du * cmat(P, L.w1, d, c.ff).transpose();
    layer_norm_backward<S>(tmp, lc.xhat2, lc.rstd2, cvec(P, L.ln2_g, d), dln, G ? G->data() + L.ln2_g : nullptr,
                           G ? G->data() + L.ln2_b : nullptr);
    dh += dln;

    // Attention branch.
    if (G) {
      mmat(*G, L.wo, d, d).noalias() += lc.ctx.transpose() * dh;
      mvec(*G, L.bo, d) += dh.colwise().sum();
    }
    const Mat dctx = dh * cmat(P, L.wo, d, d).transpose();
    Mat dqkv(R, 3 * d);
    Mat dp(M, M);
    for (int b = 0; b < B; ++b) {
      for (int hd = 0; hd < H; ++hd) {
        const Mat& pr = lc.probs[static_cast<std::size_t>(b) * H + hd];
        const auto q = lc.qkv.block(b * M, hd * hdim, M, hdim);
        const auto k = lc.qkv.block(b * M, d + hd * hdim, M, hdim);
        const auto v = lc.qkv.block(b * M, 2 * d + hd * hdim, M, hdim);
        const auto dc = dctx.block(b * M, hd * hdim, M, hdim);
        dp.noalias() = dc * v.transpose();
        dqkv.block(b * M, 2 * d + hd * hdim, M, hdim).noalias() = pr.transpose() * dc;
        for (int r = 0; r < M; ++r) {
          const S s = dp.row(r).dot(pr.row(r));
          dp.row(r) = pr.row(r).cwiseProduct((dp.row(r).array() - s).matrix());
        }
        dp *= scale;
        dqkv.block(b * M, hd * hdim, M, hdim).noalias() = dp * k;
        dqkv.block(b * M, d + hd * hdim, M, hdim).noalias() = dp.transpose() * q;
      }
    }
    if (G) {
      mmat(*G, L.wqkv, d, 3 * d).noalias() += lc.a.transpose() * dqkv;
      mvec(*G, L.bqkv, 3 * d) += dqkv.colwise().sum();
    }
    tmp.noalias() = dqkv * cmat(P, L.wqkv, d, 3 * d).transpose();
    layer_norm_backward<S>(tmp, lc.xhat1, lc.rstd1, cvec(P, L.ln1_g, d), dln, G ? G->data() + L.ln1_g : nullptr,
                           G ? G->data() + L.ln1_b : nullptr);
    dh += dln;
  }

  // Token embedding.
  Mat dxin(B * N, d);
  Mat demb(B, d);
  for (int b = 0; b < B; ++b) {
    demb.row(b) = dh.row(b * M);
    dxin.block(b * N, 0, N, d) = dh.block(b * M + 1, 0, N, d);
  }
  if (G) {
    mmat(*G, layout_.in_w, c.input_dim, d).noalias() += fc.x.transpose() * dxin;
    mvec(*G, layout_.in_b, d) += dxin.colwise().sum();
    mmat(*G, layout_.t2_w, d, d).noalias() += fc.time_act.transpose() * demb;
    mvec(*G, layout_.t2_b, d) += demb.colwise().sum();
    Mat dpre = demb * cmat(P, layout_.t2_w, d, d).transpose();
    for (Eigen::Index r = 0; r < dpre.rows(); ++r) {
      for (Eigen::Index k = 0; k < dpre.cols(); ++k) {
        const S z = fc.time_pre(r, k);
        const S sg = sigmoid(z);
        dpre(r, k) *= sg * (S(1) + z * (S(1) - sg));
      }
    }
    mmat(*G, layout_.t1_w, c.time_dim, d).noalias() += fc.time_sin.transpose() * dpre;
    mvec(*G, layout_.t1_b, d) += dpre.colwise().sum();
  }
  if (dx) {
    *dx = dxin * cmat(P, layout_.in_w, c.input_dim, d).transpose();
  }
}

template class DenoiserT<float>;
template class DenoiserT<double>;

} // namespace fusion
