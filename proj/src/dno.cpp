#include "fusion/dno.h"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>

namespace fusion {

using nlohmann::json;

Reference resolve_reference(const SkeletonSpec& skel, const VertexCatalog& catalog, const std::string& name) {
  const int j = skel.find_joint(name);
  if (j >= 0) {
    return Reference{name, j, Vec3::Zero()};
  }
  if (const CatalogEntry* e = catalog.find(name)) {
    return Reference{name, e->joint, e->offset};
  }
  throw Error(ErrorCode::UnresolvableReference, "'" + name + "' is neither a joint nor a catalog label");
}

Vec3 reference_position(const SkeletonState& state, const Reference& ref) {
  return state.positions[ref.joint] + state.rotations[ref.joint] * ref.offset;
}

void OptStage::validate() const {
  if (epochs <= 0) {
    throw Error(ErrorCode::InvalidConfig, "stage epochs must be positive");
  }
  if (lambda_lk < 0 || lambda_foot < 0 || lambda_ch < 0 || lambda_close < 0 || lambda_decorr < 0 || !(lr > 0)) {
    throw Error(ErrorCode::InvalidConfig, "stage weights must be non-negative and lr positive");
  }
}

std::vector<OptStage> default_stages() {
  OptStage first;
  OptStage second;
  second.lambda_lk = 0.1;
  second.lambda_foot = 0.1;
  second.lambda_ch = 0.1;
  return {first, second};
}

std::vector<OptStage> stages_from_json(const std::string& text) {
  std::vector<OptStage> out;
  try {
    const json j = json::parse(text);
    const json& arr = j.is_array() ? j : j.at("stages");
    if (!arr.is_array() || arr.empty()) {
      throw Error(ErrorCode::SchemaError, "stages must be a non-empty array");
    }
    for (const auto& s : arr) {
      OptStage st;
      for (const auto& [key, v] : s.items()) {
        if (key == "epochs") {
          st.epochs = v.get<int>();
        } else if (key == "lambda_lk") {
          st.lambda_lk = v.get<double>();
        } else if (key == "lambda_foot") {
          st.lambda_foot = v.get<double>();
        } else if (key == "lambda_ch") {
          st.lambda_ch = v.get<double>();
        } else if (key == "lambda_close") {
          st.lambda_close = v.get<double>();
        } else if (key == "lambda_contact") {
          st.lambda_contact = v.get<double>();
        } else if (key == "lambda_decorr") {
          st.lambda_decorr = v.get<double>();
        } else if (key == "lr") {
          st.lr = v.get<double>();
        } else if (key == "lr_decay") {
          const std::string d = v.get<std::string>();
          if (d != "cosine" && d != "none") {
            throw Error(ErrorCode::SchemaError, "lr_decay must be \"cosine\" or \"none\"");
          }
          st.cosine_decay = d == "cosine";
        } else {
          throw Error(ErrorCode::SchemaError, "unknown stage key '" + key + "'");
        }
      }
      st.validate();
      out.push_back(st);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaError, std::string("stages: ") + e.what());
  }
  return out;
}

std::string stages_to_json(const std::vector<OptStage>& stages) {
  json arr = json::array();
  for (const auto& s : stages) {
    json o = {{"epochs", s.epochs},           {"lambda_lk", s.lambda_lk},         {"lambda_foot", s.lambda_foot},
              {"lambda_ch", s.lambda_ch},     {"lambda_close", s.lambda_close},   {"lambda_decorr", s.lambda_decorr},
              {"lr", s.lr},                   {"lr_decay", s.cosine_decay ? "cosine" : "none"}};
    if (s.lambda_contact >= 0.0) {
      o["lambda_contact"] = s.lambda_contact;
    }
    arr.push_back(o);
  }
  return json{{"stages", arr}}.dump(2);
}

ResolvedTask resolve_task(const SkeletonSpec& skel, const VertexCatalog& catalog, const DnoTask& task) {
  if (task.frames < 2) {
    throw Error(ErrorCode::TooShort, "tasks need at least two frames");
  }
  ResolvedTask r;
  r.frames = task.frames;
  r.init_position = task.origin(skel);
  r.init_heading = task.init_heading;
  auto check_frame = [&](int f) {
    if (f < 0 || f >= task.frames) {
      throw Error(ErrorCode::FrameOutOfRange,
                  "frame " + std::to_string(f) + " outside [0, " + std::to_string(task.frames) + ")");
    }
  };
  for (const auto& o : task.observations.entries) {
    check_frame(o.frame);
    r.targets.push_back({resolve_reference(skel, catalog, o.reference), o.frame, o.target});
  }
  for (const auto& c : task.plan.triples) {
    check_frame(c.frame);
    if (c.a == c.b) {
      throw Error(ErrorCode::SchemaError, "contact triple pairs '" + c.a + "' with itself");
    }
    r.contacts.push_back({resolve_reference(skel, catalog, c.a), resolve_reference(skel, catalog, c.b), c.frame});
  }
  return r;
}

double loss_lk(const FeatureMatrix& xT, FeatureMatrix* grad, double scale) {
  const double n = static_cast<double>(xT.rows());
  if (grad) {
    *grad += (2.0 * scale / n) * xT;
  }
  return xT.squaredNorm() / n;
}

namespace {

FeatureMatrix pool_rows(const FeatureMatrix& x, int s) {
  const int m = static_cast<int>(x.rows()) / s;
  FeatureMatrix y = FeatureMatrix::Zero(m, x.cols());
  for (int i = 0; i < m; ++i) {
    for (int k = 0; k < s; ++k) {
      y.row(i) += x.row(i * s + k);
    }
  }
  return y / s;
}

void add_sign_l1(const Vec3& e, double w, Vec3& out) {
  for (int a = 0; a < 3; ++a) {
    out[a] += e[a] > 0 ? w : (e[a] < 0 ? -w : 0.0);
  }
}

/// Adds dL/dp and dL/dR for a loss gradient g on p + R * offset.
void add_reference_grad(WorldGradient& grad, int frame, const Reference& ref, const Vec3& g) {
  grad.positions[frame][ref.joint] += g;
  if (!ref.offset.isZero(0.0)) {
    grad.rotations[frame][ref.joint] += g * ref.offset.transpose();
  }
}

} // namespace

double loss_decorr(const FeatureMatrix& xT, FeatureMatrix* grad, double scale) {
  const double D = static_cast<double>(xT.cols());
  double loss = 0.0;
  for (int s : {1, 2, 4}) {
    const int m = static_cast<int>(xT.rows()) / s;
    if (m < 2) {
      continue;
    }
    const FeatureMatrix y = pool_rows(xT, s);
    const double num = (y.topRows(m - 1).cwiseProduct(y.bottomRows(m - 1))).sum() / (D * (m - 1));
    const double den = y.squaredNorm() / (D * m);
    if (den <= 0.0) {
      continue;
    }
    const double r = num / den;
    loss += r * r;
    if (grad) {
      // dr/dy = dnum/dy / den - r / den * dden/dy
      FeatureMatrix dnum = FeatureMatrix::Zero(m, xT.cols());
      dnum.topRows(m - 1) += y.bottomRows(m - 1);
      dnum.bottomRows(m - 1) += y.topRows(m - 1);
      dnum /= D * (m - 1);
      const FeatureMatrix dr = dnum / den - (r / den) * (2.0 / (D * m)) * y;
      const FeatureMatrix dy = (2.0 * r * scale / s) * dr;
      for (int i = 0; i < m; ++i) {
        for (int k = 0; k < s; ++k) {
          grad->row(i * s + k) += dy.row(i);
        }
      }
    }
  }
  const double count = static_cast<double>(xT.size());
  const double mean = xT.sum() / count;
  const double var = (xT.array() - mean).square().sum() / count;
  loss += mean * mean + (var - 1.0) * (var - 1.0);
  if (grad) {
    grad->array() += scale * (2.0 * mean / count + 2.0 * (var - 1.0) * 2.0 * (xT.array() - mean) / count);
  }
  return loss;
}

double loss_ch(const SkeletonSpec& skel, const WorldMotion& m, WorldGradient* grad, double scale) {
  const int n = static_cast<int>(m.frames.size());
  if (n < 2) {
    return 0.0;
  }
  double sum = 0.0;
  for (int i = 0; i + 1 < n; ++i) {
    for (int k = 0; k < 4; ++k) {
      const int j = skel.foot_joints[k];
      const double z = m.frames[i].positions[j].z();
      const double f = m.contacts(i, k);
      sum += std::abs(z * f);
      if (grad) {
        const double w = scale / (n - 1);
        const double sz = z > 0 ? 1.0 : (z < 0 ? -1.0 : 0.0);
        grad->positions[i][j].z() += w * f * sz;
        grad->contacts(i, k) += w * std::abs(z);
      }
    }
  }
  return sum / (n - 1);
}

double loss_foot_skate(const SkeletonSpec& skel, const WorldMotion& m, WorldGradient* grad, double scale) {
  const int n = static_cast<int>(m.frames.size());
  if (n < 2) {
    return 0.0;
  }
  double sum = 0.0;
  for (int i = 0; i + 1 < n; ++i) {
    for (int k = 0; k < 4; ++k) {
      const int j = skel.foot_joints[k];
      const Vec3 dp = m.frames[i + 1].positions[j] - m.frames[i].positions[j];
      const double f = m.contacts(i, k);
      sum += (dp * f).squaredNorm();
      if (grad) {
        const double w = scale / (n - 1);
        const Vec3 g = (2.0 * w * f * f) * dp;
        grad->positions[i + 1][j] += g;
        grad->positions[i][j] -= g;
        grad->contacts(i, k) += 2.0 * w * f * dp.squaredNorm();
      }
    }
  }
  return sum / (n - 1);
}

double loss_close(const ResolvedTask& task, const WorldMotion& m, WorldGradient* grad, double scale) {
  if (task.targets.empty()) {
    throw Error(ErrorCode::EmptyObservationSet, "loss_close needs at least one observation");
  }
  const double inv = 1.0 / static_cast<double>(task.targets.size());
  double sum = 0.0;
  for (const auto& t : task.targets) {
    const Vec3 e = reference_position(m.frames[t.frame], t.ref) - t.target;
    sum += e.lpNorm<1>();
    if (grad) {
      Vec3 g = Vec3::Zero();
      add_sign_l1(e, scale * inv, g);
      add_reference_grad(*grad, t.frame, t.ref, g);
    }
  }
  return sum * inv;
}

double loss_contact(const ResolvedTask& task, const WorldMotion& m, WorldGradient* grad, double scale) {
  if (task.contacts.empty()) {
    return 0.0;
  }
  const double inv = 1.0 / static_cast<double>(task.contacts.size());
  double sum = 0.0;
  for (const auto& c : task.contacts) {
    const Vec3 e = reference_position(m.frames[c.frame], c.a) - reference_position(m.frames[c.frame], c.b);
    sum += e.lpNorm<1>();
    if (grad) {
      Vec3 g = Vec3::Zero();
      add_sign_l1(e, scale * inv, g);
      add_reference_grad(*grad, c.frame, c.a, g);
      add_reference_grad(*grad, c.frame, c.b, -g);
    }
  }
  return sum * inv;
}

double loss_close(const SkeletonSpec& skel, const VertexCatalog& catalog, const FeatureMatrix& x0,
                  const DnoTask& task) {
  const ResolvedTask r = resolve_task(skel, catalog, task);
  return loss_close(r, decode_world(skel, x0, r.init_position, r.init_heading));
}

double loss_contact(const SkeletonSpec& skel, const VertexCatalog& catalog, const FeatureMatrix& x0,
                    const DnoTask& task) {
  const ResolvedTask r = resolve_task(skel, catalog, task);
  return loss_contact(r, decode_world(skel, x0, r.init_position, r.init_heading));
}

DnoLosses dno_losses(const SkeletonSpec& skel, const ResolvedTask& task, const OptStage& w, const FeatureMatrix& xT,
                     const FeatureMatrix& x0, FeatureMatrix* d_x0, FeatureMatrix* d_xT) {
  const int n = static_cast<int>(x0.rows());
  if (n != task.frames) {
    throw Error(ErrorCode::ShapeMismatch, "motion length does not match the task");
  }
  const WorldMotion m = decode_world(skel, x0, task.init_position, task.init_heading);
  WorldGradient g;
  WorldGradient* gp = nullptr;
  if (d_x0) {
    g = WorldGradient(n, static_cast<int>(skel.joint_count()));
    gp = &g;
  }
  DnoLosses L;
  L.ch = loss_ch(skel, m, gp, w.lambda_ch);
  L.foot = loss_foot_skate(skel, m, gp, w.lambda_foot);
  if (!task.targets.empty()) {
    L.close = loss_close(task, m, gp, w.lambda_close);
  }
  L.contact = loss_contact(task, m, gp, w.contact_weight());
  if (d_xT) {
    d_xT->setZero(xT.rows(), xT.cols());
  }
  const double lk_scale = lk_weight_scale(static_cast<int>(xT.cols()));
  L.lk = loss_lk(xT, d_xT, w.lambda_lk * lk_scale);
  L.decorr = loss_decorr(xT, d_xT, w.lambda_decorr);
  L.total = w.lambda_lk * lk_scale * L.lk + w.lambda_foot * L.foot + w.lambda_ch * L.ch + w.lambda_close * L.close +
            w.contact_weight() * L.contact + w.lambda_decorr * L.decorr;
  if (d_x0) {
    d_x0->setZero(n, x0.cols());
    decode_world_backward(skel, x0, m, g, *d_x0);
  }
  return L;
}

template <typename S>
DnoLosses dno_objective(const DenoiserT<S>& model, const NoiseSchedule& schedule, const std::vector<int>& steps,
                        const SkeletonSpec& skel, const ResolvedTask& task, const OptStage& weights,
                        const FeatureMatrix& xT, FeatureMatrix* grad, FeatureMatrix* x0_out) {
  OdeTrace<S> trace;
  const RowMatrix<S> xs = xT.cast<S>();
  const FeatureMatrix x0 = ode_sample(model, schedule, xs, steps, grad ? &trace : nullptr).template cast<double>();
  FeatureMatrix d_x0;
  FeatureMatrix d_xT;
  const DnoLosses L = dno_losses(skel, task, weights, xT, x0, grad ? &d_x0 : nullptr, grad ? &d_xT : nullptr);
  if (grad) {
    const RowMatrix<S> d_chain = ode_backward(model, schedule, trace, RowMatrix<S>(d_x0.cast<S>()));
    *grad = d_xT + d_chain.template cast<double>();
  }
  if (x0_out) {
    *x0_out = x0;
  }
  return L;
}

template <typename S>
DnoResult optimize_noise(const DenoiserT<S>& model, const NoiseSchedule& schedule, const SkeletonSpec& skel,
                         const VertexCatalog& catalog, const DnoTask& task, const std::vector<OptStage>& stages,
                         std::uint64_t seed, const DnoOptions& options) {
  if (task.observations.empty() && task.plan.empty()) {
    throw Error(ErrorCode::NoActiveConstraint, "task defines neither observations nor a contact plan");
  }
  if (stages.empty()) {
    throw Error(ErrorCode::InvalidConfig, "at least one optimization stage is required");
  }
  for (const auto& s : stages) {
    s.validate();
  }
  const ResolvedTask resolved = resolve_task(skel, catalog, task);
  const std::vector<int> steps = ddim_steps(schedule.T, options.ddim_count);

  DnoResult out;
  out.xT.resize(task.frames, model.config().input_dim);
  Rng rng = make_rng(seed, 0);
  fill_normal(out.xT, rng);

  AdamConfig ac;
  ac.lr = stages.front().lr;
  Adam<double> opt(ac, out.xT.size());
  FeatureMatrix grad;
  int iteration = 0;
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const OptStage& st = stages[si];
    for (int e = 0; e < st.epochs; ++e) {
      opt.config().lr = st.cosine_decay ? 0.5 * st.lr * (1.0 + std::cos(M_PI * e / st.epochs)) : st.lr;
      DnoIteration it;
      it.iteration = iteration;
      it.stage = static_cast<int>(si);
      try {
        it.losses = dno_objective(model, schedule, steps, skel, resolved, st, out.xT, &grad);
      } catch (const Error& err) {
        if (err.code() != ErrorCode::DegenerateRotation) {
          throw;
        }
        throw DnoAborted(std::string("decoding failed at iteration ") + std::to_string(iteration) + ": " + err.what(),
                         std::move(out.trace));
      }
      it.grad_norm = grad.norm();
      if (!std::isfinite(it.grad_norm) || !std::isfinite(it.losses.total)) {
        out.trace.push_back(it);
        throw DnoAborted("non-finite gradient at iteration " + std::to_string(iteration), std::move(out.trace));
      }
      clip_grad_norm(grad, options.grad_clip);
      opt.step(out.xT, grad);
      out.trace.push_back(it);
      if (options.on_iteration) {
        options.on_iteration(it);
      }
      ++iteration;
    }
  }
  out.final_losses =
      dno_objective(model, schedule, steps, skel, resolved, stages.back(), out.xT, nullptr, &out.x0);
  return out;
}

GradCheckResult dno_gradient_check(const SkeletonSpec& skel, const VertexCatalog& catalog, std::uint64_t seed,
                                   int coordinates, double step, int frames) {
  const auto start = std::chrono::steady_clock::now();
  DenoiserConfig c;
  c.d_model = 16;
  c.layers = 2;
  c.heads = 2;
  c.ff = 32;
  c.time_dim = 16;
  c.input_dim = feature_dim(static_cast<int>(skel.joint_count()));
  c.max_len = frames;
  const DenoiserD model = DenoiserD::init(c, seed);
  const NoiseSchedule schedule = make_schedule(300);
  const std::vector<int> steps = ddim_steps(schedule.T, 10);

  Rng rng = make_rng(seed, 1);
  std::uniform_real_distribution<double> offset(-0.4, 0.4);
  std::uniform_int_distribution<int> frame(0, frames - 1);
  DnoTask task;
  task.frames = frames;
  for (const std::string name : {"pelvis", "head", "left_wrist", "right_wrist", "left_ankle", "right_ankle"}) {
    if (skel.find_joint(name) < 0) {
      continue;
    }
    for (int k = 0; k < 3; ++k) {
      task.observations.entries.push_back(
          {name, frame(rng), Vec3(offset(rng), offset(rng), skel.standing_height + offset(rng))});
    }
  }
  const auto labels = catalog.labels();
  if (labels.size() >= 2) {
    std::uniform_int_distribution<std::size_t> pick(0, labels.size() - 1);
    const std::size_t a = pick(rng);
    const std::size_t b = (a + 1 + pick(rng) % (labels.size() - 1)) % labels.size();
    task.plan.triples.push_back({labels[a], labels[b], frame(rng)});
  }
  const ResolvedTask resolved = resolve_task(skel, catalog, task);
  OptStage weights;
  weights.lambda_contact = 0.7;

  FeatureMatrix xT(frames, c.input_dim);
  fill_normal(xT, rng);
  FeatureMatrix grad;
  dno_objective(model, schedule, steps, skel, resolved, weights, xT, &grad);

  GradCheckResult out;
  std::uniform_int_distribution<int> row(0, frames - 1);
  std::uniform_int_distribution<int> col(0, c.input_dim - 1);
  for (int k = 0; k < coordinates; ++k) {
    const int r = row(rng);
    const int q = col(rng);
    FeatureMatrix xp = xT;
    FeatureMatrix xm = xT;
    xp(r, q) += step;
    xm(r, q) -= step;
    const double fd = (dno_objective(model, schedule, steps, skel, resolved, weights, xp).total -
                       dno_objective(model, schedule, steps, skel, resolved, weights, xm).total) /
                      (2.0 * step);
    const double denom = std::max({std::abs(fd), std::abs(grad(r, q)), 1e-8});
    out.max_relative_error = std::max(out.max_relative_error, std::abs(fd - grad(r, q)) / denom);
    ++out.coordinates;
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

void write_trace_csv(const std::vector<DnoIteration>& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw Error(ErrorCode::IoError, "cannot write " + path.string());
  }
  out << "iteration,stage,lk,foot,ch,close,contact,decorr,total,grad_norm\n" << std::setprecision(9);
  for (const auto& t : trace) {
    const auto& l = t.losses;
    out << t.iteration << ',' << t.stage << ',' << l.lk << ',' << l.foot << ',' << l.ch << ',' << l.close << ','
        << l.contact << ',' << l.decorr << ',' << l.total << ',' << t.grad_norm << '\n';
  }
}

#define FUSION_INSTANTIATE(S)                                                                                       \
  template DnoLosses dno_objective(const DenoiserT<S>&, const NoiseSchedule&, const std::vector<int>&,              \
                                   const SkeletonSpec&, const ResolvedTask&, const OptStage&, const FeatureMatrix&, \
                                   FeatureMatrix*, FeatureMatrix*);                                                 \
  template DnoResult optimize_noise(const DenoiserT<S>&, const NoiseSchedule&, const SkeletonSpec&,                 \
                                    const VertexCatalog&, const DnoTask&, const std::vector<OptStage>&,             \
                                    std::uint64_t, const DnoOptions&);

FUSION_INSTANTIATE(float)
FUSION_INSTANTIATE(double)

#undef FUSION_INSTANTIATE

} // namespace fusion
