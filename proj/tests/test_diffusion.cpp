#include "doctest.h"

#include "fusion/diffusion.h"
#include "generators.h"

#include <cstring>

using namespace fusion;

namespace {

DenoiserD tiny_model(std::uint64_t seed, int T = 100) {
  DenoiserConfig c;
  c.d_model = 8;
  c.layers = 1;
  c.heads = 2;
  c.ff = 16;
  c.input_dim = 10;
  c.max_len = 16;
  c.time_dim = 8;
  c.diffusion_steps = T;
  return DenoiserD::init(c, seed);
}

} // namespace

TEST_CASE("linear schedule matches a direct recomputation") {
  for (int T : {50, 300, 1000}) {
    const NoiseSchedule s = make_schedule(T);
    const double scale = 1000.0 / T;
    double ab = 1.0;
    CHECK(s.alpha_bar[0] == 1.0);
    for (int t = 1; t <= T; ++t) {
      const double beta = 1e-4 * scale + (2e-2 * scale - 1e-4 * scale) * (t - 1) / std::max(1, T - 1);
      ab *= 1.0 - beta;
      CHECK(s.beta[t] == doctest::Approx(beta).epsilon(1e-12));
      CHECK(s.alpha_bar[t] == doctest::Approx(ab).epsilon(1e-10));
      CHECK(s.alpha[t] * s.alpha_bar[t - 1] == doctest::Approx(s.alpha_bar[t]).epsilon(1e-12));
      CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    }
    CHECK(s.alpha_bar[T] < 1e-3);
  }
  const NoiseSchedule c = make_schedule(300, ScheduleKind::Cosine);
  for (int t = 1; t <= 300; ++t) {
    CHECK(c.alpha_bar[t] < c.alpha_bar[t - 1]);
    CHECK(c.beta[t] > 0.0);
  }
  CHECK_THROWS_AS(make_schedule(0), Error);
  CHECK(parse_schedule_kind("cosine") == ScheduleKind::Cosine);
  CHECK_THROWS_AS(parse_schedule_kind("sigmoid"), Error);
}

TEST_CASE("q_sample at t = 0 is the identity") {
  const NoiseSchedule s = make_schedule(300);
  Rng rng = make_rng(41);
  for (int k = 0; k < 20; ++k) {
    const FeatureMatrix x0 = gen::matrix(rng, 8, 10);
    const FeatureMatrix eps = gen::matrix(rng, 8, 10);
    CHECK(q_sample(s, x0, 0, eps) == x0);
    const int t = 1 + static_cast<int>(rng() % 300);
    const FeatureMatrix xt = q_sample(s, x0, t, eps);
    const FeatureMatrix want = std::sqrt(s.alpha_bar[t]) * x0 + std::sqrt(1.0 - s.alpha_bar[t]) * eps;
    CHECK((xt - want).cwiseAbs().maxCoeff() < 1e-14);
  }
  const FeatureMatrix x0 = FeatureMatrix::Zero(3, 3);
  CHECK_THROWS_AS(q_sample(s, x0, 301, x0), Error);
  CHECK_THROWS_AS(q_sample(s, x0, -1, x0), Error);
}

TEST_CASE("posterior coefficients and variance match their closed forms") {
  const NoiseSchedule s = make_schedule(200);
  for (int t = 1; t <= 200; ++t) {
    const double ab = s.alpha_bar[t], abp = s.alpha_bar[t - 1];
    const PosteriorCoefficients pc = posterior_coefficients(s, t);
    CHECK(pc.c0 == doctest::Approx(std::sqrt(abp) * s.beta[t] / (1 - ab)).epsilon(1e-12));
    CHECK(pc.ct == doctest::Approx(std::sqrt(s.alpha[t]) * (1 - abp) / (1 - ab)).epsilon(1e-12));
    CHECK(s.posterior_variance(t) == doctest::Approx((1 - abp) / (1 - ab) * s.beta[t]).epsilon(1e-12));
  }
  CHECK(s.posterior_variance(1) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("deterministic DDIM step follows the closed form") {
  const NoiseSchedule s = make_schedule(100);
  const DenoiserD model = tiny_model(1);
  Rng rng = make_rng(42);
  for (int k = 0; k < 20; ++k) {
    const int t = 2 + static_cast<int>(rng() % 99);
    const int tn = static_cast<int>(rng() % t);
    const FeatureMatrix x = gen::matrix(rng, 6, 10);
    const FeatureMatrix x0 = model.forward(x, t);
    const double ab = s.alpha_bar[t], abn = s.alpha_bar[tn];
    const FeatureMatrix eps = (x - std::sqrt(ab) * x0) / std::sqrt(1 - ab);
    const FeatureMatrix want = std::sqrt(abn) * x0 + std::sqrt(1 - abn) * eps;
    const FeatureMatrix got = ddim_step(model, s, x, t, tn);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
    const DdimCoefficients c = ddim_coefficients(s, t, tn);
    CHECK((c.a * x0 + c.b * x - want).cwiseAbs().maxCoeff() < 1e-12);
  }
  const FeatureMatrix x = FeatureMatrix::Zero(4, 10);
  CHECK_THROWS_AS(ddim_step(model, s, x, 5, 5), Error);
  CHECK_THROWS_AS(ddim_step(model, s, x, 5, 2, 1.0), Error); // stochastic without noise
}

TEST_CASE("stochastic DDIM with eta = 1 has the posterior variance") {
  const NoiseSchedule s = make_schedule(100);
  for (int t = 2; t <= 100; ++t) {
    const double ab = s.alpha_bar[t], abp = s.alpha_bar[t - 1];
    const double sigma2 = (1 - abp) / (1 - ab) * (1 - ab / abp);
    CHECK(sigma2 == doctest::Approx(s.posterior_variance(t)).epsilon(1e-9));
  }
}

TEST_CASE("DDIM step lists") {
  const std::vector<int> want = {300, 270, 240, 210, 180, 150, 120, 90, 60, 30, 0};
  CHECK(ddim_steps(300, 10) == want);
  CHECK(ddim_steps(300, 1) == std::vector<int>{300, 0});
  CHECK_THROWS_AS(ddim_steps(10, 11), Error);
  const NoiseSchedule s = make_schedule(300);
  CHECK_NOTHROW(validate_steps(s, want));
  CHECK_THROWS_AS(validate_steps(s, {300, 300, 0}), Error);
  CHECK_THROWS_AS(validate_steps(s, {301, 0}), Error);
  CHECK_THROWS_AS(validate_steps(s, {300, 10}), Error);
}

TEST_CASE("ode_sample is bit-deterministic") {
  const NoiseSchedule s = make_schedule(100);
  const Denoiser model = Denoiser::init(tiny_model(2).config(), 2);
  Rng rng = make_rng(43);
  const RowMatrix<float> xT = gen::matrix(rng, 12, 10).cast<float>();
  const auto steps = ddim_steps(100, 10);
  const RowMatrix<float> a = ode_sample(model, s, xT, steps);
  const RowMatrix<float> b = ode_sample(model, s, xT, steps);
  OdeTrace<float> trace;
  const RowMatrix<float> c = ode_sample(model, s, xT, steps, &trace);
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0);
  CHECK(std::memcmp(a.data(), c.data(), sizeof(float) * a.size()) == 0);
  CHECK(trace.caches.size() == 10);
}

TEST_CASE("ode_sample chains ddim_step") {
  const NoiseSchedule s = make_schedule(100);
  const DenoiserD model = tiny_model(3);
  Rng rng = make_rng(44);
  const FeatureMatrix xT = gen::matrix(rng, 5, 10);
  const auto steps = ddim_steps(100, 5);
  FeatureMatrix x = xT;
  for (std::size_t k = 0; k + 1 < steps.size(); ++k) {
    x = ddim_step(model, s, x, steps[k], steps[k + 1]);
  }
  CHECK((ode_sample(model, s, xT, steps) - x).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("ode_backward matches finite differences") {
  const NoiseSchedule s = make_schedule(100);
  const DenoiserD model = tiny_model(4);
  Rng rng = make_rng(45);
  FeatureMatrix xT = gen::matrix(rng, 6, 10);
  const FeatureMatrix w = gen::matrix(rng, 6, 10);
  const auto steps = ddim_steps(100, 10);
  OdeTrace<double> trace;
  ode_sample(model, s, xT, steps, &trace);
  const FeatureMatrix g = ode_backward(model, s, trace, w);
  for (int k = 0; k < 30; ++k) {
    const int r = static_cast<int>(rng() % 6), c = static_cast<int>(rng() % 10);
    const double keep = xT(r, c);
    xT(r, c) = keep + 1e-6;
    const double up = ode_sample(model, s, xT, steps).cwiseProduct(w).sum();
    xT(r, c) = keep - 1e-6;
    const double down = ode_sample(model, s, xT, steps).cwiseProduct(w).sum();
    xT(r, c) = keep;
    const double fd = (up - down) / 2e-6;
    CHECK(std::abs(g(r, c) - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("ancestral sampling is seeded") {
  const NoiseSchedule s = make_schedule(20);
  const Denoiser model = Denoiser::init(tiny_model(5, 20).config(), 5);
  Rng a = make_rng(46), b = make_rng(46), c = make_rng(47);
  const auto xa = ancestral_sample(model, s, 8, a);
  const auto xb = ancestral_sample(model, s, 8, b);
  const auto xc = ancestral_sample(model, s, 8, c);
  CHECK(xa == xb);
  CHECK(xa != xc);
  CHECK(xa.allFinite());
}
