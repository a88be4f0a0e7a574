#include "doctest.h"

#include "fusion/dno.h"
#include "generators.h"
#include "oracles.h"

using namespace fusion;

namespace {

struct Case {
  FeatureMatrix x;
  DnoTask task;
};

Case random_case(Rng& rng, const SkeletonSpec& skel, const VertexCatalog& cat) {
  const int n = 4 + static_cast<int>(rng() % 10);
  const FeatureLayout layout(skel);
  Case c;
  c.x = encode(skel, gen::clip(rng, skel, n)).data + gen::matrix(rng, n, layout.dim(), 0.05);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < 4; ++k) {
      c.x(i, layout.contacts() + k) = gen::uniform(rng, -0.5, 1.5);
    }
  }
  c.task.frames = n;
  c.task.init_position = Vec3(gen::uniform(rng, -1, 1), gen::uniform(rng, -1, 1), gen::uniform(rng, 0.5, 1.2));
  c.task.init_heading = rot_z(gen::uniform(rng, -M_PI, M_PI));
  const auto labels = cat.labels();
  auto any_ref = [&]() -> std::string {
    if (rng() % 2) {
      return skel.joints[rng() % skel.joint_count()].name;
    }
    return labels[rng() % labels.size()];
  };
  const int obs = 1 + static_cast<int>(rng() % 6);
  for (int k = 0; k < obs; ++k) {
    c.task.observations.entries.push_back(
        {any_ref(), static_cast<int>(rng() % n), Vec3(gen::normal(rng), gen::normal(rng), gen::normal(rng))});
  }
  const int triples = static_cast<int>(rng() % 4);
  for (int k = 0; k < triples; ++k) {
    std::string a = any_ref(), b = any_ref();
    while (b == a) {
      b = any_ref();
    }
    c.task.plan.triples.push_back({a, b, static_cast<int>(rng() % n)});
  }
  return c;
}

bool close_to(double got, double want) {
  return std::abs(got - want) <= 1e-9 * std::max(1.0, std::abs(want));
}

DenoiserD tiny_model(int dim, std::uint64_t seed) {
  DenoiserConfig c;
  c.d_model = 16;
  c.layers = 1;
  c.heads = 2;
  c.ff = 32;
  c.input_dim = dim;
  c.max_len = 16;
  c.time_dim = 16;
  c.diffusion_steps = 100;
  return DenoiserD::init(c, seed);
}

} // namespace

TEST_CASE("noise regularizers equal brute-force recomputation") {
  Rng rng = make_rng(61);
  for (int k = 0; k < 50; ++k) {
    const int n = 1 + static_cast<int>(rng() % 40);
    const int d = 1 + static_cast<int>(rng() % 30);
    const FeatureMatrix x = gen::matrix(rng, n, d, gen::uniform(rng, 0.2, 2.0)).array() + gen::uniform(rng, -1, 1);
    const double lk = loss_lk(x);
    const double dc = loss_decorr(x);
    CHECK(close_to(lk, oracle::lk(x)));
    CHECK(close_to(dc, oracle::decorr(x)));
    CHECK(lk >= 0.0);
    CHECK(dc >= 0.0);
  }
}

TEST_CASE("task losses equal brute-force recomputation") {
  const SkeletonSpec skel = make_desk_skeleton();
  const VertexCatalog cat = make_desk_catalog(skel);
  Rng rng = make_rng(62);
  for (int k = 0; k < 50; ++k) {
    const Case c = random_case(rng, skel, cat);
    const ResolvedTask task = resolve_task(skel, cat, c.task);
    const WorldMotion m = decode_world(skel, c.x, task.init_position, task.init_heading);
    const oracle::Frames f = oracle::decode(skel, c.x, task.init_position, task.init_heading);

    const double ch = loss_ch(skel, m);
    const double skate = loss_foot_skate(skel, m);
    const double close = loss_close(task, m);
    const double contact = loss_contact(task, m);
    CHECK(close_to(ch, oracle::ch(skel, f)));
    CHECK(close_to(skate, oracle::foot_skate(skel, f)));
    CHECK(close_to(close, oracle::close(skel, cat, f, c.task.observations)));
    CHECK(close_to(contact, oracle::contact(skel, cat, f, c.task.plan)));
    CHECK(close_to(loss_close(skel, cat, c.x, c.task), close));
    CHECK(close_to(loss_contact(skel, cat, c.x, c.task), contact));
    CHECK(ch >= 0.0);
    CHECK(skate >= 0.0);
    CHECK(close >= 0.0);
    CHECK(contact >= 0.0);
  }
}

TEST_CASE("weighted total combines the terms") {
  const SkeletonSpec skel = make_desk_skeleton();
  const VertexCatalog cat = make_desk_catalog(skel);
  Rng rng = make_rng(63);
  for (int k = 0; k < 20; ++k) {
    const Case c = random_case(rng, skel, cat);
    const ResolvedTask task = resolve_task(skel, cat, c.task);
    const FeatureMatrix xT = gen::matrix(rng, static_cast<int>(c.x.rows()), static_cast<int>(c.x.cols()));
    OptStage w;
    w.lambda_lk = gen::uniform(rng, 0, 1);
    w.lambda_foot = gen::uniform(rng, 0, 1);
    w.lambda_ch = gen::uniform(rng, 0, 1);
    w.lambda_close = gen::uniform(rng, 0, 1);
    w.lambda_contact = k % 2 ? -1.0 : gen::uniform(rng, 0, 1);
    w.lambda_decorr = gen::uniform(rng, 0, 1);
    const DnoLosses l = dno_losses(skel, task, w, xT, c.x);
    const double total = w.lambda_lk * l.lk / static_cast<double>(xT.cols()) + w.lambda_foot * l.foot + w.lambda_ch * l.ch +
                         w.lambda_close * l.close + w.contact_weight() * l.contact + w.lambda_decorr * l.decorr;
    CHECK(close_to(l.total, total));
    CHECK(close_to(l.lk, oracle::lk(xT)));
    CHECK(close_to(l.decorr, oracle::decorr(xT)));
  }
  OptStage inherit;
  inherit.lambda_close = 0.3;
  CHECK(inherit.contact_weight() == 0.3);
  inherit.lambda_contact = 0.0;
  CHECK(inherit.contact_weight() == 0.0);
}

TEST_CASE("loss gradients match finite differences") {
  const SkeletonSpec skel = make_desk_skeleton();
  const VertexCatalog cat = make_desk_catalog(skel);
  Rng rng = make_rng(64);
  Case c = random_case(rng, skel, cat);
  while (c.task.plan.empty()) {
    c = random_case(rng, skel, cat);
  }
  const ResolvedTask task = resolve_task(skel, cat, c.task);
  FeatureMatrix xT = gen::matrix(rng, static_cast<int>(c.x.rows()), static_cast<int>(c.x.cols()));
  const OptStage w;
  FeatureMatrix dx0 = FeatureMatrix::Zero(c.x.rows(), c.x.cols());
  FeatureMatrix dxT = FeatureMatrix::Zero(c.x.rows(), c.x.cols());
  dno_losses(skel, task, w, xT, c.x, &dx0, &dxT);
  auto check = [&](FeatureMatrix& m, const FeatureMatrix& g) {
    for (int k = 0; k < 40; ++k) {
      const int r = static_cast<int>(rng() % m.rows()), col = static_cast<int>(rng() % m.cols());
      const double keep = m(r, col);
      m(r, col) = keep + 1e-7;
      const double up = dno_losses(skel, task, w, xT, c.x).total;
      m(r, col) = keep - 1e-7;
      const double down = dno_losses(skel, task, w, xT, c.x).total;
      m(r, col) = keep;
      const double fd = (up - down) / 2e-7;
      CHECK(std::abs(g(r, col) - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
    }
  };
  check(c.x, dx0);
  check(xT, dxT);
}

TEST_CASE("gradient through the sampler matches central differences") {
  const SkeletonSpec skel = make_desk_skeleton();
  const VertexCatalog cat = make_desk_catalog(skel);
  const GradCheckResult r = dno_gradient_check(skel, cat, 3);
  CHECK(r.coordinates == 20);
  CHECK(r.max_relative_error < 1e-3);
}

TEST_CASE("references resolve joints before catalog labels") {
  const SkeletonSpec skel = make_desk_skeleton();
  const VertexCatalog cat = make_desk_catalog(skel);
  const Reference j = resolve_reference(skel, cat, "left_wrist");
  CHECK(j.joint == skel.joint_index("left_wrist"));
  CHECK(j.offset == Vec3::Zero());
  const Reference v = resolve_reference(skel, cat, "left_palm");
  CHECK(v.joint == cat.at("left_palm").joint);
  CHECK(v.offset == cat.at("left_palm").offset);
  try {
    resolve_reference(skel, cat, "left_plam");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UnresolvableReference);
  }
}

TEST_CASE("task resolution validates frames and triples") {
  const SkeletonSpec skel = make_desk_skeleton();
  const VertexCatalog cat = make_desk_catalog(skel);
  auto code_of = [&](const DnoTask& t) {
    try {
      resolve_task(skel, cat, t);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::IoError;
  };
  DnoTask t;
  t.frames = 20;
  t.observations.entries.push_back({"pelvis", 20, Vec3::Zero()});
  CHECK(code_of(t) == ErrorCode::FrameOutOfRange);
  t.observations.entries[0].frame = 19;
  CHECK(code_of(t) == ErrorCode::IoError);
  t.plan.triples.push_back({"left_palm", "left_palm", 3});
  CHECK(code_of(t) == ErrorCode::SchemaError);
  t.plan.triples[0].b = "right_palm";
  t.plan.triples[0].frame = -1;
  CHECK(code_of(t) == ErrorCode::FrameOutOfRange);
  t.frames = 1;
  t.plan.triples.clear();
  t.observations.entries[0].frame = 0;
  CHECK(code_of(t) == ErrorCode::TooShort);

  const ResolvedTask r = resolve_task(skel, cat, DnoTask{});
  CHECK(r.init_position == Vec3(0, 0, skel.standing_height));
  CHECK(r.init_heading == Mat3::Identity());

  DnoTask empty;
  CHECK_THROWS_AS(loss_close(resolve_task(skel, cat, empty), decode_world(skel, FeatureMatrix::Zero(60, 346),
                                                                           Vec3::Zero(), Mat3::Identity())),
                  Error);
}

TEST_CASE("stage schedules") {
  const auto d = default_stages();
  REQUIRE(d.size() == 2);
  CHECK(d[0].epochs == 800);
  CHECK(d[0].lambda_lk == 0.5);
  CHECK(d[0].lambda_foot == 0.5);
  CHECK(d[0].lambda_ch == 0.5);
  CHECK(d[0].lambda_close == 1.0);
  CHECK(d[1].epochs == 800);
  CHECK(d[1].lambda_lk == 0.1);
  CHECK(d[1].lambda_foot == 0.1);
  CHECK(d[1].lambda_ch == 0.1);
  CHECK(d[1].lambda_close == 1.0);
  const auto back = stages_from_json(stages_to_json(d));
  REQUIRE(back.size() == 2);
  CHECK(back[1].lambda_lk == 0.1);
  CHECK(stages_from_json(R"([{"epochs": 5}])")[0].lambda_close == 1.0);
  CHECK(stages_from_json(R"({"stages": [{"epochs": 5, "lr": 0.01}]})")[0].lr == 0.01);
  CHECK_THROWS_AS(stages_from_json(R"([{"epoch": 5}])"), Error);
  CHECK_THROWS_AS(stages_from_json(R"([{"epochs": -1}])"), Error);
  CHECK_THROWS_AS(stages_from_json("[]"), Error);
  CHECK(d[0].cosine_decay);
  CHECK_FALSE(stages_from_json(R"([{"epochs": 5, "lr_decay": "none"}])")[0].cosine_decay);
  CHECK_THROWS_AS(stages_from_json(R"([{"epochs": 5, "lr_decay": "step"}])"), Error);
}

TEST_CASE("noise optimization pulls a tiny model toward its targets") {
  const SkeletonSpec skel = make_desk_skeleton();
  const VertexCatalog cat = make_desk_catalog(skel);
  const DenoiserD model = tiny_model(346, 7);
  const NoiseSchedule s = make_schedule(100);
  DnoTask task;
  task.frames = 8;
  for (int i = 0; i < 8; i += 2) {
    task.observations.entries.push_back({"pelvis", i, Vec3(0.05 * i, 0.1 * i, 0.9)});
  }
  std::vector<OptStage> stages(1);
  stages[0].epochs = 40;
  DnoOptions opts;
  opts.ddim_count = 5;
  int calls = 0;
  opts.on_iteration = [&](const DnoIteration&) { ++calls; };
  const DnoResult r = optimize_noise(model, s, skel, cat, task, stages, 11, opts);
  CHECK(calls == 40);
  REQUIRE(r.trace.size() == 40);
  CHECK(r.trace.back().losses.close < r.trace.front().losses.close);
  // seeded start
  const DnoResult again = optimize_noise(model, s, skel, cat, task, stages, 11, opts);
  CHECK(again.xT == r.xT);

  CHECK_THROWS_AS(optimize_noise(model, s, skel, cat, DnoTask{}, stages, 1, opts), Error);
}
