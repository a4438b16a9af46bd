#include <doctest.h>

#include <cmath>
#include <sstream>

#include "json.hpp"
#include "rbflow/errors.hpp"
#include "rbflow/estimators.hpp"
#include "rbflow/train.hpp"

using namespace rbflow;

namespace {

CrystalFlowConfig small_crystal() {
  CrystalFlowConfig c;
  c.reps = 2;
  c.channels = 16;
  c.blocks = 1;
  return c;
}

std::vector<PoseSet> crystal_batch(const ToyCrystal& model, Rng& rng, int n, double jitter) {
  std::vector<PoseSet> xs;
  for (int s = 0; s < n; ++s) {
    PoseSet ps = crystal_reference(model);
    for (std::size_t i = 1; i < ps.poses.size(); ++i)
      ps.poses[i].x0 += jitter * Vec3(standard_normal(rng), standard_normal(rng), standard_normal(rng));
    for (auto& p : ps.poses) p.q = UnitQuaternion::random(rng);
    xs.push_back(ps);
  }
  return xs;
}

Dataset tetra_data(int frames, std::uint64_t seed) {
  const BodyTemplate body = methane_template();
  McmcConfig mc;
  mc.n_frames = frames;
  mc.seed = seed;
  Dataset ds = mcmc_run(TetraTarget(TetraField{}, body, 0.01), PoseSet{body, {RigidPose{}}}, mc);
  ds.meta.kind = "tetra";
  ds.meta.temperature = 0.01;
  return ds;
}

}  // namespace

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 1000, 1e-3, 1e-5) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(cosine_lr(1000, 1000, 1e-3, 1e-5) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(cosine_lr(500, 1000, 1e-3, 1e-5) == doctest::Approx((1e-3 + 1e-5) / 2).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_lr(1001, 1000, 1e-3, 1e-5), ValidationError);
  TrainConfig c = TrainConfig::crystal_defaults();
  CHECK(c.lr_at(0) == doctest::Approx(1e-3));
  CHECK(c.lr_at(c.total_steps() - 1) == doctest::Approx(1e-5));
  for (long long s = 1; s < c.total_steps(); s += 97) CHECK(c.lr_at(s) <= c.lr_at(s - 1));
}

TEST_CASE("Adam steps") {
  nn::ParamStore store;
  store.add("a", Tensor::Constant(2, 3, 0.5));
  store.add("b", Tensor::Constant(1, 1, -1.0));
  AdamState st;
  std::vector<Tensor> g = {Tensor::Constant(2, 3, 0.3), Tensor::Constant(1, 1, -7.0)};
  adam_step(store, g, st, 1e-2);
  CHECK(store.all()[0].value(1, 2) == doctest::Approx(0.5 - 1e-2).epsilon(1e-9));
  CHECK(store.all()[1].value(0, 0) == doctest::Approx(-1.0 + 1e-2).epsilon(1e-9));
  // Zero gradients: no move at bias-corrected zero first moment, moments decay.
  nn::ParamStore s2;
  s2.add("a", Tensor::Constant(2, 2, 1.0));
  AdamState st2;
  adam_step(s2, {Tensor::Zero(2, 2)}, st2, 0.1);
  CHECK(s2.all()[0].value == Tensor::Constant(2, 2, 1.0));
  adam_step(store, {Tensor::Zero(2, 3), Tensor::Zero(1, 1)}, st, 1e-2);
  CHECK(st.m[0](0, 0) == doctest::Approx(0.9 * 0.1 * 0.3));
  CHECK(st.v[1](0, 0) == doctest::Approx(0.999 * 0.001 * 49.0));
  // Determinism.
  auto run = [] {
    nn::ParamStore s;
    s.add("x", Tensor::Constant(3, 1, 0.2));
    AdamState a;
    Rng rng(5);
    for (int i = 0; i < 50; ++i) {
      Tensor gr(3, 1);
      for (int k = 0; k < 3; ++k) gr(k, 0) = standard_normal(rng);
      adam_step(s, {gr}, a, 1e-3);
    }
    return Tensor(s.all()[0].value);
  };
  CHECK(run() == run());
}

TEST_CASE("NLL of the identity stack on base data is the base entropy") {
  TetraFlowConfig cfg;
  cfg.reps = 0;
  cfg.kappa = 0.0;
  auto stack = build_tetra_flow(cfg, 1);
  Rng rng(2);
  std::vector<UnitQuaternion> qs(20000);
  for (auto& q : qs) q = UnitQuaternion::random(rng);
  const auto batch = augment(qs, cfg.aux_dim, rng);
  Tape t(false);
  const double loss = nll_loss(t, *stack, batch).scalar();
  // Uniform S^3 has area 2 pi^2; the Gaussian part has sd of |z|^2/2 = 1.
  const double entropy = std::log(2.0 * M_PI * M_PI) + 0.5 * cfg.aux_dim * (1.0 + std::log(2.0 * M_PI));
  CHECK(std::abs(loss - entropy) < 3.0 / std::sqrt(20000.0));
  auto doubled = batch;
  doubled.insert(doubled.end(), batch.begin(), batch.end());
  Tape t2(false);
  CHECK(nll_loss(t2, *stack, doubled).scalar() == doctest::Approx(loss).epsilon(1e-14));
}

TEST_CASE("reverse KL identities") {
  CrystalParams p;
  ToyCrystal model(p);
  Rng rng(3);
  const auto base = crystal_batch(model, rng, 16, 0.3);

  CrystalFlowConfig id = small_crystal();
  id.reps = 0;
  auto identity = build_crystal_flow(id, p, 1);
  Tape t0(false);
  CHECK(std::abs(rkl_loss(t0, *identity, base, crystal_target(*identity, id.temperature0)).scalar()) < 1e-12);

  auto stack = build_crystal_flow(small_crystal(), p, 4);
  perturb_parameters(*stack, rng, 0.3);
  const TapeEnergy u1 = crystal_target(*stack, 1.0);
  Tape t1(false);
  const double loss = rkl_loss(t1, *stack, base, u1).scalar();
  const auto w = crystal_works(*stack, base, 2.5, 1.0);
  double mw = 0.0;
  for (double v : w) mw += v / double(w.size());
  CHECK(std::abs(loss - mw) < 1e-10 * std::max(1.0, std::abs(mw)));
  // A constant added to the target shifts the loss by that constant.
  Tape t2(false);
  const double shifted =
      rkl_loss(t2, *stack, base, [&](const Var& x, const Var& q) { return u1(x, q) + 3.0; }).scalar();
  CHECK(shifted - loss == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(loss >= lfep_estimate(w).delta_f);
}

TEST_CASE("loss gradients match central differences") {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng rng(seed);
    for (const char* kind : {"cg8", "moebius", "affine"}) {
      TetraFlowConfig cfg;
      cfg.rotation = RotationSpec::parse(kind);
      cfg.width = 16;
      auto stack = build_tetra_flow(cfg, seed);
      perturb_parameters(*stack, rng, 0.2);
      std::vector<UnitQuaternion> qs(8);
      for (auto& q : qs) q = UnitQuaternion::random(rng);
      const auto batch = augment(qs, cfg.aux_dim, rng);
      const double err = loss_gradient_check(
          *stack, [&](Tape& t) { return nll_loss(t, *stack, batch); }, rng, 40);
      CAPTURE(kind);
      CHECK(err < 1e-4);
    }
    CrystalParams p;
    ToyCrystal model(p);
    auto stack = build_crystal_flow(small_crystal(), p, seed);
    perturb_parameters(*stack, rng, 0.2);
    const auto base = crystal_batch(model, rng, 4, 0.3);
    const TapeEnergy u1 = crystal_target(*stack, 1.0);
    const double err = loss_gradient_check(
        *stack, [&](Tape& t) { return rkl_loss(t, *stack, base, u1); }, rng, 40);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("tetra dry run, log format and reproducibility") {
  const Dataset ds = tetra_data(400, 1);
  TetraFlowConfig arch;
  arch.rotation = RotationSpec::parse("cg8");
  arch.width = 16;
  TrainConfig cfg;
  cfg.steps_per_epoch = 10;
  cfg.seed = 4;
  const TrainResult a = train_tetra(ds, arch, cfg);
  const TrainResult b = train_tetra(ds, arch, cfg);
  CHECK(params_digest(*a.stack) == params_digest(*b.stack));
  CHECK(a.log.records() == b.log.records());
  CHECK(a.log.summary == b.log.summary);
  std::istringstream in(a.log.records());
  std::string line;
  long long prev = -1;
  int steps = 0, epochs = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j["type"] == "step") {
      CHECK(j["step"].get<long long>() == prev + 1);
      prev = j["step"].get<long long>();
      CHECK(std::isfinite(j["loss"].get<double>()));
      ++steps;
    } else {
      ++epochs;
    }
  }
  CHECK(steps == 10);
  CHECK(epochs == 1);
  CHECK(nlohmann::json::parse(a.log.summary)["steps"] == 10);
  // The split is disjoint and covers the data.
  CHECK(a.train_index.size() + a.eval_index.size() == ds.frames.size());
  CHECK(a.train_index.back() < a.eval_index.front());
  cfg.seed = 5;
  CHECK(params_digest(*train_tetra(ds, arch, cfg).stack) != params_digest(*a.stack));
}

TEST_CASE("tetra NLL decreases over the first 100 steps") {
  const Dataset ds = tetra_data(2000, 2);
  TetraFlowConfig arch;
  arch.rotation = RotationSpec::parse("cg8");
  arch.width = 32;
  double first = 0.0, last = 0.0;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    TrainConfig cfg;
    cfg.steps_per_epoch = 100;
    cfg.seed = seed;
    const auto r = train_tetra(ds, arch, cfg);
    for (int i = 0; i < 10; ++i) first += r.log.steps[i].loss;
    for (int i = 90; i < 100; ++i) last += r.log.steps[i].loss;
  }
  CHECK(last < first);
}

TEST_CASE("crystal loss decreases epoch over epoch") {
  CrystalParams p;
  ToyCrystal model(p);
  McmcConfig mc;
  mc.n_frames = 400;
  mc.seed = 6;
  Dataset ds = mcmc_run(CrystalTarget(model, 2.5), crystal_reference(model), mc);
  ds.meta.kind = "crystal";
  ds.meta.temperature = 2.5;
  TrainConfig cfg = TrainConfig::crystal_defaults();
  cfg.epochs = 3;
  cfg.steps_per_epoch = 100;
  cfg.seed = 7;
  const auto r = train_crystal(ds, small_crystal(), p, cfg);
  REQUIRE(r.log.epochs.size() == 3);
  for (int e = 1; e < 3; ++e) CHECK(r.log.epochs[e].mean_loss <= r.log.epochs[e - 1].mean_loss);
  for (const auto& e : r.log.epochs) CHECK(e.mean_work >= e.eval);
  // The held-out half never overlaps the training half.
  for (auto i : r.eval_index) CHECK(!std::binary_search(r.train_index.begin(), r.train_index.end(), i));
  Dataset wrong = ds;
  wrong.meta.temperature = 1.0;
  CHECK_THROWS_AS(train_crystal(wrong, small_crystal(), p, cfg), ValidationError);
}
