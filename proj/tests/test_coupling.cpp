#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "rbflow/coupling.hpp"
#include "rbflow/errors.hpp"

using namespace rbflow;

namespace {

std::vector<AugmentedState> random_augmented(Rng& rng, int n, int aux) {
  std::vector<AugmentedState> xs(n);
  for (auto& x : xs) {
    x.q = UnitQuaternion::random(rng);
    x.z.resize(aux);
    for (int j = 0; j < aux; ++j) x.z[j] = standard_normal(rng);
  }
  return xs;
}

std::vector<PoseSet> random_crystals(const ToyCrystal& model, Rng& rng, int n, double jitter) {
  std::vector<PoseSet> out;
  for (int s = 0; s < n; ++s) {
    PoseSet ps = crystal_reference(model);
    for (std::size_t i = 1; i < ps.poses.size(); ++i)
      ps.poses[i].x0 += jitter * Vec3(standard_normal(rng), standard_normal(rng), standard_normal(rng));
    for (auto& p : ps.poses) p.q = UnitQuaternion::random(rng);
    out.push_back(ps);
  }
  return out;
}

TetraFlowConfig small_tetra(const std::string& kind) {
  TetraFlowConfig c;
  c.rotation = RotationSpec::parse(kind);
  c.width = 16;
  c.embed = 6;
  return c;
}

CrystalFlowConfig small_crystal() {
  CrystalFlowConfig c;
  c.reps = 2;
  c.channels = 16;
  c.heads = 4;
  c.rot_heads = 2;
  c.blocks = 1;
  return c;
}

double max_abs(const Tensor& a) { return a.cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("gated initialization") {
  CHECK(gated_init(3.0, 0.0) == 1.5);
  CHECK(gated_init(3.0, -800.0) == 0.0);
  CHECK(gated_init(3.0, -4.0) == doctest::Approx(3.0 * 0.017986209962091559).epsilon(1e-14));
}

TEST_CASE("rotation kind parsing") {
  CHECK(RotationSpec::parse("cg128").hidden == 128);
  CHECK(RotationSpec::parse("cg8").param_count() == 49);
  CHECK(RotationSpec::parse("moebius").param_count() == 4);
  CHECK(RotationSpec::parse("affine").str() == "affine");
  CHECK_THROWS_AS(RotationSpec::parse("cg"), ValidationError);
  CHECK_THROWS_AS(RotationSpec::parse("cgx"), ValidationError);
  CHECK_THROWS_AS(RotationSpec::parse("spline"), ValidationError);
}

TEST_CASE("empty stack has the base density") {
  TetraFlowConfig cfg = small_tetra("moebius");
  cfg.reps = 0;
  cfg.kappa = 0.0;
  auto stack = build_tetra_flow(cfg, 1);
  Rng rng(2);
  const auto xs = random_augmented(rng, 20, 2);
  const auto lp = flow_log_density(*stack, xs);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double expect = -0.5 * xs[i].z.squaredNorm() - std::log(2.0 * M_PI) - std::log(2.0 * M_PI * M_PI);
    CHECK(lp[i] == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("tetra densities do not depend on the lift") {
  for (const char* kind : {"moebius", "cg8", "affine"}) {
    CAPTURE(kind);
    auto stack = build_tetra_flow(small_tetra(kind), 3);
    Rng rng(4);
    perturb_parameters(*stack, rng, 0.3);
    const auto xs = random_augmented(rng, 500, 2);
    const auto plus = flow_log_density(*stack, xs, LiftSign::plus);
    const auto minus = flow_log_density(*stack, xs, LiftSign::minus);
    const auto coin = flow_log_density(*stack, xs, LiftSign::random, &rng);
    double worst = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      CHECK(std::isfinite(plus[i]));
      worst = std::max({worst, std::abs(plus[i] - minus[i]), std::abs(plus[i] - coin[i])});
    }
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("tetra stacks invert and their logdets negate") {
  for (const char* kind : {"moebius", "cg8", "affine"}) {
    CAPTURE(kind);
    auto stack = build_tetra_flow(small_tetra(kind), 5);
    Rng rng(6);
    perturb_parameters(*stack, rng, 0.3);
    const auto xs = random_augmented(rng, 200, 2);
    Tape t(false);
    const FlowState data = pack_augmented(t, xs, LiftSign::plus);
    const LayerResult back = stack->pull_back(t, data);
    const LayerResult again = stack->push_forward(t, back.state);
    CHECK(max_abs(again.state.rot.value() - data.rot.value()) < 1e-8);
    CHECK(max_abs(again.state.aux.value() - data.aux.value()) < 1e-8);
    CHECK(max_abs(again.logdet.value() + back.logdet.value()) < 1e-8);
  }
}

TEST_CASE("flow_sample densities and rigid bodies") {
  auto stack = build_tetra_flow(small_tetra("cg8"), 7);
  Rng rng(8);
  perturb_parameters(*stack, rng, 0.3);
  const FlowSamples s = flow_sample(*stack, rng, 300);
  REQUIRE(s.states.size() == 300);
  const auto lp = flow_log_density(*stack, s.states);
  for (std::size_t i = 0; i < lp.size(); ++i) CHECK(std::abs(lp[i] - s.log_density[i]) <= 1e-8);
  const BodyTemplate& body = stack->body;
  double worst = 0.0;
  for (const auto& ps : s.poses) {
    const BodyCoords c = pose_apply(ps.poses[0], body);
    for (std::size_t a = 0; a < body.size(); ++a)
      for (std::size_t b = a + 1; b < body.size(); ++b)
        worst = std::max(worst, std::abs((c.row(a) - c.row(b)).norm() - (body.bead(a) - body.bead(b)).norm()));
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("identity stack samples follow the base") {
  TetraFlowConfig cfg = small_tetra("moebius");
  cfg.reps = 0;
  auto stack = build_tetra_flow(cfg, 9);
  Rng rng(10);
  const int n = 100000;
  const FlowSamples s = flow_sample(*stack, rng, n);
  // Auxiliary marginal against the standard normal CDF.
  std::vector<double> z(n);
  for (int i = 0; i < n; ++i) z[i] = s.states[i].z[0];
  std::sort(z.begin(), z.end());
  double ks = 0.0;
  for (int i = 0; i < n; ++i) {
    const double cdf = 0.5 * std::erfc(-z[i] / std::sqrt(2.0));
    ks = std::max({ks, std::abs(cdf - double(i) / n), std::abs(cdf - double(i + 1) / n)});
  }
  CHECK(ks < 1.63 / std::sqrt(double(n)));
  // Rotation marginal |<q, mu>| against independent base draws (two-sample).
  SymVMFParams vmf;
  vmf.kappa = cfg.kappa;
  Rng rng2(11);
  std::vector<double> a(n), b(n);
  for (int i = 0; i < n; ++i) {
    a[i] = std::abs(s.states[i].q.coeffs().dot(vmf.mu));
    b[i] = std::abs(svmf_sample(vmf, rng2).dot(vmf.mu));
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] <= b[j]) ++i; else ++j;
    d = std::max(d, std::abs(double(i) / n - double(j) / n));
  }
  CHECK(d < 1.63 * std::sqrt(2.0 / n));
}

TEST_CASE("augmented flow density integrates to one") {
  auto stack = build_tetra_flow(small_tetra("cg8"), 12);
  Rng rng(13);
  perturb_parameters(*stack, rng, 0.2);
  const int n = 200000;
  const auto xs = random_augmented(rng, n, 2);
  const auto lp = flow_log_density(*stack, xs);
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double proposal = -0.5 * xs[i].z.squaredNorm() - std::log(2.0 * M_PI) - std::log(2.0 * M_PI * M_PI);
    const double w = std::exp(lp[i] - proposal);
    sum += w;
    sum2 += w * w;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum2 / n - mean * mean) / n);
  CHECK(std::abs(mean - 1.0) < std::max(4.0 * se, 1e-3));
  CHECK(std::abs(mean - 1.0) < 0.03);
}

TEST_CASE("crystal stack: invertibility, flip-equivariance and the fixed molecule") {
  ToyCrystal model{CrystalParams{}};
  auto stack = build_crystal_flow(small_crystal(), model.params(), 14);
  Rng rng(15);
  double inv_err = 0.0, ld_err = 0.0, flip_pos = 0.0, flip_rot = 0.0, flip_ld = 0.0;
  bool fixed_identical = true;
  for (int draw = 0; draw < 50; ++draw) {
    auto s = build_crystal_flow(small_crystal(), model.params(), 100 + draw);
    perturb_parameters(*s, rng, 0.3);
    const auto xs = random_crystals(model, rng, 20, 0.4);
    Tape t(false);
    const FlowState x = pack_poses(t, xs, LiftSign::plus);
    const LayerResult fwd = s->push_forward(t, x);
    const LayerResult back = s->pull_back(t, fwd.state);
    inv_err = std::max({inv_err, max_abs(back.state.pos.value() - x.pos.value()),
                        max_abs(back.state.rot.value() - x.rot.value())});
    ld_err = std::max(ld_err, max_abs(fwd.logdet.value() + back.logdet.value()));
    const Tensor& p0 = x.pos.value();
    const Tensor& p1 = fwd.state.pos.value();
    for (Eigen::Index r = 0; r < p0.rows(); ++r)
      for (int c = 0; c < 3; ++c) fixed_identical = fixed_identical && p0(r, c) == p1(r, c);

    // Flip every other molecule's quaternion sign.
    Tensor flipped = x.rot.value();
    for (int k = 0; k < model.size(); k += 2) flipped.middleCols(4 * k, 4) *= -1.0;
    FlowState xf = x;
    xf.rot = t.constant(flipped);
    const LayerResult ff = s->push_forward(t, xf);
    Tensor expect_rot = fwd.state.rot.value();
    for (int k = 0; k < model.size(); k += 2) expect_rot.middleCols(4 * k, 4) *= -1.0;
    flip_pos = std::max(flip_pos, max_abs(ff.state.pos.value() - fwd.state.pos.value()));
    flip_rot = std::max(flip_rot, max_abs(ff.state.rot.value() - expect_rot));
    flip_ld = std::max(flip_ld, max_abs(ff.logdet.value() - fwd.logdet.value()));
  }
  CHECK(inv_err < 1e-8);
  CHECK(ld_err < 1e-8);
  CHECK(fixed_identical);
  CHECK(flip_pos < 1e-12);
  CHECK(flip_rot < 1e-12);
  CHECK(flip_ld < 1e-12);
}

TEST_CASE("fresh crystal stack is close to the identity") {
  ToyCrystal model{CrystalParams{}};
  auto stack = build_crystal_flow(CrystalFlowConfig{}, model.params(), 16);
  Rng rng(17);
  const auto xs = random_crystals(model, rng, 64, 0.5);
  Tape t(false);
  const FlowState x = pack_poses(t, xs, LiftSign::plus);
  const LayerResult fwd = stack->push_forward(t, x);
  CHECK(max_abs(fwd.state.pos.value() - x.pos.value()) < 0.05);
  CHECK(max_abs(fwd.state.rot.value() - x.rot.value()) < 0.05);
  CHECK(max_abs(fwd.logdet.value()) < 0.05 * 3 * model.size());
}

TEST_CASE("crystal densities do not depend on the lift") {
  ToyCrystal model{CrystalParams{}};
  auto stack = build_crystal_flow(small_crystal(), model.params(), 18);
  Rng rng(19);
  perturb_parameters(*stack, rng, 0.3);
  const auto xs = random_crystals(model, rng, 50, 0.4);
  const auto plus = flow_log_density(*stack, xs, LiftSign::plus);
  const auto minus = flow_log_density(*stack, xs, LiftSign::minus);
  const auto coin = flow_log_density(*stack, xs, LiftSign::random, &rng);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    CHECK(std::abs(plus[i] - minus[i]) <= 1e-12 * std::max(1.0, std::abs(plus[i])));
    CHECK(std::abs(plus[i] - coin[i]) <= 1e-12 * std::max(1.0, std::abs(plus[i])));
  }
}

TEST_CASE("model serialization round trips value-identically") {
  ToyCrystal model{CrystalParams{}};
  Rng rng(20);
  auto c = build_crystal_flow(small_crystal(), model.params(), 21);
  perturb_parameters(*c, rng, 0.1);
  const std::string text = model_to_string(*c);
  auto c2 = model_from_string(text);
  CHECK(model_to_string(*c2) == text);
  for (std::size_t i = 0; i < c->store->all().size(); ++i)
    CHECK((c->store->all()[i].value.array() == c2->store->all()[i].value.array()).all());

  auto tt = build_tetra_flow(small_tetra("cg8"), 22);
  perturb_parameters(*tt, rng, 0.1);
  const std::string tt_text = model_to_string(*tt);
  auto tt2 = model_from_string(tt_text);
  CHECK(model_to_string(*tt2) == tt_text);
  const auto xs = random_augmented(rng, 10, 2);
  CHECK(flow_log_density(*tt, xs) == flow_log_density(*tt2, xs));

  CHECK_THROWS_AS(model_from_string("{"), FormatError);
  CHECK_THROWS_AS(model_from_string("{\"format\":\"other\"}"), FormatError);
  std::string bumped = tt_text;
  bumped.replace(bumped.find("\"version\": 1"), 12, "\"version\": 9");
  CHECK_THROWS_AS(model_from_string(bumped), FormatError);
}
