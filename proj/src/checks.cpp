#include "rbflow/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <tuple>
#include <utility>

#include "rbflow/config.hpp"
#include "rbflow/coupling.hpp"
#include "rbflow/errors.hpp"
#include "rbflow/estimators.hpp"
#include "rbflow/hist.hpp"
#include "rbflow/s3flows.hpp"
#include "rbflow/sampling.hpp"
#include "rbflow/targets.hpp"
#include "rbflow/train.hpp"

namespace rbflow {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

class Collector {
 public:
  explicit Collector(std::string module) : module_(std::move(module)) {}
  void add(const std::string& name, bool passed, const std::string& detail) {
    results_.push_back({module_, name, passed, detail});
  }
  /// Records `value <= bound` with both numbers in the detail.
  void bound(const std::string& name, double value, double bound, const std::string& what = "max error") {
    add(name, value <= bound, what + " " + num(value) + " (bound " + num(bound) + ")");
  }
  std::vector<CheckResult> take() { return std::move(results_); }

 private:
  std::string module_;
  std::vector<CheckResult> results_;
};

double max_abs(const Tensor& a) { return a.cwiseAbs().maxCoeff(); }

Vec4 rand_s3(Rng& rng) { return UnitQuaternion::random(rng).coeffs(); }

Vec3 rand_vec3(Rng& rng) { return Vec3(standard_normal(rng), standard_normal(rng), standard_normal(rng)); }

Vec4 rand_ball(Rng& rng) {
  Vec4 v;
  for (int i = 0; i < 4; ++i) v[i] = standard_normal(rng);
  return MoebiusParams::from_raw(v).omega;
}

ConvexPotentialParams rand_potential(Rng& rng, int h) {
  ConvexPotentialParams p;
  p.W.resize(h, 4);
  p.u_raw.resize(h);
  p.b_raw.resize(h);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < 4; ++j) p.W(i, j) = standard_normal(rng);
    p.u_raw[i] = standard_normal(rng);
    p.b_raw[i] = standard_normal(rng);
  }
  p.c_raw = standard_normal(rng);
  return p;
}

std::vector<AugmentedState> random_augmented(Rng& rng, int n, int aux) {
  std::vector<AugmentedState> xs(n);
  for (auto& x : xs) {
    x.q = UnitQuaternion::random(rng);
    x.z.resize(aux);
    for (int j = 0; j < aux; ++j) x.z[j] = standard_normal(rng);
  }
  return xs;
}

// Lattice configurations with jittered translations (the pinned molecule 0
// stays on its site) and uniform orientations.
std::vector<PoseSet> random_crystals(const ToyCrystal& model, Rng& rng, int n, double jitter) {
  std::vector<PoseSet> out;
  for (int s = 0; s < n; ++s) {
    PoseSet ps = crystal_reference(model);
    for (std::size_t i = 1; i < ps.poses.size(); ++i) ps.poses[i].x0 += jitter * rand_vec3(rng);
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

BodyTemplate water() { return bent_template(1.0, 104.5); }

// Two-sample Kolmogorov-Smirnov distance of equally sized samples.
double ks_two_sample(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] <= b[j]) ++i; else ++j;
    d = std::max(d, std::abs(double(i) / double(a.size()) - double(j) / double(b.size())));
  }
  return d;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> i(n);
  for (std::size_t k = 0; k < n; ++k) i[k] = k;
  return i;
}

Dataset tetra_data(int frames, std::uint64_t seed) {
  const BodyTemplate body = methane_template();
  McmcConfig mc;
  mc.n_frames = frames;
  mc.seed = seed;
  mc.step_rotation = 0.15;
  Dataset ds = mcmc_run(TetraTarget(TetraField{}, body, 0.01), PoseSet{body, {RigidPose{}}}, mc);
  ds.meta.kind = "tetra";
  ds.meta.temperature = 0.01;
  return ds;
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<CheckResult> check_geom(std::uint64_t seed) {
  Collector c("geom");
  Rng rng(derive_seed(seed, 1));
  const int n = 10000;

  double cover = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto q = UnitQuaternion::random(rng);
    cover = std::max(cover, (quat_to_rotmat(q) - quat_to_rotmat(-q)).cwiseAbs().maxCoeff());
  }
  c.bound("double_cover", cover, 1e-12);

  double lift = 0.0;
  for (int i = 0; i < n; ++i) {
    const Mat3 r = quat_to_rotmat(UnitQuaternion::random(rng));
    for (LiftSign s : {LiftSign::plus, LiftSign::minus, LiftSign::random})
      lift = std::max(lift, (quat_to_rotmat(rotmat_to_quat(r, s, &rng)) - r).cwiseAbs().maxCoeff());
  }
  c.bound("lift_project", lift, 1e-9);

  double rigid = 0.0, rms = 0.0;
  for (const BodyTemplate& t : {water(), methane_template()}) {
    for (int i = 0; i < n / 2; ++i) {
      const RigidPose pose{rand_vec3(rng), UnitQuaternion::random(rng)};
      const BodyCoords body = pose_apply(pose, t);
      for (std::size_t a = 0; a < t.size(); ++a) {
        rigid = std::max(rigid, std::abs(rotate_point(pose.q, t.bead(a)).norm() - t.bead(a).norm()));
        for (std::size_t b = a + 1; b < t.size(); ++b)
          rigid = std::max(rigid, std::abs((body.row(a) - body.row(b)).norm() - (t.bead(a) - t.bead(b)).norm()));
      }
      const BodyCoords again = pose_apply(pose_extract(body, t), t);
      rms = std::max(rms, std::sqrt((again - body).squaredNorm() / double(t.size())));
    }
  }
  c.bound("rigidity", rigid, 1e-12);
  c.bound("pose_round_trip", rms, 1e-8, "max rms");
  return c.take();
}

// ---------------------------------------------------------------------------

std::vector<CheckResult> check_autodiff(std::uint64_t seed) {
  Collector c("autodiff");
  double worst_nll = 0.0, worst_rkl = 0.0;
  const CrystalParams p;
  const ToyCrystal model(p);
  for (std::uint64_t k = 0; k < 3; ++k) {
    const std::uint64_t s = derive_seed(seed, 10 + k);
    Rng rng(s);
    for (const char* kind : {"cg8", "moebius", "affine"}) {
      auto stack = build_tetra_flow(small_tetra(kind), s);
      perturb_parameters(*stack, rng, 0.2);
      std::vector<UnitQuaternion> qs(8);
      for (auto& q : qs) q = UnitQuaternion::random(rng);
      const auto batch = augment(qs, stack->aux_dim, rng);
      worst_nll = std::max(worst_nll, loss_gradient_check(
                                          *stack, [&](Tape& t) { return nll_loss(t, *stack, batch); }, rng, 40));
    }
    auto stack = build_crystal_flow(small_crystal(), p, s);
    perturb_parameters(*stack, rng, 0.2);
    const auto base = random_crystals(model, rng, 4, 0.3);
    const TapeEnergy u1 = crystal_target(*stack, 1.0);
    worst_rkl = std::max(worst_rkl, loss_gradient_check(
                                        *stack, [&](Tape& t) { return rkl_loss(t, *stack, base, u1); }, rng, 40));
  }
  c.bound("nll_gradient_vs_finite_differences", worst_nll, 1e-4, "max relative error");
  c.bound("rkl_gradient_vs_finite_differences", worst_rkl, 1e-4, "max relative error");

  Rng rng(derive_seed(seed, 20));
  auto tetra = build_tetra_flow(small_tetra("cg8"), derive_seed(seed, 21));
  perturb_parameters(*tetra, rng, 0.2);
  std::vector<UnitQuaternion> qs(16);
  for (auto& q : qs) q = UnitQuaternion::random(rng);
  const auto batch = augment(qs, tetra->aux_dim, rng);
  const LossFn nll = [&](Tape& t) { return nll_loss(t, *tetra, batch); };
  const LossGrad a = loss_and_grad(*tetra, nll);
  const LossGrad b = loss_and_grad(*tetra, nll);
  bool same = a.loss == b.loss && a.grads.size() == b.grads.size();
  for (std::size_t i = 0; same && i < a.grads.size(); ++i) same = a.grads[i] == b.grads[i];
  c.add("gradients_deterministic", same, same ? "bit-identical over repeated runs" : "gradients differ");
  return c.take();
}

// ---------------------------------------------------------------------------

std::vector<CheckResult> check_moebius(std::uint64_t seed) {
  Collector c("s3flows");
  Rng rng(derive_seed(seed, 2));
  const int n = 10000;

  double flip = 0.0, ld_flip = 0.0, inv = 0.0, oracle = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vec4 p = rand_s3(rng);
    const MoebiusParams m{rand_ball(rng)};
    const MapResult a = moebius_sym_forward(p, m);
    const MapResult b = moebius_sym_forward(-p, m);
    flip = std::max(flip, (b.p + a.p).cwiseAbs().maxCoeff());
    flip = std::max(flip, (moebius_sym_forward(p, MoebiusParams{-m.omega}).p - a.p).cwiseAbs().maxCoeff());
    ld_flip = std::max(ld_flip, std::abs(b.logdet - a.logdet));
    inv = std::max(inv, (moebius_sym_inverse(a.p, m) - p).cwiseAbs().maxCoeff());
    auto f = [&](const Vec4& x) { return moebius_sym_forward(x, m).p; };
    oracle = std::max(oracle, std::abs(numeric_tangent_logdet(f, p) - a.logdet) / std::max(1.0, std::abs(a.logdet)));
  }
  c.bound("moebius_flip_equivariance", flip, 1e-12);
  c.bound("moebius_logdet_flip_invariance", ld_flip, 1e-12);
  c.bound("moebius_inverse_round_trip", inv, 1e-10);
  c.bound("moebius_logdet_vs_tangent_oracle", oracle, 1e-5, "max relative error");

  double planar = 0.0;
  int grid = 0;
  for (int i = 0; i <= 40; ++i) {
    for (int j = 0; j < 25; ++j, ++grid) {
      const double x = -1.0 + 2.0 * i / 40.0;
      const double r = 0.98 * j / 24.0;
      planar = std::max(planar, std::abs(moebius_planar_inverse(moebius_planar_forward(x, r), r) - x));
    }
  }
  c.bound("planar_pair_composes_to_identity", planar, 1e-12, "max error over " + std::to_string(grid) + " points:");

  double chord = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Vec4 p = rand_s3(rng);
    const Vec4 w = rand_ball(rng);
    chord = std::max(chord, (moebius_chord(moebius_chord(p, w), w) - p).norm());
  }
  c.bound("unsymmetrized_involution", chord, 1e-10);
  return c.take();
}

std::vector<CheckResult> check_convex_gradient(std::uint64_t seed) {
  Collector c("s3flows");
  Rng rng(derive_seed(seed, 22));
  const int n = 10000;
  for (int h : {8, 32, 128}) {
    double cg_flip = 0.0, cg_oracle = 0.0;
    for (int i = 0; i < n; ++i) {
      const ConvexPotentialParams phi = rand_potential(rng, h);
      const Vec4 p = rand_s3(rng);
      const MapResult a = cg_forward(p, phi);
      const MapResult b = cg_forward(-p, phi);
      cg_flip = std::max({cg_flip, (a.p + b.p).cwiseAbs().maxCoeff(), std::abs(a.logdet - b.logdet)});
      auto f = [&](const Vec4& x) { return cg_forward(x, phi).p; };
      cg_oracle = std::max(cg_oracle,
                           std::abs(numeric_tangent_logdet(f, p) - a.logdet) / std::max(1.0, std::abs(a.logdet)));
    }
    const std::string hs = "_h" + std::to_string(h);
    c.bound("cg_flip_equivariance" + hs, cg_flip, 1e-12);
    c.bound("cg_logdet_vs_tangent_oracle" + hs, cg_oracle, 1e-5, "max relative error");

    std::vector<int> iters;
    double resid = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const ConvexPotentialParams phi = rand_potential(rng, h);
      const Vec4 pp = cg_forward(rand_s3(rng), phi).p;
      InverseStats st;
      const Vec4 back = cg_inverse(pp, phi, 1e-5, 50, &st);
      iters.push_back(st.iterations);
      resid = std::max(resid, (cg_forward(back, phi).p - pp).norm());
    }
    std::sort(iters.begin(), iters.end());
    const int median = iters[iters.size() / 2];
    c.add("cg_inverse" + hs, resid < 1e-5 && median <= 20,
          "max residual " + num(resid) + ", median iterations " + std::to_string(median) + " (bounds 1e-05, 20)");
  }

  double affine = 0.0, affine_ld = 0.0;
  for (int i = 0; i < 1000; ++i) {
    Eigen::Matrix4d W;
    for (int k = 0; k < 16; ++k) W.data()[k] = standard_normal(rng);
    const Eigen::Matrix4d A = W.transpose() * W + 0.1 * Eigen::Matrix4d::Identity();
    const Vec4 p = rand_s3(rng);
    const MapResult q = projective_gradient_map(p, 2.0 * A * p, 2.0 * A);
    affine = std::max(affine, (q.p - affine_quat_map(p, A)).cwiseAbs().maxCoeff());
    affine_ld = std::max(affine_ld, std::abs(q.logdet - affine_quat_logdet(p, A)) /
                                        std::max(1.0, std::abs(q.logdet)));
  }
  c.bound("affine_equals_quadratic_potential_map", affine, 1e-12);
  c.bound("affine_equals_quadratic_potential_logdet", affine_ld, 1e-10, "max relative error");
  return c.take();
}

std::vector<CheckResult> check_s3flows(std::uint64_t seed) {
  Collector c("s3flows");
  Rng rng(derive_seed(seed, 23));
  long long bad = 0;
  const int draws = 500000;
  for (int i = 0; i < draws; ++i) {
    const Vec4 p = rand_s3(rng);
    if (!std::isfinite(moebius_sym_forward(p, MoebiusParams{rand_ball(rng)}).logdet)) ++bad;
    if (!std::isfinite(cg_forward(p, rand_potential(rng, 8)).logdet)) ++bad;
  }
  c.add("diffeomorphism_finite_logdet", bad == 0,
        std::to_string(bad) + " non-finite of " + std::to_string(2 * draws) + " draws");

  double comp = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const MoebiusParams m{rand_ball(rng)};
    const ConvexPotentialParams phi = rand_potential(rng, 8);
    const Vec4 p = rand_s3(rng);
    const MapResult first = moebius_sym_forward(p, m);
    const MapResult second = cg_forward(first.p, phi);
    auto f = [&](const Vec4& x) { return cg_forward(moebius_sym_forward(x, m).p, phi).p; };
    const double total = first.logdet + second.logdet;
    comp = std::max(comp, std::abs(numeric_tangent_logdet(f, p) - total) / std::max(1.0, std::abs(total)));
  }
  c.bound("composition_volume_law", comp, 1e-5, "max relative error");
  auto out = check_moebius(seed);
  auto cg = check_convex_gradient(seed);
  out.insert(out.end(), cg.begin(), cg.end());
  for (auto& r : c.take()) out.push_back(std::move(r));
  return out;
}

// ---------------------------------------------------------------------------

std::vector<CheckResult> check_coupling(std::uint64_t seed) {
  Collector c("coupling");
  Rng rng(derive_seed(seed, 3));
  const ToyCrystal model{CrystalParams{}};

  double lift = 0.0;
  for (const char* kind : {"moebius", "cg8", "affine"}) {
    auto stack = build_tetra_flow(small_tetra(kind), derive_seed(seed, 30));
    perturb_parameters(*stack, rng, 0.3);
    const auto xs = random_augmented(rng, 1000, stack->aux_dim);
    const auto plus = flow_log_density(*stack, xs, LiftSign::plus);
    const auto minus = flow_log_density(*stack, xs, LiftSign::minus);
    const auto coin = flow_log_density(*stack, xs, LiftSign::random, &rng);
    for (std::size_t i = 0; i < xs.size(); ++i)
      lift = std::max({lift, std::abs(plus[i] - minus[i]), std::abs(plus[i] - coin[i])});
  }
  c.bound("tetra_lift_independence", lift, 1e-12);

  {
    auto stack = build_crystal_flow(small_crystal(), model.params(), derive_seed(seed, 31));
    perturb_parameters(*stack, rng, 0.3);
    const auto xs = random_crystals(model, rng, 100, 0.4);
    const auto plus = flow_log_density(*stack, xs, LiftSign::plus);
    const auto minus = flow_log_density(*stack, xs, LiftSign::minus);
    const auto coin = flow_log_density(*stack, xs, LiftSign::random, &rng);
    double rel = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i)
      rel = std::max(rel, std::max(std::abs(plus[i] - minus[i]), std::abs(plus[i] - coin[i])) /
                              std::max(1.0, std::abs(plus[i])));
    c.bound("crystal_lift_independence", rel, 1e-12, "max relative difference");
  }

  double t_inv = 0.0, t_ld = 0.0, t_flip = 0.0;
  for (const char* kind : {"moebius", "cg8", "affine"}) {
    for (int draw = 0; draw < 5; ++draw) {
      auto stack = build_tetra_flow(small_tetra(kind), derive_seed(seed, 40 + draw));
      perturb_parameters(*stack, rng, 0.3);
      const auto xs = random_augmented(rng, 200, stack->aux_dim);
      Tape t(false);
      const FlowState data = pack_augmented(t, xs, LiftSign::plus);
      const LayerResult back = stack->pull_back(t, data);
      const LayerResult again = stack->push_forward(t, back.state);
      t_inv = std::max({t_inv, max_abs(again.state.rot.value() - data.rot.value()),
                        max_abs(again.state.aux.value() - data.aux.value())});
      t_ld = std::max(t_ld, max_abs(again.logdet.value() + back.logdet.value()));
      // Flip the sign of every other input quaternion.
      Tensor flipped = back.state.rot.value();
      for (Eigen::Index r = 0; r < flipped.rows(); r += 2) flipped.row(r) *= -1.0;
      FlowState xf = back.state;
      xf.rot = t.constant(flipped);
      const LayerResult ff = stack->push_forward(t, xf);
      Tensor expect = again.state.rot.value();
      for (Eigen::Index r = 0; r < expect.rows(); r += 2) expect.row(r) *= -1.0;
      t_flip = std::max({t_flip, max_abs(ff.state.rot.value() - expect),
                         max_abs(ff.state.aux.value() - again.state.aux.value()),
                         max_abs(ff.logdet.value() - again.logdet.value())});
    }
  }

  double inv = 0.0, ld = 0.0, flip = 0.0;
  bool fixed_identical = true;
  for (int draw = 0; draw < 50; ++draw) {
    auto s = build_crystal_flow(small_crystal(), model.params(), derive_seed(seed, 100 + draw));
    perturb_parameters(*s, rng, 0.3);
    const auto xs = random_crystals(model, rng, 20, 0.4);
    Tape t(false);
    const FlowState x = pack_poses(t, xs, LiftSign::plus);
    const LayerResult fwd = s->push_forward(t, x);
    const LayerResult back = s->pull_back(t, fwd.state);
    inv = std::max({inv, max_abs(back.state.pos.value() - x.pos.value()),
                    max_abs(back.state.rot.value() - x.rot.value())});
    ld = std::max(ld, max_abs(fwd.logdet.value() + back.logdet.value()));
    const int k = s->arch.crystal.fixed;
    for (Eigen::Index r = 0; r < x.pos.value().rows(); ++r)
      for (int d = 0; d < 3; ++d)
        fixed_identical = fixed_identical && x.pos.value()(r, 3 * k + d) == fwd.state.pos.value()(r, 3 * k + d);
    Tensor flipped = x.rot.value();
    for (int m = draw % 2; m < model.size(); m += 2) flipped.middleCols(4 * m, 4) *= -1.0;
    FlowState xf = x;
    xf.rot = t.constant(flipped);
    const LayerResult ff = s->push_forward(t, xf);
    Tensor expect = fwd.state.rot.value();
    for (int m = draw % 2; m < model.size(); m += 2) expect.middleCols(4 * m, 4) *= -1.0;
    flip = std::max({flip, max_abs(ff.state.pos.value() - fwd.state.pos.value()),
                     max_abs(ff.state.rot.value() - expect), max_abs(ff.logdet.value() - fwd.logdet.value())});
  }
  c.bound("tetra_invertibility", t_inv, 1e-8);
  c.bound("tetra_logdet_negation", t_ld, 1e-8);
  c.bound("tetra_flip_equivariance", t_flip, 1e-12);
  c.bound("crystal_invertibility", inv, 1e-8);
  c.bound("crystal_logdet_negation", ld, 1e-8);
  c.bound("crystal_flip_equivariance", flip, 1e-12);
  c.add("fixed_molecule_untouched", fixed_identical,
        fixed_identical ? "translation bit-identical through the stack" : "fixed translation moved");

  // Importance-sampled normalization of a fresh two-layer augmented flow with
  // uniform S^3 x N(0, I) proposals.
  TetraFlowConfig two;
  two.reps = 1;
  auto stack = build_tetra_flow(two, derive_seed(seed, 32));
  const int n = 1000000, chunk = 50000;
  double sum = 0.0, sum2 = 0.0;
  for (int done = 0; done < n; done += chunk) {
    const auto xs = random_augmented(rng, chunk, stack->aux_dim);
    const auto lp = flow_log_density(*stack, xs);
    for (int i = 0; i < chunk; ++i) {
      const double proposal = -0.5 * xs[i].z.squaredNorm() - 0.5 * stack->aux_dim * std::log(2.0 * M_PI) +
                              uniform_s3_logpdf();
      const double w = std::exp(lp[i] - proposal);
      sum += w;
      sum2 += w * w;
    }
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum2 / n - mean * mean) / n);
  c.add("density_normalization", std::abs(mean - 1.0) <= 0.01,
        "integral " + num(mean) + " +- " + num(se) + " at 1e6 samples (bound 1 +- 0.01)");
  return c.take();
}

// ---------------------------------------------------------------------------

std::vector<CheckResult> check_targets(std::uint64_t seed) {
  Collector c("targets");
  Rng rng(derive_seed(seed, 4));
  const ToyCrystal model{CrystalParams{}};

  double flip = 0.0;
  for (int i = 0; i < 1000; ++i) {
    PoseSet ps = random_crystals(model, rng, 1, 0.4)[0];
    const double e = crystal_energy(ps, model);
    for (auto& p : ps.poses)
      if (uniform01(rng) < 0.5) p.q = -p.q;
    flip = std::max(flip, std::abs(crystal_energy(ps, model) - e) / std::max(1.0, std::abs(e)));
  }
  c.bound("crystal_energy_sign_invariance", flip, 1e-12, "max relative difference");

  double ens = 0.0;
  const auto ladder = geometric_ladder(2.5, 1.0, 5);
  for (int i = 0; i < 1000; ++i) {
    const double e = 20.0 * standard_normal(rng);
    for (double t : ladder) ens = std::max(ens, std::abs(ensemble_u(e, t) * t - e) / std::max(1.0, std::abs(e)));
  }
  c.bound("ensemble_temperature_scaling", ens, 1e-15, "max relative difference");

  // Relabeling the hydrogens of the template leaves the energy unchanged.
  const BodyTemplate body = methane_template();
  std::vector<Vec3> perm = body.beads();
  std::rotate(perm.begin() + 1, perm.begin() + 2, perm.end());
  const BodyTemplate relabeled(perm);
  double relabel = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const UnitQuaternion q = UnitQuaternion::random(rng);
    const double e = tetra_energy(q, body, TetraField{});
    relabel = std::max(relabel, std::abs(tetra_energy(q, relabeled, TetraField{}) - e) / std::max(1.0, std::abs(e)));
  }
  c.bound("tetra_hydrogen_relabeling", relabel, 1e-12, "max relative difference");

  // The default field center separates rotations into distinct modes.
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int i = 0; i < 2000; ++i) {
    const double e = tetra_energy(UnitQuaternion::random(rng), body, TetraField{});
    lo = std::min(lo, e);
    hi = std::max(hi, e);
  }
  c.add("tetra_default_field_has_distinct_modes", hi - lo > 0.05,
        "energy spread " + num(hi - lo) + " over random rotations (needs > 0.05)");
  return c.take();
}

// ---------------------------------------------------------------------------

namespace {

// u = -log cosh(kappa w), the symmetrized VMF potential around the identity.
class VmfTarget : public McmcTarget {
 public:
  explicit VmfTarget(double kappa) : kappa_(kappa) {}
  int size() const override { return 1; }
  bool translates(int) const override { return false; }
  double delta_u(const PoseSet& s, int i, const RigidPose& p) const override { return e(p.q) - e(s.poses[i].q); }
  double u(const PoseSet& s) const override { return e(s.poses[0].q); }

 private:
  double e(const UnitQuaternion& q) const { return -std::log(std::cosh(kappa_ * q.w())); }
  double kappa_;
};

}  // namespace

std::vector<CheckResult> check_sampling(std::uint64_t seed) {
  Collector c("sampling");
  {
    const double kappa = 3.0;
    McmcConfig cfg;
    cfg.step_rotation = 0.6;
    cfg.sweeps_per_frame = 20;
    cfg.n_frames = 100000;
    cfg.seed = derive_seed(seed, 50);
    const Dataset ds = mcmc_run(VmfTarget(kappa), PoseSet{methane_template(), {RigidPose{}}}, cfg);
    SymVMFParams vmf;
    vmf.kappa = kappa;
    vmf.mu = Vec4(0, 0, 0, 1);
    Rng rng(derive_seed(seed, 51));
    std::vector<double> a(ds.frames.size()), b(ds.frames.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = std::abs(ds.frames[i].poses[0].q.w());
      b[i] = std::abs(svmf_sample(vmf, rng).dot(vmf.mu));
    }
    const double d = ks_two_sample(a, b);
    const double crit = 1.95 * std::sqrt(2.0 / double(a.size()));
    c.bound("rotation_moves_sample_svmf", d, crit, "two-sample KS distance");
  }
  const ToyCrystal model{CrystalParams{}};
  const RunConfig defaults = default_config("crystal");
  for (double temp : {defaults.base_temperature, defaults.target_temperature}) {
    McmcConfig cfg = defaults.sampler;
    cfg.n_frames = 300;
    cfg.seed = derive_seed(seed, 52);
    McmcStats st;
    mcmc_run(CrystalTarget(model, temp), crystal_reference(model), cfg, &st);
    const double acc = st.acceptance();
    c.add("crystal_acceptance_T" + num(temp), acc >= 0.2 && acc <= 0.6,
          "acceptance " + num(acc) + " (bounds 0.2, 0.6)");
  }
  {
    McmcConfig cfg;
    cfg.n_frames = 50;
    cfg.seed = derive_seed(seed, 53);
    const CrystalTarget target(model, 2.5);
    const bool same = dataset_to_string(mcmc_run(target, crystal_reference(model), cfg)) ==
                      dataset_to_string(mcmc_run(target, crystal_reference(model), cfg));
    c.add("chain_reproducible", same, same ? "identical datasets for identical seeds" : "datasets differ");
  }
  return c.take();
}

// ---------------------------------------------------------------------------

std::vector<CheckResult> check_estimators(std::uint64_t seed) {
  Collector c("estimators");
  Rng rng(derive_seed(seed, 6));

  double jensen = -std::numeric_limits<double>::infinity();
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> w(2 + t % 50);
    for (auto& v : w) v = 5.0 * standard_normal(rng);
    const auto r = lfep_estimate(w);
    jensen = std::max(jensen, r.delta_f - r.mean_work);
  }
  c.bound("jensen_ordering", jensen, 1e-12, "max lfep - mean work");

  // Gaussian states u_k = x^2 / (2 s_k^2) with samples stored state by state.
  auto normals = [&](int n, double s) {
    std::vector<double> x(n);
    for (auto& v : x) v = s * standard_normal(rng);
    return x;
  };
  auto gauss_u = [](const std::vector<double>& x, const std::vector<double>& s,
                    const std::vector<std::size_t>& idx) {
    Eigen::MatrixXd m(s.size(), idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j)
      for (std::size_t k = 0; k < s.size(); ++k) m(k, j) = x[idx[j]] * x[idx[j]] / (2 * s[k] * s[k]);
    return m;
  };

  double bar = 0.0;
  for (auto [n0, n1, s1] : {std::tuple{3000, 3000, 1.3}, std::tuple{3000, 3000, 2.0}, std::tuple{2000, 700, 1.5}}) {
    std::vector<double> x = normals(n0, 1.0);
    const auto b = normals(n1, s1);
    x.insert(x.end(), b.begin(), b.end());
    const Eigen::MatrixXd u = gauss_u(x, {1.0, s1}, iota(x.size()));
    std::vector<double> wf, wr;
    for (int j = 0; j < n0; ++j) wf.push_back(u(1, j) - u(0, j));
    for (int j = n0; j < n0 + n1; ++j) wr.push_back(u(0, j) - u(1, j));
    const double mbar = mbar_solve(u, {n0, n1}, MbarOptions{1e-13, 100000})[1];
    bar = std::max(bar, std::abs(mbar - bar_bisection(wf, wr)));
  }
  c.bound("two_state_mbar_equals_bar", bar, 1e-8);

  {
    const int n = 100000;
    std::vector<double> x = normals(n, 1.0);
    const auto b = normals(n, 2.0);
    x.insert(x.end(), b.begin(), b.end());
    const std::vector<double> s{1.0, 2.0};
    auto est = [&](const std::vector<std::size_t>& idx) { return mbar_solve(gauss_u(x, s, idx), {n, n})[1]; };
    const double df = est(iota(x.size()));
    const auto bs = bootstrap(est, {std::size_t(n), std::size_t(n)}, 10, derive_seed(seed, 60));
    c.add("mbar_two_gaussians", std::abs(df + std::log(2.0)) <= 3.0 * bs.sigma,
          "delta_f " + num(df) + " vs -log 2, 3 sigma = " + num(3.0 * bs.sigma));
  }

  {
    const std::vector<double> s{1.0, 0.9, 0.8, 0.7};
    const int n = 20000;
    std::vector<double> x;
    for (double sk : s) {
      const auto v = normals(n, sk);
      x.insert(x.end(), v.begin(), v.end());
    }
    const std::vector<int> counts(s.size(), n);
    auto mbar_est = [&](const std::vector<std::size_t>& idx) {
      return mbar_solve(gauss_u(x, s, idx), counts)[s.size() - 1];
    };
    const double mbar = mbar_est(iota(x.size()));
    const auto mbar_bs = bootstrap(mbar_est, std::vector<std::size_t>(s.size(), n), 10, derive_seed(seed, 61));
    std::vector<double> w(n);
    for (int i = 0; i < n; ++i) w[i] = x[i] * x[i] * (0.5 / (s.back() * s.back()) - 0.5);
    auto lfep_est = [&](const std::vector<std::size_t>& idx) {
      std::vector<double> sub(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) sub[i] = w[idx[i]];
      return lfep_estimate(sub).delta_f;
    };
    const double lfep = lfep_est(iota(w.size()));
    const auto lfep_bs = bootstrap(lfep_est, {w.size()}, 10, derive_seed(seed, 62));
    c.bound("lfep_mbar_agree_on_gaussian_ladder", std::abs(lfep - mbar),
            2.0 * std::hypot(lfep_bs.sigma, mbar_bs.sigma), "|lfep - mbar|");
  }

  {
    CrystalFlowConfig cfg;
    cfg.reps = 0;
    const CrystalParams p;
    auto stack = build_crystal_flow(cfg, p, derive_seed(seed, 63));
    const ToyCrystal model(p);
    const auto xs = random_crystals(model, rng, 200, 0.3);
    const auto w = crystal_works(*stack, xs, 2.5, 1.0);
    std::vector<double> neg(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double e = crystal_energy(xs[i], model);
      neg[i] = -(e / 1.0 - e / 2.5);
    }
    const double zwanzig = -(log_sum_exp(neg) - std::log(double(xs.size())));
    c.bound("lfep_identity_map_is_zwanzig", std::abs(lfep_estimate(w).delta_f - zwanzig) /
                                                std::max(1.0, std::abs(zwanzig)),
            1e-12, "relative difference");
  }

  {
    const double ninf = -std::numeric_limits<double>::infinity();
    const bool unit = kish_ess(std::vector<double>(100, -3.0)) == 100.0 && kish_ess({0.0, ninf, ninf, ninf}) == 1.0 &&
                      kish_ess({0.0, 0.0}) == 2.0;
    c.add("kish_unit_cases", unit, unit ? "equal weights give n, one weight gives 1" : "unit case mismatch");
    bool range = true;
    for (int t = 0; t < 1000; ++t) {
      std::vector<double> lw(1 + t % 40);
      for (auto& v : lw) v = 3.0 * standard_normal(rng);
      const double e = kish_ess(lw);
      range = range && e >= 1.0 - 1e-12 && e <= double(lw.size()) * (1.0 + 1e-12);
      if (lw.size() > 1) range = range && e < double(lw.size()) * (1.0 - 1e-9);
    }
    c.add("kish_range", range, range ? "1 <= ess <= n, equality only for equal weights" : "out of range");
  }
  return c.take();
}

// ---------------------------------------------------------------------------

std::vector<CheckResult> check_train(std::uint64_t seed) {
  Collector c("train");
  Rng rng(derive_seed(seed, 7));
  {
    const CrystalParams p;
    const ToyCrystal model(p);
    auto stack = build_crystal_flow(small_crystal(), p, derive_seed(seed, 70));
    perturb_parameters(*stack, rng, 0.3);
    const auto base = random_crystals(model, rng, 32, 0.3);
    Tape t(false);
    const double loss = rkl_loss(t, *stack, base, crystal_target(*stack, 1.0)).scalar();
    double mw = 0.0;
    for (double v : crystal_works(*stack, base, 2.5, 1.0)) mw += v / double(base.size());
    c.bound("rkl_loss_equals_mean_work", std::abs(loss - mw) / std::max(1.0, std::abs(mw)), 1e-10,
            "relative difference");
  }
  {
    const Dataset ds = tetra_data(400, derive_seed(seed, 71));
    TetraFlowConfig arch = small_tetra("cg8");
    TrainConfig cfg;
    cfg.steps_per_epoch = 20;
    cfg.seed = derive_seed(seed, 72);
    const TrainResult a = train_tetra(ds, arch, cfg);
    const TrainResult b = train_tetra(ds, arch, cfg);
    const bool same = params_digest(*a.stack) == params_digest(*b.stack) && a.log.records() == b.log.records();
    c.add("tetra_training_reproducible", same, "final digest " + params_digest(*a.stack));
  }
  {
    const CrystalParams p;
    const ToyCrystal model(p);
    McmcConfig mc;
    mc.n_frames = 60;
    mc.seed = derive_seed(seed, 73);
    Dataset ds = mcmc_run(CrystalTarget(model, 2.5), crystal_reference(model), mc);
    ds.meta.kind = "crystal";
    ds.meta.temperature = 2.5;
    TrainConfig cfg = TrainConfig::crystal_defaults();
    cfg.epochs = 1;
    cfg.steps_per_epoch = 5;
    cfg.seed = derive_seed(seed, 74);
    const TrainResult a = train_crystal(ds, small_crystal(), p, cfg);
    const TrainResult b = train_crystal(ds, small_crystal(), p, cfg);
    const bool same = params_digest(*a.stack) == params_digest(*b.stack) && a.log.records() == b.log.records();
    c.add("crystal_training_reproducible", same, "final digest " + params_digest(*a.stack));
  }
  return c.take();
}

// ---------------------------------------------------------------------------

std::vector<CheckResult> check_artifacts(std::uint64_t seed) {
  Collector c("cli");
  const Dataset ds = tetra_data(200, derive_seed(seed, 80));
  const std::string text = dataset_to_string(ds);
  const bool data_ok = text == dataset_to_string(tetra_data(200, derive_seed(seed, 80))) &&
                       dataset_to_string(dataset_from_string(text)) == text;
  c.add("dataset_bytes_reproducible", data_ok, data_ok ? "regenerated and re-read datasets are byte-identical"
                                                       : "dataset bytes differ");

  auto stack = build_tetra_flow(small_tetra("cg8"), derive_seed(seed, 81));
  const std::string model = model_to_string(*stack);
  const bool model_ok = model_to_string(*model_from_string(model)) == model &&
                        model_to_string(*build_tetra_flow(small_tetra("cg8"), derive_seed(seed, 81))) == model;
  c.add("model_bytes_reproducible", model_ok, model_ok ? "rebuilt and re-read models are byte-identical"
                                                       : "model bytes differ");

  bool config_ok = true;
  for (const char* e : {"tetra", "crystal"}) {
    const std::string doc = default_config_json(e);
    config_ok = config_ok && config_to_json(config_from_json(doc)) == doc;
  }
  c.add("config_round_trip", config_ok, config_ok ? "resolved configuration is a fixed point" : "config drifts");

  Dataset negated = ds;
  for (auto& f : negated.frames)
    for (auto& p : f.poses) p.q = -p.q;
  const RunConfig cfg = default_config("tetra");
  const auto h1 = hist_emit(ds, cfg.hist_pairs, cfg.hist_bins);
  const auto h2 = hist_emit(negated, cfg.hist_pairs, cfg.hist_bins);
  bool hist_ok = h1.size() == h2.size();
  for (std::size_t i = 0; hist_ok && i < h1.size(); ++i) hist_ok = h1[i].csv() == h2[i].csv();
  c.add("hist_sign_canonical", hist_ok, hist_ok ? "q and -q give byte-identical CSVs" : "histograms differ");
  return c.take();
}

// ---------------------------------------------------------------------------

std::vector<CheckResult> run_checks(std::uint64_t seed, const CheckHook& on_result) {
  using Group = std::vector<CheckResult> (*)(std::uint64_t);
  const std::pair<const char*, Group> groups[] = {
      {"geom", check_geom},         {"autodiff", check_autodiff}, {"s3flows", check_s3flows},
      {"coupling", check_coupling}, {"targets", check_targets},   {"sampling", check_sampling},
      {"estimators", check_estimators}, {"train", check_train}, {"cli", check_artifacts}};
  std::vector<CheckResult> all;
  for (const auto& [name, g] : groups) {
    std::vector<CheckResult> part;
    try {
      part = g(seed);
    } catch (const std::exception& e) {
      part.push_back({name, "completed", false, e.what()});
    }
    for (const auto& r : part) {
      if (on_result) on_result(r);
      all.push_back(r);
    }
  }
  return all;
}

std::string format_checks(const std::vector<CheckResult>& results) {
  std::ostringstream out;
  for (const auto& r : results)
    out << (r.passed ? "PASS " : "FAIL ") << r.module << "/" << r.name << ": " << r.detail << "\n";
  return out.str();
}

}  // namespace rbflow
