#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/LU>

#include "rbflow/errors.hpp"
#include "rbflow/s3flows.hpp"

using namespace rbflow;

namespace {

Vec4 rand_s3(Rng& rng) { return UnitQuaternion::random(rng).coeffs(); }

Vec4 rand_ball(Rng& rng) {
  Vec4 v;
  for (int i = 0; i < 4; ++i) v[i] = standard_normal(rng);
  return MoebiusParams::from_raw(v).omega;
}

ConvexPotentialParams rand_potential(Rng& rng, int h, double scale = 1.0) {
  ConvexPotentialParams p;
  p.W.resize(h, 4);
  p.u_raw.resize(h);
  p.b_raw.resize(h);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < 4; ++j) p.W(i, j) = scale * standard_normal(rng);
    p.u_raw[i] = standard_normal(rng);
    p.b_raw[i] = standard_normal(rng);
  }
  p.c_raw = standard_normal(rng);
  return p;
}

}  // namespace

TEST_CASE("moebius omega realization stays inside the ball") {
  CHECK(MoebiusParams::from_raw(Vec4::Zero()).omega.norm() == 0.0);
  CHECK(MoebiusParams::from_raw(Vec4(1e6, 0, 0, 0)).omega.norm() < 1.0);
  CHECK(MoebiusParams::from_raw(Vec4(0, 0.5, 0, 0)).omega[1] == doctest::Approx(0.99 * std::tanh(0.5)));
}

TEST_CASE("moebius identity at omega = 0") {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const Vec4 p = rand_s3(rng);
    const MapResult r = moebius_sym_forward(p, MoebiusParams{});
    CHECK((r.p - p).norm() < 1e-15);
    CHECK(r.logdet == 0.0);
    CHECK((moebius_sym_inverse(p, MoebiusParams{}) - p).norm() < 1e-15);
  }
}

TEST_CASE("moebius volume example r = 0.5, q_y = 0") {
  const MoebiusParams m{Vec4(0.5, 0, 0, 0)};
  const Vec4 p(1, 0, 0, 0);
  const double expect = std::log(0.75 * std::pow(1.25, 3) / std::pow(0.75 * 0.75, 2));
  CHECK(moebius_sym_logdet(p, m) == doctest::Approx(expect).epsilon(1e-14));
  CHECK(std::exp(expect) == doctest::Approx(4.62963).epsilon(1e-6));
  auto f = [&](const Vec4& x) { return moebius_sym_forward(x, m).p; };
  CHECK(std::abs(numeric_tangent_logdet(f, p) - expect) < 1e-6);
}

TEST_CASE("planar closed forms") {
  CHECK(moebius_planar_forward(0.0, 0.5) == 0.0);
  for (double r : {0.1, 0.5, 0.9}) CHECK(moebius_planar_inverse(-1.0, r) == doctest::Approx(1.0).epsilon(1e-15));
  double worst = 0.0;
  for (int i = 0; i <= 40; ++i) {
    for (int j = 0; j < 25; ++j) {
      const double x = -1.0 + 2.0 * i / 40.0;
      const double r = 0.98 * j / 24.0;
      worst = std::max(worst, std::abs(moebius_planar_inverse(moebius_planar_forward(x, r), r) - x));
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("chord building block is an involution and matches the symmetrized form") {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const Vec4 p = rand_s3(rng);
    const Vec4 w = rand_ball(rng);
    const Vec4 once = moebius_chord(p, w);
    CHECK(std::abs(once.norm() - 1.0) < 1e-12);
    CHECK((moebius_chord(once, w) - p).norm() < 1e-10);
    const Vec4 sym = -(moebius_chord(p, w) + moebius_chord(p, -w)).normalized();
    CHECK((sym - moebius_sym_forward(p, MoebiusParams{w}).p).norm() < 1e-10);
  }
}

TEST_CASE("moebius flip equivariance, inverse and logdet oracle") {
  Rng rng(3);
  double worst_flip = 0.0, worst_inv = 0.0, worst_ld = 0.0, worst_ldflip = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const Vec4 p = rand_s3(rng);
    const MoebiusParams m{rand_ball(rng)};
    const MoebiusParams mneg{-m.omega};
    const MapResult a = moebius_sym_forward(p, m);
    worst_flip = std::max(worst_flip, (moebius_sym_forward(-p, m).p + a.p).cwiseAbs().maxCoeff());
    worst_flip = std::max(worst_flip, (moebius_sym_forward(p, mneg).p - a.p).cwiseAbs().maxCoeff());
    worst_ldflip = std::max(worst_ldflip, std::abs(moebius_sym_forward(-p, m).logdet - a.logdet));
    worst_inv = std::max(worst_inv, (moebius_sym_inverse(a.p, m) - p).cwiseAbs().maxCoeff());
    auto f = [&](const Vec4& x) { return moebius_sym_forward(x, m).p; };
    worst_ld = std::max(worst_ld, std::abs(numeric_tangent_logdet(f, p) - a.logdet));
  }
  CHECK(worst_flip <= 1e-12);
  CHECK(worst_ldflip <= 1e-12);
  CHECK(worst_inv < 1e-10);
  CHECK(worst_ld < 1e-5);
}

TEST_CASE("moebius degenerate p parallel to omega") {
  const MoebiusParams m{Vec4(0, 0, 0.7, 0)};
  const Vec4 p(0, 0, 1, 0);
  const MapResult a = moebius_sym_forward(p, m);
  CHECK(std::isfinite(a.logdet));
  CHECK((moebius_sym_inverse(a.p, m) - p).norm() < 1e-12);
}

TEST_CASE("convex gradient map special cases") {
  Rng rng(4);
  const ConvexPotentialParams id = identity_potential(8);
  for (int i = 0; i < 20; ++i) {
    const Vec4 p = rand_s3(rng);
    const MapResult r = cg_forward(p, id);
    CHECK((r.p - p).norm() < 1e-15);
    CHECK(std::abs(r.logdet) < 1e-14);
    InverseStats st;
    CHECK((cg_inverse(p, id, 1e-5, 50, &st) - p).norm() < 1e-12);
    CHECK(st.iterations <= 2);
  }
  // phi = p^T W^T W p with W = diag(2,1,1,1): e_x is a fixed point.
  Eigen::Matrix4d W = Vec4(2, 1, 1, 1).asDiagonal();
  const Eigen::Matrix4d A = W.transpose() * W;
  const Vec4 ex(1, 0, 0, 0);
  const MapResult r = projective_gradient_map(ex, 2.0 * A * ex, 2.0 * A);
  CHECK((r.p - ex).norm() < 1e-15);
}

TEST_CASE("convex gradient map logdet oracle and flip symmetry") {
  Rng rng(5);
  for (int h : {8, 32, 128}) {
    double worst = 0.0, worst_flip = 0.0;
    for (int i = 0; i < 300; ++i) {
      const ConvexPotentialParams phi = rand_potential(rng, h);
      const Vec4 p = rand_s3(rng);
      const MapResult a = cg_forward(p, phi);
      const MapResult b = cg_forward(-p, phi);
      worst_flip = std::max(worst_flip, (a.p + b.p).cwiseAbs().maxCoeff());
      worst_flip = std::max(worst_flip, std::abs(a.logdet - b.logdet));
      auto f = [&](const Vec4& x) { return cg_forward(x, phi).p; };
      worst = std::max(worst, std::abs(numeric_tangent_logdet(f, p) - a.logdet) / std::max(1.0, std::abs(a.logdet)));
    }
    CHECK(worst < 1e-5);
    CHECK(worst_flip < 1e-12);
  }
}

TEST_CASE("convex gradient map numerical inverse") {
  Rng rng(6);
  std::vector<int> iters;
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const ConvexPotentialParams phi = rand_potential(rng, 32);
    const Vec4 p = rand_s3(rng);
    const Vec4 pp = cg_forward(p, phi).p;
    InverseStats st;
    const Vec4 back = cg_inverse(pp, phi, 1e-5, 50, &st);
    iters.push_back(st.iterations);
    worst = std::max(worst, (cg_forward(back, phi).p - pp).norm());
  }
  std::sort(iters.begin(), iters.end());
  MESSAGE("median BFGS iterations " << iters[iters.size() / 2] << ", max " << iters.back());
  CHECK(worst < 1e-5);
  CHECK(iters[iters.size() / 2] <= 20);
}

TEST_CASE("affine map equals the quadratic-potential gradient map") {
  Rng rng(7);
  CHECK((affine_quat_map(Vec4(0.5, 0.5, 0.5, 0.5), Eigen::Matrix4d::Identity()) - Vec4(0.5, 0.5, 0.5, 0.5)).norm() < 1e-15);
  CHECK((affine_quat_map(Vec4(0.5, 0.5, 0.5, 0.5), 3.0 * Eigen::Matrix4d::Identity()) - Vec4(0.5, 0.5, 0.5, 0.5)).norm() < 1e-15);
  CHECK_THROWS_AS(affine_quat_map(Vec4(1, 0, 0, 0), Eigen::Matrix4d::Zero()), ValidationError);
  for (int i = 0; i < 1000; ++i) {
    Eigen::Matrix4d W;
    for (int k = 0; k < 16; ++k) W.data()[k] = standard_normal(rng);
    const Eigen::Matrix4d A = W.transpose() * W;
    const Vec4 p = rand_s3(rng);
    const MapResult cg = projective_gradient_map(p, 2.0 * A * p, 2.0 * A);
    REQUIRE((cg.p - affine_quat_map(p, A)).cwiseAbs().maxCoeff() <= 1e-12);
    const double cond = A.norm() * A.inverse().norm();
    REQUIRE(std::abs(cg.logdet - affine_quat_logdet(p, A)) <= 1e-13 * cond);
    // Closed-form inverse of the quadratic case.
    const Vec4 inv = (A.inverse() * cg.p).normalized();
    REQUIRE(std::min((inv - p).norm(), (inv + p).norm()) < 1e-14 * cond);
  }
}

TEST_CASE("svmf density") {
  Rng rng(8);
  const SymVMFParams uni{Vec4(1, 0, 0, 0), 0.0};
  const SymVMFParams p25{Vec4(1, 0, 0, 0), 2.5};
  for (int i = 0; i < 100; ++i) {
    const Vec4 q = rand_s3(rng);
    CHECK(svmf_logpdf(q, p25) == svmf_logpdf(-q, p25));
    CHECK(svmf_logpdf(q, uni) == doctest::Approx(-std::log(2 * M_PI * M_PI)).epsilon(1e-15));
  }
  // Normalization by uniform quadrature.
  const int n = 400000;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += std::exp(svmf_logpdf(rand_s3(rng), p25) - uniform_s3_logpdf());
  CHECK(acc / n == doctest::Approx(1.0).epsilon(0.01));
  // Normalizer continuity across the evaluation branches.
  CHECK(std::abs(vmf_log_normalizer(1e-6 - 1e-12) - vmf_log_normalizer(1e-6 + 1e-12)) < 1e-12);
  CHECK(std::abs(vmf_log_normalizer(500.0 - 1e-9) - vmf_log_normalizer(500.0 + 1e-9)) < 1e-8);
}

TEST_CASE("svmf sampling matches the cosine marginal") {
  Rng rng(9);
  const SymVMFParams p25{UnitQuaternion(0.3, -0.2, 0.5, 0.6).coeffs(), 2.5};
  const int n = 100000;
  std::vector<double> t(n);
  Vec4 mean = Vec4::Zero();
  for (int i = 0; i < n; ++i) {
    const Vec4 q = svmf_sample(p25, rng);
    REQUIRE(std::abs(q.norm() - 1.0) < 1e-12);
    t[i] = std::abs(q.dot(p25.mu));
    mean += q;
  }
  mean /= n;
  CHECK(mean.norm() < 4.0 * std::sqrt(1.0 / n));
  // Marginal density of t = |<q, mu>| is proportional to cosh(kappa t) sqrt(1 - t^2).
  const int grid = 20000;
  std::vector<double> cdf(grid + 1, 0.0);
  for (int i = 1; i <= grid; ++i) {
    const double a = (i - 1.0) / grid, b = double(i) / grid;
    auto dens = [&](double x) { return std::cosh(2.5 * x) * std::sqrt(std::max(0.0, 1.0 - x * x)); };
    cdf[i] = cdf[i - 1] + (dens(a) + 4 * dens(0.5 * (a + b)) + dens(b)) / (6.0 * grid);
  }
  for (double& c : cdf) c /= cdf.back();
  std::sort(t.begin(), t.end());
  double ks = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = t[i];
    const int k = std::min(grid - 1, static_cast<int>(x * grid));
    const double frac = x * grid - k;
    const double f = cdf[k] + frac * (cdf[k + 1] - cdf[k]);
    ks = std::max({ks, std::abs(f - double(i) / n), std::abs(f - double(i + 1) / n)});
  }
  // 1% critical value of the one-sample KS statistic.
  CHECK(ks < 1.63 / std::sqrt(double(n)));

  // kappa = 0 is uniform: mean near zero.
  Vec4 m0 = Vec4::Zero();
  for (int i = 0; i < n; ++i) m0 += svmf_sample(SymVMFParams{Vec4(1, 0, 0, 0), 0.0}, rng);
  CHECK((m0 / n).norm() < 4.0 * std::sqrt(1.0 / n));
}

TEST_CASE("tape maps agree with the plain versions") {
  Rng rng(10);
  const int B = 6;
  ad::Tensor p(B, 4), w(B, 4);
  for (int i = 0; i < B; ++i) {
    p.row(i) = rand_s3(rng).transpose();
    w.row(i) = rand_ball(rng).transpose();
  }
  ad::Tape t(false);
  auto [pp, ld] = ad_maps::moebius_forward(t.constant(p), t.constant(w));
  auto [back, ldi] = ad_maps::moebius_inverse(pp, t.constant(w));
  for (int i = 0; i < B; ++i) {
    const MapResult r = moebius_sym_forward(p.row(i).transpose(), MoebiusParams{w.row(i).transpose()});
    CHECK((pp.value().row(i).transpose() - r.p).norm() < 1e-14);
    CHECK(std::abs(ld.value()(i, 0) - r.logdet) < 1e-13);
    CHECK((back.value().row(i) - p.row(i)).norm() < 1e-12);
    CHECK(std::abs(ldi.value()(i, 0) + r.logdet) < 1e-10);
  }

  const int H = 8;
  std::vector<ConvexPotentialParams> phis;
  ad::Tensor Wt(B, 4 * H), ut(B, H), bt(B, H), ct(B, 1);
  for (int i = 0; i < B; ++i) {
    phis.push_back(rand_potential(rng, H));
    for (int a = 0; a < H; ++a)
      for (int c = 0; c < 4; ++c) Wt(i, 4 * a + c) = phis[i].W(a, c);
    ut.row(i) = phis[i].u().transpose();
    bt.row(i) = phis[i].b().transpose();
    ct(i, 0) = phis[i].c();
  }
  ad_maps::Potential pot{t.constant(Wt), t.constant(ut), t.constant(bt), t.constant(ct), H};
  auto [cp, cld] = ad_maps::cg_forward(t.constant(p), pot);
  for (int i = 0; i < B; ++i) {
    const MapResult r = cg_forward(p.row(i).transpose(), phis[i]);
    CHECK((cp.value().row(i).transpose() - r.p).norm() < 1e-13);
    CHECK(std::abs(cld.value()(i, 0) - r.logdet) < 1e-10);
  }

  SymVMFParams v{Vec4(1, 0, 0, 0), 2.5};
  ad::Var lp = ad_maps::svmf_logpdf(t.constant(p), v);
  for (int i = 0; i < B; ++i) CHECK(lp.value()(i, 0) == doctest::Approx(svmf_logpdf(p.row(i).transpose(), v)).epsilon(1e-14));
}

TEST_CASE("convex gradient map log-density gradients") {
  Rng rng(11);
  const int B = 4, H = 8;
  ad::Tensor p(B, 4);
  for (int i = 0; i < B; ++i) p.row(i) = rand_s3(rng).transpose();
  std::vector<ad::Tensor> params = {ad::Tensor(1, 4 * H), ad::Tensor(1, H), ad::Tensor(1, H), ad::Tensor(1, 1)};
  for (auto& t : params)
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = standard_normal(rng);
  ad::ScalarFn f = [&](ad::Tape& t, const std::vector<ad::Var>& v) {
    ad_maps::Potential pot{v[0], softplus(v[1]), softplus(v[2]), softplus(v[3]), H};
    auto [pp, ld] = ad_maps::cg_forward(t.constant(p), pot);
    return sum(ad_maps::svmf_logpdf(pp, SymVMFParams{Vec4(1, 0, 0, 0), 2.5}) + ld);
  };
  CHECK(ad::finite_diff_check(f, params) < 1e-4);
}
