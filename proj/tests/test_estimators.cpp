#include <doctest.h>

#include <cmath>

#include "rbflow/errors.hpp"
#include "rbflow/estimators.hpp"

using namespace rbflow;

namespace {

std::vector<double> normals(Rng& rng, int n, double sigma) {
  std::vector<double> x(n);
  for (auto& v : x) v = sigma * standard_normal(rng);
  return x;
}

std::vector<double> pick(const std::vector<double>& x, const std::vector<std::size_t>& idx) {
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = x[idx[i]];
  return out;
}

// Two Gaussian states u_i = x^2 / (2 s_i^2) with samples from each.
struct GaussPair {
  std::vector<double> x;  // first n0 from state 0, then n1 from state 1
  int n0, n1;
  double s0, s1;

  Eigen::MatrixXd u(const std::vector<std::size_t>& idx) const {
    Eigen::MatrixXd m(2, idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const double v = x[idx[j]];
      m(0, j) = v * v / (2 * s0 * s0);
      m(1, j) = v * v / (2 * s1 * s1);
    }
    return m;
  }
  std::vector<std::size_t> all() const {
    std::vector<std::size_t> i(x.size());
    for (std::size_t k = 0; k < i.size(); ++k) i[k] = k;
    return i;
  }
};

GaussPair gauss_pair(Rng& rng, int n, double s0, double s1) {
  GaussPair g{normals(rng, n, s0), n, n, s0, s1};
  const auto b = normals(rng, n, s1);
  g.x.insert(g.x.end(), b.begin(), b.end());
  return g;
}

}  // namespace

TEST_CASE("generalized work examples") {
  CHECK(generalized_work(1.7, 1.7, 0.0) == 0.0);
  CHECK(generalized_work(1.7 + 3.0, 1.7, 0.0) == doctest::Approx(3.0).epsilon(1e-15));
  // x -> 2x on the line, u0 = x^2/2 and u1 = y^2/2: w = 2x^2 - x^2/2 - log 2.
  for (double x : {-1.3, 0.0, 0.4, 2.0}) {
    const double y = 2.0 * x;
    CHECK(generalized_work(0.5 * y * y, 0.5 * x * x, std::log(2.0)) ==
          doctest::Approx(1.5 * x * x - std::log(2.0)).epsilon(1e-14));
  }
}

TEST_CASE("identity crystal stack gives Zwanzig works") {
  CrystalParams p;
  CrystalFlowConfig cfg;
  cfg.reps = 0;
  auto stack = build_crystal_flow(cfg, p, 1);
  ToyCrystal model(p);
  Rng rng(2);
  std::vector<PoseSet> xs;
  for (int s = 0; s < 20; ++s) {
    PoseSet ps = crystal_reference(model);
    for (std::size_t i = 1; i < ps.poses.size(); ++i)
      ps.poses[i].x0 += 0.3 * Vec3(standard_normal(rng), standard_normal(rng), standard_normal(rng));
    for (auto& q : ps.poses) q.q = UnitQuaternion::random(rng);
    xs.push_back(ps);
  }
  const auto same = crystal_works(*stack, xs, 2.5, 2.5);
  const auto cold = crystal_works(*stack, xs, 2.5, 1.0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    CHECK(std::abs(same[i]) < 1e-12);
    const double e = crystal_energy(xs[i], model);
    CHECK(cold[i] == doctest::Approx(e / 1.0 - e / 2.5).epsilon(1e-13));
  }
  // LFEP through the identity map is the Zwanzig estimate on the same data.
  std::vector<double> zw(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double e = crystal_energy(xs[i], model);
    zw[i] = -(e / 1.0 - e / 2.5);
  }
  const double zwanzig = -(log_sum_exp(zw) - std::log(double(xs.size())));
  CHECK(std::abs(lfep_estimate(cold).delta_f - zwanzig) <= 1e-12 * std::max(1.0, std::abs(zwanzig)));
}

TEST_CASE("LFEP examples and Jensen ordering") {
  CHECK(lfep_estimate({2.5, 2.5, 2.5}).delta_f == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(lfep_estimate({0.0, 1000.0}).delta_f == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK_THROWS_AS(lfep_estimate({1.0}), ValidationError);
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> w(2 + t % 50);
    for (auto& v : w) v = 5.0 * standard_normal(rng);
    const auto r = lfep_estimate(w);
    CHECK(r.mean_work >= r.delta_f - 1e-12);
  }
}

TEST_CASE("LFEP on a Gaussian perturbation") {
  // Base N(0,1), u1 - u0 = x^2 (1/(2 s^2) - 1/2): F1 - F0 = -log s.
  const double s = 0.8;
  Rng rng(4);
  const auto x = normals(rng, 100000, 1.0);
  std::vector<double> w(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) w[i] = x[i] * x[i] * (0.5 / (s * s) - 0.5);
  const double est = lfep_estimate(w).delta_f;
  const auto bs = bootstrap([&](const auto& idx) { return lfep_estimate(pick(w, idx)).delta_f; },
                            {w.size()}, 10, 5);
  CHECK(std::abs(est - (-std::log(s))) < 3.0 * bs.sigma);
}

TEST_CASE("MBAR gauge and identical states") {
  Rng rng(6);
  const auto x = normals(rng, 100, 1.0);
  Eigen::MatrixXd u1(1, 100);
  for (int j = 0; j < 100; ++j) u1(0, j) = 0.5 * x[j] * x[j];
  CHECK(mbar_solve(u1, {100})[0] == 0.0);
  Eigen::MatrixXd u2(2, 100);
  u2.row(0) = u1.row(0);
  u2.row(1) = u1.row(0);
  CHECK(std::abs(mbar_solve(u2, {50, 50})[1]) < 1e-10);
  CHECK_THROWS_AS(mbar_solve(u2, {100, 0}), ValidationError);
  // No overlap: a sample with infinite energy everywhere.
  Eigen::MatrixXd u3 = u2;
  u3(0, 7) = u3(1, 7) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(mbar_solve(u3, {50, 50}), NumericalError);
}

TEST_CASE("MBAR recovers -log 2 for two Gaussians") {
  Rng rng(7);
  const GaussPair g = gauss_pair(rng, 100000, 1.0, 2.0);
  const double df = mbar_solve(g.u(g.all()), {g.n0, g.n1})[1];
  const auto bs = bootstrap([&](const auto& idx) { return mbar_solve(g.u(idx), {g.n0, g.n1})[1]; },
                            {std::size_t(g.n0), std::size_t(g.n1)}, 10, 8);
  CHECK(std::abs(df + std::log(2.0)) < 3.0 * bs.sigma);
  CHECK(bs.sigma < 0.01);
}

TEST_CASE("two-state MBAR equals BAR by bisection") {
  Rng rng(9);
  for (double s1 : {1.3, 2.0, 3.0}) {
    const GaussPair g = gauss_pair(rng, 3000, 1.0, s1);
    const Eigen::MatrixXd u = g.u(g.all());
    std::vector<double> wf, wr;
    for (int j = 0; j < g.n0; ++j) wf.push_back(u(1, j) - u(0, j));
    for (int j = g.n0; j < g.n0 + g.n1; ++j) wr.push_back(u(0, j) - u(1, j));
    const double mbar = mbar_solve(u, {g.n0, g.n1}, MbarOptions{1e-13, 100000})[1];
    CHECK(std::abs(mbar - bar_bisection(wf, wr)) < 1e-8);
  }
  // Unequal sample counts.
  GaussPair g = gauss_pair(rng, 2000, 1.0, 1.5);
  g.x.resize(2000 + 700);
  g.n1 = 700;
  const Eigen::MatrixXd u = g.u(g.all());
  std::vector<double> wf, wr;
  for (int j = 0; j < 2000; ++j) wf.push_back(u(1, j) - u(0, j));
  for (int j = 2000; j < 2700; ++j) wr.push_back(u(0, j) - u(1, j));
  CHECK(std::abs(mbar_solve(u, {2000, 700}, MbarOptions{1e-13, 100000})[1] - bar_bisection(wf, wr)) < 1e-8);
}

TEST_CASE("LFEP and MBAR agree on a Gaussian ladder") {
  // States u_k = x^2 / (2 s_k^2); LFEP runs from the first to the last.
  const std::vector<double> s = {1.0, 0.9, 0.8, 0.7};
  Rng rng(10);
  const int n = 20000;
  std::vector<double> x;
  for (double sk : s) {
    const auto v = normals(rng, n, sk);
    x.insert(x.end(), v.begin(), v.end());
  }
  auto umat = [&](const std::vector<std::size_t>& idx) {
    Eigen::MatrixXd m(s.size(), idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j)
      for (std::size_t k = 0; k < s.size(); ++k) m(k, j) = x[idx[j]] * x[idx[j]] / (2 * s[k] * s[k]);
    return m;
  };
  const std::vector<int> counts(s.size(), n);
  const std::vector<std::size_t> blocks(s.size(), n);
  auto mbar_est = [&](const std::vector<std::size_t>& idx) {
    return mbar_solve(umat(idx), counts)[s.size() - 1];
  };
  std::vector<std::size_t> all(x.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const double mbar = mbar_est(all);
  const auto mbar_bs = bootstrap(mbar_est, blocks, 10, 11);
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = x[i] * x[i] * (0.5 / (s.back() * s.back()) - 0.5);
  const double lfep = lfep_estimate(w).delta_f;
  const auto lfep_bs = bootstrap([&](const auto& idx) { return lfep_estimate(pick(w, idx)).delta_f; },
                                 {w.size()}, 10, 12);
  CHECK(std::abs(lfep - mbar) <= 2.0 * std::hypot(lfep_bs.sigma, mbar_bs.sigma));
  CHECK(std::abs(mbar + std::log(s.back())) < 0.02);
}

TEST_CASE("Kish effective sample size") {
  CHECK(kish_ess(std::vector<double>(100, -3.0)) == 100.0);
  CHECK(kish_ess({std::log(2.0), 0.0, 0.0}) == doctest::Approx(16.0 / 6.0).epsilon(1e-14));
  const double ninf = -std::numeric_limits<double>::infinity();
  CHECK(kish_ess({0.0, ninf, ninf, ninf}) == 1.0);
  Rng rng(13);
  for (int t = 0; t < 300; ++t) {
    std::vector<double> lw(1 + t % 40);
    for (auto& v : lw) v = 3.0 * standard_normal(rng);
    const double e = kish_ess(lw);
    CHECK(e >= 1.0 - 1e-12);
    CHECK(e <= double(lw.size()) * (1.0 + 1e-12));
    if (lw.size() > 1) CHECK(e < double(lw.size()) * (1.0 - 1e-9));
  }
}

TEST_CASE("bootstrap properties") {
  Rng rng(14);
  const auto x = normals(rng, 10000, 1.0);
  const auto c = bootstrap([](const auto&) { return 4.2; }, {x.size()}, 10, 1);
  CHECK(c.sigma == 0.0);
  CHECK(c.mean == doctest::Approx(4.2));
  auto mean_of = [&](const std::vector<std::size_t>& idx) {
    double m = 0.0;
    for (auto i : idx) m += x[i];
    return m / double(idx.size());
  };
  const auto m = bootstrap(mean_of, {x.size()}, 200, 2);
  CHECK(m.sigma > 0.01 / 1.5);
  CHECK(m.sigma < 0.01 * 1.5);
  const auto m2 = bootstrap(mean_of, {x.size()}, 200, 2);
  CHECK(m.values == m2.values);
  CHECK_THROWS_AS(bootstrap(mean_of, {x.size()}, 1, 2), ValidationError);
}
