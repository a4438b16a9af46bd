#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "rbflow/errors.hpp"
#include "rbflow/s3flows.hpp"
#include "rbflow/sampling.hpp"

using namespace rbflow;

namespace {

class FlatTarget : public McmcTarget {
 public:
  int size() const override { return 2; }
  bool translates(int) const override { return true; }
  double delta_u(const PoseSet&, int, const RigidPose&) const override { return 0.0; }
  double u(const PoseSet&) const override { return 0.0; }
};

// One free body in the harmonic well u = |x|^2 / 2.
class HarmonicTarget : public McmcTarget {
 public:
  int size() const override { return 1; }
  bool translates(int) const override { return true; }
  double delta_u(const PoseSet& s, int i, const RigidPose& p) const override {
    return 0.5 * (p.x0.squaredNorm() - s.poses[i].x0.squaredNorm());
  }
  double u(const PoseSet& s) const override { return 0.5 * s.poses[0].x0.squaredNorm(); }
};

// Symmetrized VMF potential u = -log cosh(kappa <q, mu>).
class VmfTarget : public McmcTarget {
 public:
  explicit VmfTarget(double kappa) : kappa_(kappa) {}
  int size() const override { return 1; }
  bool translates(int) const override { return false; }
  double delta_u(const PoseSet& s, int i, const RigidPose& p) const override {
    return e(p.q) - e(s.poses[i].q);
  }
  double u(const PoseSet& s) const override { return e(s.poses[0].q); }

 private:
  double e(const UnitQuaternion& q) const { return -std::log(std::cosh(kappa_ * q.w())); }
  double kappa_;
};

PoseSet single_body() { return PoseSet{methane_template(), {RigidPose{}}}; }

double batch_means_se(const std::vector<double>& x, int batches) {
  const std::size_t len = x.size() / batches;
  std::vector<double> m(batches, 0.0);
  for (int b = 0; b < batches; ++b) {
    for (std::size_t i = 0; i < len; ++i) m[b] += x[b * len + i];
    m[b] /= double(len);
  }
  double mean = 0.0;
  for (double v : m) mean += v / batches;
  double var = 0.0;
  for (double v : m) var += (v - mean) * (v - mean) / (batches - 1);
  return std::sqrt(var / batches);
}

}  // namespace

TEST_CASE("zero energy change is always accepted") {
  FlatTarget target;
  McmcConfig cfg;
  cfg.n_frames = 200;
  PoseSet start{methane_template(), {RigidPose{}, RigidPose{}}};
  McmcStats st;
  mcmc_run(target, start, cfg, &st);
  CHECK(st.proposed == 2LL * 10 * (200 + 20));
  CHECK(st.accepted == st.proposed);
}

TEST_CASE("harmonic well variance") {
  HarmonicTarget target;
  McmcConfig cfg;
  cfg.step_translation = 2.4;
  cfg.sweeps_per_frame = 4;
  cfg.n_frames = 100000;
  cfg.seed = 5;
  const Dataset ds = mcmc_run(target, single_body(), cfg);
  REQUIRE(ds.frames.size() == 100000u);
  std::vector<double> x2;
  x2.reserve(ds.frames.size());
  for (const auto& f : ds.frames) x2.push_back(f.poses[0].x0.x() * f.poses[0].x0.x());
  double mean = 0.0;
  for (double v : x2) mean += v / double(x2.size());
  const double se = batch_means_se(x2, 100);
  CHECK(std::abs(mean - 1.0) < 3.0 * se);
  CHECK(se < 0.02);
}

TEST_CASE("rotation moves sample the symmetrized VMF density") {
  const double kappa = 3.0;
  VmfTarget target(kappa);
  McmcConfig cfg;
  cfg.step_rotation = 0.6;
  cfg.sweeps_per_frame = 20;
  cfg.n_frames = 100000;
  cfg.seed = 6;
  const Dataset ds = mcmc_run(target, single_body(), cfg);
  SymVMFParams vmf;
  vmf.kappa = kappa;
  vmf.mu = Vec4(0, 0, 0, 1);
  Rng rng(7);
  const std::size_t n = ds.frames.size();
  std::vector<double> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = std::abs(ds.frames[i].poses[0].q.w());
    b[i] = std::abs(svmf_sample(vmf, rng).dot(vmf.mu));
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < n && j < n) {
    if (a[i] <= b[j]) ++i; else ++j;
    d = std::max(d, std::abs(double(i) - double(j)) / double(n));
  }
  // 0.1% two-sample KS critical value.
  CHECK(d < 1.95 * std::sqrt(2.0 / double(n)));
}

TEST_CASE("identical seeds give identical datasets") {
  ToyCrystal model{CrystalParams{}};
  CrystalTarget target(model, 2.5);
  McmcConfig cfg;
  cfg.n_frames = 50;
  cfg.seed = 99;
  Dataset a = mcmc_run(target, crystal_reference(model), cfg);
  Dataset b = mcmc_run(target, crystal_reference(model), cfg);
  CHECK(dataset_to_string(a) == dataset_to_string(b));
  cfg.seed = 100;
  Dataset c = mcmc_run(target, crystal_reference(model), cfg);
  CHECK(dataset_to_string(a) != dataset_to_string(c));
  // The pinned molecule never moves.
  for (const auto& f : a.frames) CHECK(f.poses[0].x0 == model.sites()[0]);
}

TEST_CASE("default crystal settings have a moderate acceptance rate") {
  ToyCrystal model{CrystalParams{}};
  McmcConfig cfg;
  cfg.n_frames = 300;
  for (double temp : {2.5, 1.0}) {
    CrystalTarget target(model, temp);
    McmcStats st;
    mcmc_run(target, crystal_reference(model), cfg, &st);
    CAPTURE(temp);
    CHECK(st.acceptance() >= 0.2);
    CHECK(st.acceptance() <= 0.6);
    MESSAGE("acceptance at T=" << temp << ": " << st.acceptance());
  }
}

TEST_CASE("dataset round trip and format errors") {
  ToyCrystal model{CrystalParams{}};
  CrystalTarget target(model, 2.5);
  McmcConfig cfg;
  cfg.n_frames = 20;
  Dataset ds = mcmc_run(target, crystal_reference(model), cfg);
  ds.meta.kind = "crystal";
  ds.meta.temperature = 2.5;
  const std::string text = dataset_to_string(ds);
  const Dataset back = dataset_from_string(text);
  CHECK(back == ds);
  for (std::size_t f = 0; f < ds.frames.size(); ++f)
    for (std::size_t k = 0; k < ds.frames[f].poses.size(); ++k) {
      CHECK(back.frames[f].poses[k].x0 == ds.frames[f].poses[k].x0);
      CHECK(back.frames[f].poses[k].q.coeffs() == ds.frames[f].poses[k].q.coeffs());
    }

  auto kind_of = [](const std::string& t) {
    try {
      dataset_from_string(t);
    } catch (const FormatError& e) {
      return e.kind();
    }
    FAIL("no error");
    return FormatError::Kind::value;
  };

  // Truncated payload.
  const std::string truncated = text.substr(0, text.rfind('\n', text.size() - 2) + 1);
  CHECK(kind_of(truncated) == FormatError::Kind::length);
  // Short record.
  std::string short_rec = text;
  short_rec.erase(short_rec.size() - 1);
  short_rec.erase(short_rec.rfind(' '));
  short_rec += "\n";
  CHECK(kind_of(short_rec) == FormatError::Kind::length);
  // Header damage and version.
  CHECK(kind_of("garbage\n") == FormatError::Kind::header);
  std::string ver = text;
  ver.replace(ver.find("\"version\":1"), 11, "\"version\":7");
  CHECK(kind_of(ver) == FormatError::Kind::version);

  // Quaternion with norm 1.5 in record 3.
  Dataset bad = ds;
  std::string bad_text = dataset_to_string(bad);
  std::istringstream in(bad_text);
  std::string line, rebuilt;
  int idx = -1;
  while (std::getline(in, line)) {
    if (idx == 3) {
      // Replace the first quaternion (values 4..7) by (1.5, 0, 0, 0).
      std::istringstream ls(line);
      std::vector<std::string> tok;
      std::string tkn;
      while (ls >> tkn) tok.push_back(tkn);
      tok[3] = "1.5";
      tok[4] = tok[5] = tok[6] = "0";
      line.clear();
      for (std::size_t i = 0; i < tok.size(); ++i) line += (i ? " " : "") + tok[i];
    }
    rebuilt += line + "\n";
    ++idx;
  }
  try {
    dataset_from_string(rebuilt);
    FAIL("expected an error");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatError::Kind::quaternion_norm);
    CHECK(std::string(e.what()).find("record 3") != std::string::npos);
  }
}

TEST_CASE("shortest round-trip number formatting") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0})
    CHECK(std::stod(format_double(v)) == v);
  CHECK(format_double(0.1) == "0.1");
}
