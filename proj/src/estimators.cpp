#include "rbflow/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "rbflow/errors.hpp"

namespace rbflow {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

double log_sum_exp(const std::vector<double>& x) {
  double m = -kInf;
  for (double v : x) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<double> crystal_works(const FlowStack& stack, const std::vector<PoseSet>& base,
                                  double t0, double t1) {
  if (!stack.crystal) throw ValidationError("crystal works need a crystal flow");
  const ToyCrystal& model = *stack.crystal;
  const PushResult pushed = flow_push(stack, base);
  std::vector<double> w(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    w[i] = generalized_work(ensemble_u(crystal_energy(pushed.poses[i], model), t1),
                            ensemble_u(crystal_energy(base[i], model), t0), pushed.logdet[i]);
  }
  return w;
}

LfepResult lfep_estimate(const std::vector<double>& works) {
  if (works.size() < 2) throw ValidationError("LFEP needs at least 2 work values");
  std::vector<double> neg(works.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < works.size(); ++i) {
    if (!std::isfinite(works[i])) throw NumericalError("non-finite work value", works[i]);
    neg[i] = -works[i];
    mean += works[i];
  }
  mean /= double(works.size());
  LfepResult r;
  r.delta_f = -log_sum_exp(neg) + std::log(double(works.size()));
  r.mean_work = mean;
  return r;
}

Eigen::VectorXd mbar_solve(const Eigen::MatrixXd& u, const std::vector<int>& counts,
                           const MbarOptions& opt, int* iterations) {
  const Eigen::Index k_states = u.rows();
  const Eigen::Index n = u.cols();
  if (k_states < 1 || static_cast<Eigen::Index>(counts.size()) != k_states)
    throw ValidationError("one sample count per state required");
  long long total = 0;
  for (int c : counts) {
    if (c <= 0) throw ValidationError("every state needs at least one sample");
    total += c;
  }
  if (total != n) throw ValidationError("sample counts do not match the energy matrix");
  Eigen::VectorXd log_n(k_states);
  for (Eigen::Index k = 0; k < k_states; ++k) log_n[k] = std::log(double(counts[k]));

  Eigen::VectorXd f = Eigen::VectorXd::Zero(k_states);
  if (k_states == 1) {
    if (iterations) *iterations = 0;
    return f;
  }
  Eigen::VectorXd log_den(n);
  std::vector<double> terms(k_states);
  int it = 0;
  double delta = kInf;
  for (; it < opt.max_iter; ++it) {
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index k = 0; k < k_states; ++k) terms[k] = log_n[k] + f[k] - u(k, j);
      log_den[j] = log_sum_exp(terms);
      if (!std::isfinite(log_den[j])) {
        throw NumericalError("MBAR: sample " + std::to_string(j) +
                                 " has zero weight in every state (no overlap)",
                             0.0);
      }
    }
    Eigen::VectorXd f_new(k_states);
    std::vector<double> col(n);
    for (Eigen::Index k = 0; k < k_states; ++k) {
      for (Eigen::Index j = 0; j < n; ++j) col[j] = -u(k, j) - log_den[j];
      f_new[k] = -log_sum_exp(col);
    }
    f_new.array() -= f_new[0];
    delta = (f_new - f).cwiseAbs().maxCoeff();
    f = f_new;
    if (!f.allFinite()) throw NumericalError("MBAR: free energies diverged", delta);
    if (delta < opt.tol) break;
  }
  if (iterations) *iterations = it + 1;
  if (!(delta < opt.tol)) {
    throw NumericalError("MBAR did not converge (max change " + std::to_string(delta) + ")", delta);
  }
  return f;
}

namespace {

// Fermi-function balance of BAR; increasing in df.
double bar_balance(const std::vector<double>& wf, const std::vector<double>& wr, double df) {
  const double m = std::log(double(wf.size()) / double(wr.size()));
  auto fermi = [](double x) { return x > 0 ? std::exp(-x) / (1.0 + std::exp(-x)) : 1.0 / (1.0 + std::exp(x)); };
  double lhs = 0.0, rhs = 0.0;
  for (double w : wf) lhs += fermi(m + w - df);
  for (double w : wr) rhs += fermi(-m + w + df);
  return lhs - rhs;
}

}  // namespace

double bar_bisection(const std::vector<double>& wf, const std::vector<double>& wr, double tol) {
  if (wf.empty() || wr.empty()) throw ValidationError("BAR needs samples from both states");
  double lo = -1.0, hi = 1.0;
  while (bar_balance(wf, wr, lo) > 0.0) lo *= 2.0;
  while (bar_balance(wf, wr, hi) < 0.0) hi *= 2.0;
  while (hi - lo > tol * std::max(1.0, std::abs(lo))) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    if (bar_balance(wf, wr, mid) < 0.0) lo = mid; else hi = mid;
  }
  return 0.5 * (lo + hi);
}

double kish_ess(const std::vector<double>& lw) {
  if (lw.empty()) throw ValidationError("Kish ESS needs at least one weight");
  const double m = *std::max_element(lw.begin(), lw.end());
  if (!std::isfinite(m)) throw NumericalError("all importance weights are zero", 0.0);
  // Weights scaled so the largest is 1; equal weights give exactly n.
  double s1 = 0.0, s2 = 0.0;
  for (double v : lw) {
    const double w = std::exp(v - m);
    s1 += w;
    s2 += w * w;
  }
  return s1 * s1 / s2;
}

BootstrapResult bootstrap(const std::function<double(const std::vector<std::size_t>&)>& estimator,
                          const std::vector<std::size_t>& block_sizes, int resamples,
                          std::uint64_t seed) {
  if (resamples < 2) throw ValidationError("bootstrap needs at least 2 resamples");
  BootstrapResult r;
  std::vector<std::size_t> idx;
  for (int b = 0; b < resamples; ++b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    idx.clear();
    std::size_t offset = 0;
    for (std::size_t size : block_sizes) {
      if (size == 0) throw ValidationError("empty bootstrap block");
      std::uniform_int_distribution<std::size_t> pick(0, size - 1);
      for (std::size_t i = 0; i < size; ++i) idx.push_back(offset + pick(rng));
      offset += size;
    }
    r.values.push_back(estimator(idx));
  }
  for (double v : r.values) r.mean += v / resamples;
  double var = 0.0;
  for (double v : r.values) var += (v - r.mean) * (v - r.mean);
  r.sigma = std::sqrt(var / (resamples - 1));
  return r;
}

std::string file_digest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot read " + path);
  std::uint64_t h = 14695981039346656037ULL;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < f.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return out;
}

}  // namespace rbflow
