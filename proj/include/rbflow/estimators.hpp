#pragma once

// Free-energy estimators in log space: learned free energy perturbation,
// MBAR with a bisection BAR cross-check, Kish effective sample size and
// frame bootstrap.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "rbflow/coupling.hpp"
#include "rbflow/targets.hpp"

namespace rbflow {

double log_sum_exp(const std::vector<double>& x);

/// w = u1(Phi(x)) - u0(x) - log|J_Phi(x)|.
inline double generalized_work(double u1_mapped, double u0, double logdet) {
  return u1_mapped - u0 - logdet;
}

/// Works of a crystal stack on base configurations between temperatures t0
/// and t1 (reduced units).
std::vector<double> crystal_works(const FlowStack& stack, const std::vector<PoseSet>& base,
                                  double t0, double t1);

struct LfepResult {
  double delta_f = 0.0;  // -log mean exp(-w)
  double mean_work = 0.0;  // upper bound, >= delta_f
};

LfepResult lfep_estimate(const std::vector<double>& works);

struct MbarOptions {
  double tol = 1e-10;
  int max_iter = 10000;
};

/// u is (K states x N samples); counts[k] samples came from state k, stored
/// contiguously in state order. Returns F with F[0] = 0.
Eigen::VectorXd mbar_solve(const Eigen::MatrixXd& u, const std::vector<int>& counts,
                           const MbarOptions& opt = {}, int* iterations = nullptr);

/// Bennett acceptance ratio by bisection. w_forward = u_B - u_A on samples of
/// A, w_reverse = u_A - u_B on samples of B. Returns F_B - F_A.
double bar_bisection(const std::vector<double>& w_forward, const std::vector<double>& w_reverse,
                     double tol = 1e-12);

/// (sum w)^2 / sum w^2 from log weights; -inf entries count as zero weight.
double kish_ess(const std::vector<double>& log_weights);

struct BootstrapResult {
  double mean = 0.0;
  double sigma = 0.0;
  std::vector<double> values;
};

/// Resamples indices with replacement inside each block (frames of one state
/// stay with that state) and applies `estimator` to every resample.
BootstrapResult bootstrap(const std::function<double(const std::vector<std::size_t>&)>& estimator,
                          const std::vector<std::size_t>& block_sizes, int resamples,
                          std::uint64_t seed);

struct FreeEnergyEstimate {
  std::string method;
  double delta_f = 0.0;
  double sigma = 0.0;
  int resamples = 0;
  bool per_molecule = false;
  std::vector<std::size_t> counts;
};

/// 64-bit FNV-1a digest of a file's bytes, as 16 hex digits.
std::string file_digest(const std::string& path);

}  // namespace rbflow
