#pragma once

// Invariant suite behind the `check` command. Every check is deterministic
// for a given seed.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace rbflow {

struct CheckResult {
  std::string module;
  std::string name;
  bool passed = false;
  std::string detail;
};

using CheckHook = std::function<void(const CheckResult&)>;

std::vector<CheckResult> check_geom(std::uint64_t seed);
std::vector<CheckResult> check_autodiff(std::uint64_t seed);
/// Symmetrized Moebius and planar closed forms.
std::vector<CheckResult> check_moebius(std::uint64_t seed);
/// Convex gradient maps, their numerical inverse and the affine special case.
std::vector<CheckResult> check_convex_gradient(std::uint64_t seed);
/// Both of the above plus diffeomorphism and composition checks.
std::vector<CheckResult> check_s3flows(std::uint64_t seed);
std::vector<CheckResult> check_coupling(std::uint64_t seed);
std::vector<CheckResult> check_targets(std::uint64_t seed);
std::vector<CheckResult> check_sampling(std::uint64_t seed);
std::vector<CheckResult> check_estimators(std::uint64_t seed);
std::vector<CheckResult> check_train(std::uint64_t seed);
/// Byte-level reproducibility of the file formats the CLI writes.
std::vector<CheckResult> check_artifacts(std::uint64_t seed);

/// All of the above in module order; `on_result` sees each result as it lands.
std::vector<CheckResult> run_checks(std::uint64_t seed, const CheckHook& on_result = {});

/// "PASS module/name: detail" lines.
std::string format_checks(const std::vector<CheckResult>& results);

}  // namespace rbflow
