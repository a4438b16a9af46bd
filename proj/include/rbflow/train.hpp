#pragma once

// Losses, Adam, the cosine schedule and the two training recipes: maximum
// likelihood on tetrahedron MCMC data and reverse KL on toy-crystal base data.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rbflow/coupling.hpp"
#include "rbflow/sampling.hpp"

namespace rbflow {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m, v;
  long long t = 0;
};

/// One bias-corrected Adam update of every parameter in `store`. `grads` is
/// aligned with store.all().
void adam_step(nn::ParamStore& store, const std::vector<Tensor>& grads, AdamState& state,
               double lr, const AdamConfig& cfg = {});

/// lr_end + (lr_start - lr_end) (1 + cos(pi step / total)) / 2.
double cosine_lr(long long step, long long total, double lr_start, double lr_end);

struct TrainConfig {
  std::string loss = "nll";         // "nll" | "rkl"
  std::string schedule = "constant";  // "constant" | "cosine"
  int batch = 32;
  int epochs = 1;
  int steps_per_epoch = 5000;
  double lr = 5e-4;
  double lr_end = 1e-5;  // cosine only
  AdamConfig adam;
  /// Trailing fraction of the dataset held out for evaluation.
  double eval_fraction = 0.2;
  /// Target temperature of reverse-KL training (crystal).
  double target_temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  long long total_steps() const { return static_cast<long long>(epochs) * steps_per_epoch; }
  double lr_at(long long step) const;

  static TrainConfig tetra_defaults();
  static TrainConfig crystal_defaults();
};

/// Fresh N(0, I) auxiliaries for each rotation.
std::vector<AugmentedState> augment(const std::vector<UnitQuaternion>& qs, int aux_dim, Rng& rng);

/// Mean of -log q(x, z) over the batch (the augmented bound).
Var nll_loss(Tape& t, const FlowStack& stack, const std::vector<AugmentedState>& batch);

/// Reduced target energy per row of (positions, rotations).
using TapeEnergy = std::function<Var(const Var& pos, const Var& rot)>;

/// u = E / temperature of the stack's toy crystal.
TapeEnergy crystal_target(const FlowStack& stack, double temperature);

/// Mean of u1(Phi(x)) - log|J| + log p0(x) over base configurations x. The
/// crystal base density is exp(-E/T0) without its normalizer, so with
/// u1 = crystal_target the loss equals the mean generalized work exactly.
Var rkl_loss(Tape& t, const FlowStack& stack, const std::vector<PoseSet>& base,
             const TapeEnergy& u1);

/// Loss value and gradients aligned with stack.store->all().
struct LossGrad {
  double loss = 0.0;
  std::vector<Tensor> grads;
};
using LossFn = std::function<Var(Tape&)>;
LossGrad loss_and_grad(const FlowStack& stack, const LossFn& loss);

/// Compares autodiff gradients with central differences on `probes` randomly
/// chosen parameter entries. Returns max |g_ad - g_fd| / max(1, |g_fd|).
double loss_gradient_check(FlowStack& stack, const LossFn& loss, Rng& rng, int probes,
                           double h = 1e-5);

/// 16 hex digits identifying the current parameter values.
std::string params_digest(const FlowStack& stack);

struct StepRecord {
  long long step = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  /// Tetra: held-out NLL. Crystal: LFEP estimate on the held-out half.
  double eval = 0.0;
  /// Crystal only: mean work and Kish ESS (percent) on the held-out half.
  double mean_work = 0.0;
  double ess_percent = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::string summary;  // JSON document

  /// One JSON object per line: every step, then every epoch.
  std::string records() const;
};

struct TrainResult {
  std::unique_ptr<FlowStack> stack;
  TrainLog log;
  std::vector<std::size_t> train_index, eval_index;
};

/// Contiguous split: leading frames train, trailing `eval_fraction` evaluate.
void split_indices(std::size_t n, double eval_fraction, std::vector<std::size_t>& train,
                   std::vector<std::size_t>& eval);

/// Held-out augmented NLL, with auxiliaries drawn from `seed`.
double tetra_eval_nll(const FlowStack& stack, const std::vector<UnitQuaternion>& qs,
                      std::uint64_t seed);

/// `on_step` may be used for progress output; it does not affect results.
using StepHook = std::function<void(const StepRecord&)>;

TrainResult train_tetra(const Dataset& data, const TetraFlowConfig& arch, const TrainConfig& cfg,
                        const StepHook& on_step = {});
TrainResult train_crystal(const Dataset& data, const CrystalFlowConfig& arch,
                          const CrystalParams& params, const TrainConfig& cfg,
                          const StepHook& on_step = {});

}  // namespace rbflow
