#pragma once

// Coupling layers over rigid-body states and the two flow stacks built from
// them: an augmented single-rotation flow (tetrahedron) and a round-robin
// position/rotation flow for the toy crystal.
//
// Direction convention: forward maps base -> data, inverse maps data -> base.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rbflow/autodiff.hpp"
#include "rbflow/geom.hpp"
#include "rbflow/nn.hpp"
#include "rbflow/s3flows.hpp"
#include "rbflow/targets.hpp"

namespace rbflow {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using ad::Parameter;

/// Rotation transform used inside a coupling layer.
struct RotationSpec {
  enum class Kind { moebius, cg, affine };
  Kind kind = Kind::moebius;
  int hidden = 0;  // potential width for cg

  /// "moebius", "affine", "cg8", "cg128", ...
  static RotationSpec parse(const std::string& s);
  std::string str() const;
  /// Raw conditioner outputs per rotation (0 for the unconditioned affine map).
  int param_count() const;
};

/// Batched state. Absent blocks are invalid Vars.
struct FlowState {
  Var pos;  // (B x 3N)
  Var rot;  // (B x 4N)
  Var aux;  // (B x A)
};

struct LayerResult {
  FlowState state;
  Var logdet;  // (B x 1)
};

class CouplingLayer {
 public:
  virtual ~CouplingLayer() = default;
  virtual std::string name() const = 0;
  virtual LayerResult forward(Tape& t, const FlowState& s) const = 0;
  virtual LayerResult inverse(Tape& t, const FlowState& s) const = 0;
};

/// effective = raw * sigmoid(gate).
double gated_init(double raw, double gate);
Var gated(const Var& raw, const Var& gate);

struct TetraFlowConfig {
  RotationSpec rotation = RotationSpec::parse("cg128");
  int reps = 2;
  int width = 128;
  int embed = 16;
  double kappa = 2.5;
  int aux_dim = 2;
  /// Bias scale of conditioner heads for blocks the map depends on evenly.
  double even_bias = 1.0;
  /// Weight scale of conditioner heads relative to fan-in init (0: zero heads).
  double head_scale = 1.0;
};

struct CrystalFlowConfig {
  int reps = 4;
  int channels = 32;
  int heads = 8;
  int rot_heads = 4;
  int blocks = 2;
  int embed = 8;
  double gate_init = -4.0;
  int fixed = 0;
  double even_bias = 0.1;
  double temperature0 = 2.5;
};

struct FlowArchitecture {
  std::string experiment;  // "tetra" | "crystal"
  TetraFlowConfig tetra;
  CrystalFlowConfig crystal;
  CrystalParams crystal_params;
  std::uint64_t seed = 0;
};

class FlowStack {
 public:
  FlowArchitecture arch;
  std::unique_ptr<nn::ParamStore> store;
  std::vector<std::unique_ptr<CouplingLayer>> layers;
  BodyTemplate body;
  int n_bodies = 1;
  int aux_dim = 0;
  std::optional<ToyCrystal> crystal;

  bool is_crystal() const { return arch.experiment == "crystal"; }
  /// True when every layer inverts in closed form on the tape.
  bool analytic_sampling() const;

  /// base -> data; logdet accumulated per row.
  LayerResult push_forward(Tape& t, const FlowState& base) const;
  /// data -> base.
  LayerResult pull_back(Tape& t, const FlowState& data) const;
  /// Tetra: symmetrized VMF x standard normal. Crystal: -u_0 (unnormalized).
  Var base_log_prob(Tape& t, const FlowState& base) const;
  /// log density of data rows: base_log_prob(pull_back(x)) + logdet.
  Var log_density(Tape& t, const FlowState& data) const;
};

std::unique_ptr<FlowStack> build_tetra_flow(const TetraFlowConfig& cfg, std::uint64_t seed);
std::unique_ptr<FlowStack> build_crystal_flow(const CrystalFlowConfig& cfg,
                                              const CrystalParams& crystal, std::uint64_t seed);
std::unique_ptr<FlowStack> build_flow(const FlowArchitecture& arch);

/// Adds N(0, scale^2) noise to every parameter (gates included); used to get
/// generic non-identity stacks in tests.
void perturb_parameters(FlowStack& stack, Rng& rng, double scale);

// ---------------------------------------------------------------------------
// Sample-level API

struct AugmentedState {
  UnitQuaternion q;
  Eigen::VectorXd z;
};

/// Packs samples into tape constants with the chosen quaternion representative.
FlowState pack_augmented(Tape& t, const std::vector<AugmentedState>& xs, LiftSign lift,
                         Rng* rng = nullptr);
FlowState pack_poses(Tape& t, const std::vector<PoseSet>& xs, LiftSign lift, Rng* rng = nullptr);
std::vector<AugmentedState> unpack_augmented(const FlowState& s);
std::vector<PoseSet> unpack_poses(const FlowState& s, const BodyTemplate& body);

/// Exact log density of each sample under the stack. The quaternion sign of
/// every rotation is picked by `lift` (canonical, its negative, or a fair coin).
std::vector<double> flow_log_density(const FlowStack& stack, const std::vector<AugmentedState>& xs,
                                     LiftSign lift = LiftSign::plus, Rng* rng = nullptr);
std::vector<double> flow_log_density(const FlowStack& stack, const std::vector<PoseSet>& xs,
                                     LiftSign lift = LiftSign::plus, Rng* rng = nullptr);

struct FlowSamples {
  std::vector<AugmentedState> states;  // tetra
  std::vector<PoseSet> poses;          // posed bodies for both experiments
  std::vector<double> log_density;
};

/// Draws from the tetra base and pushes through the stack. Numerical inverse
/// legs run at a tight tolerance; the returned log densities are evaluated
/// exactly at the emitted samples.
FlowSamples flow_sample(const FlowStack& stack, Rng& rng, int n);

/// Pushes given base configurations through a crystal stack. Returns mapped
/// poses and log|det| of the forward map per sample.
struct PushResult {
  std::vector<PoseSet> poses;
  std::vector<double> logdet;
};
PushResult flow_push(const FlowStack& stack, const std::vector<PoseSet>& base);

// ---------------------------------------------------------------------------
// Serialization

std::string model_to_string(const FlowStack& stack);
std::unique_ptr<FlowStack> model_from_string(const std::string& text);
void model_write(const FlowStack& stack, const std::string& path);
std::unique_ptr<FlowStack> model_read(const std::string& path);

}  // namespace rbflow
