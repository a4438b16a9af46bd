#pragma once

// Metropolis Monte Carlo over pose sets and the line-oriented dataset format.

#include <cstdint>
#include <string>
#include <vector>

#include "rbflow/geom.hpp"
#include "rbflow/targets.hpp"

namespace rbflow {

struct McmcConfig {
  double step_translation = 0.45;
  double step_rotation = 0.35;
  /// Sweeps (N elementary steps each) between recorded frames.
  int sweeps_per_frame = 10;
  int n_frames = 1000;
  /// Discarded frames; negative means 10% of n_frames.
  int burn_in_frames = -1;
  std::uint64_t seed = 0;

  void validate() const;
  int burn_in() const { return burn_in_frames < 0 ? n_frames / 10 : burn_in_frames; }
};

/// Reduced energy differences for single-body moves.
class McmcTarget {
 public:
  virtual ~McmcTarget() = default;
  virtual int size() const = 0;
  /// Whether body i receives translation proposals.
  virtual bool translates(int i) const = 0;
  /// u(after) - u(before) when body i takes `proposal`.
  virtual double delta_u(const PoseSet& state, int i, const RigidPose& proposal) const = 0;
  /// Reduced energy of a whole configuration.
  virtual double u(const PoseSet& state) const = 0;
};

/// Single tetrahedron with its bead 0 pinned at the origin.
class TetraTarget : public McmcTarget {
 public:
  TetraTarget(TetraField field, BodyTemplate body, double temperature);
  int size() const override { return 1; }
  bool translates(int) const override { return false; }
  double delta_u(const PoseSet& state, int i, const RigidPose& proposal) const override;
  double u(const PoseSet& state) const override;

 private:
  TetraField field_;
  BodyTemplate body_;
  double temperature_;
};

/// Toy crystal at temperature T. The translation of body `fixed` is never
/// moved (pass -1 to move every body).
class CrystalTarget : public McmcTarget {
 public:
  CrystalTarget(const ToyCrystal& model, double temperature, int fixed = 0);
  int size() const override { return model_.size(); }
  bool translates(int i) const override { return i != fixed_; }
  double delta_u(const PoseSet& state, int i, const RigidPose& proposal) const override;
  double u(const PoseSet& state) const override;

 private:
  ToyCrystal model_;
  double temperature_;
  int fixed_;
};

struct DatasetMeta {
  std::string kind;  // "tetra" | "crystal" | free-form for custom targets
  BodyTemplate body;
  int n_bodies = 0;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  McmcConfig generator;
  double acceptance = 0.0;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<PoseSet> frames;
};

bool operator==(const Dataset& a, const Dataset& b);

struct McmcStats {
  long long proposed = 0;
  long long accepted = 0;
  double acceptance() const { return proposed == 0 ? 0.0 : double(accepted) / double(proposed); }
};

/// Runs a single deterministic chain from `start`. Frames are recorded after
/// every `sweeps_per_frame` sweeps once the burn-in frames have passed.
Dataset mcmc_run(const McmcTarget& target, const PoseSet& start, const McmcConfig& cfg,
                 McmcStats* stats = nullptr);

/// One header line (JSON) followed by one line of 7N numbers per frame.
std::string dataset_to_string(const Dataset& ds);
Dataset dataset_from_string(const std::string& text);
void dataset_write(const Dataset& ds, const std::string& path);
Dataset dataset_read(const std::string& path);

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

}  // namespace rbflow
