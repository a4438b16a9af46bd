#pragma once

// Dimensionless target energies: a tetrahedral body in an external quartic
// field and a small tethered crystal of three-bead rigid molecules.

#include <vector>

#include "rbflow/autodiff.hpp"
#include "rbflow/geom.hpp"

namespace rbflow {

// ---------------------------------------------------------------------------
// Tetrahedron in an external field

struct TetraField {
  Vec3 c = Vec3(0.09, -0.073, 0.0);
  double C = 136.98630;

  void validate() const;
};

/// Methane-like template, carbon first and at the origin (nm).
BodyTemplate methane_template();

/// C * sum_k sum_d (x_kd - c_d)^4 over all beads.
double tetra_energy(const BodyCoords& body, const TetraField& field);
/// The body posed by `q` with its bead 0 at the origin.
double tetra_energy(const UnitQuaternion& q, const BodyTemplate& body, const TetraField& field);

// ---------------------------------------------------------------------------
// Toy crystal

struct CrystalParams {
  int n = 8;
  double spacing = 3.0;
  double k_t = 5.0;
  double epsilon = 0.25;
  double sigma = 1.0;
  double delta = 0.2;
  double r_cut = 4.0;
  std::vector<double> charges{-0.8, 0.4, 0.4};
  double bond = 1.0;
  double angle_deg = 104.5;
};

/// Bent three-bead molecule: bead 0 at the origin, two beads at `bond`
/// separated by `angle_deg`, in the xy plane.
BodyTemplate bent_template(double bond, double angle_deg);

class ToyCrystal {
 public:
  explicit ToyCrystal(const CrystalParams& params);

  const CrystalParams& params() const { return params_; }
  int size() const { return params_.n; }
  const BodyTemplate& body() const { return body_; }
  /// Simple cubic sites, first n in lexicographic order of a m^3 block with
  /// m = ceil(cbrt(n)).
  const std::vector<Vec3>& sites() const { return sites_; }

  /// Shifted, truncated soft-core LJ + Coulomb term for one bead pair.
  double pair_term(double r2, double qa, double qb) const;

 private:
  CrystalParams params_;
  BodyTemplate body_;
  std::vector<Vec3> sites_;
};

/// Lattice sites with identity orientations.
PoseSet crystal_reference(const ToyCrystal& model);

double crystal_energy(const PoseSet& poses, const ToyCrystal& model);
/// Energy terms that involve molecule i (its tether and all its pairs).
double crystal_molecule_energy(const PoseSet& poses, int i, const ToyCrystal& model);
/// Change of crystal_energy when molecule i takes `pose`.
double crystal_energy_delta(const PoseSet& poses, int i, const RigidPose& pose,
                            const ToyCrystal& model);

/// Batched tape version. `pos` is (B x 3N) translations, `rot` (B x 4N)
/// quaternions (x, y, z, w per molecule). Returns (B x 1).
ad::Var crystal_energy_tape(const ad::Var& pos, const ad::Var& rot, const ToyCrystal& model);

// ---------------------------------------------------------------------------
// Temperature ensembles (k_B = 1)

double ensemble_u(double energy, double temperature);

/// `rungs` temperatures from t0 to t1 with a constant ratio.
std::vector<double> geometric_ladder(double t0, double t1, int rungs);

}  // namespace rbflow
