#include "rbflow/targets.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

#include "rbflow/errors.hpp"

namespace rbflow {

void TetraField::validate() const {
  if (!(C > 0.0)) throw ValidationError("tetra field strength C must be positive");
  if (!c.allFinite()) throw ValidationError("tetra field center must be finite");
}

BodyTemplate methane_template() {
  return BodyTemplate::centered({Vec3(-0.037, 0.090, 0.000), Vec3(0.070, 0.090, 0.000),
                                 Vec3(-0.073, 0.012, 0.064), Vec3(-0.073, 0.073, -0.100),
                                 Vec3(-0.073, 0.184, 0.035)});
}

double tetra_energy(const BodyCoords& body, const TetraField& field) {
  double e = 0.0;
  for (Eigen::Index k = 0; k < body.rows(); ++k) {
    for (int d = 0; d < 3; ++d) {
      const double s = body(k, d) - field.c[d];
      const double s2 = s * s;
      e += s2 * s2;
    }
  }
  return field.C * e;
}

double tetra_energy(const UnitQuaternion& q, const BodyTemplate& body, const TetraField& field) {
  return tetra_energy(pose_apply(RigidPose{Vec3::Zero(), q}, body), field);
}

BodyTemplate bent_template(double bond, double angle_deg) {
  const double half = 0.5 * angle_deg * M_PI / 180.0;
  return BodyTemplate({Vec3::Zero(), Vec3(bond * std::sin(half), bond * std::cos(half), 0.0),
                       Vec3(-bond * std::sin(half), bond * std::cos(half), 0.0)});
}

ToyCrystal::ToyCrystal(const CrystalParams& params)
    : params_(params), body_(bent_template(params.bond, params.angle_deg)) {
  const auto& p = params_;
  if (p.n < 2) throw ValidationError("crystal needs at least 2 molecules");
  if (!(p.spacing > 0.0)) throw ValidationError("lattice spacing must be positive");
  if (!(p.k_t > 0.0)) throw ValidationError("tether stiffness must be positive");
  if (!(p.epsilon >= 0.0)) throw ValidationError("epsilon must be non-negative");
  if (!(p.sigma > 0.0)) throw ValidationError("sigma must be positive");
  if (!(p.delta > 0.0)) throw ValidationError("softening length must be positive");
  if (!(p.r_cut > 0.0)) throw ValidationError("cutoff must be positive");
  if (p.charges.size() != body_.size()) throw ValidationError("one charge per bead required");

  int m = 1;
  while (m * m * m < p.n) ++m;
  for (int a = 0; a < m && static_cast<int>(sites_.size()) < p.n; ++a)
    for (int b = 0; b < m && static_cast<int>(sites_.size()) < p.n; ++b)
      for (int c = 0; c < m && static_cast<int>(sites_.size()) < p.n; ++c)
        sites_.push_back(p.spacing * Vec3(a, b, c));
}

namespace {

double raw_pair(double r2, double qa, double qb, const CrystalParams& p) {
  const double soft = r2 + p.delta * p.delta;
  const double s = p.sigma * p.sigma / soft;
  const double s3 = s * s * s;
  return 4.0 * p.epsilon * (s3 * s3 - s3) + qa * qb / std::sqrt(soft);
}

}  // namespace

double ToyCrystal::pair_term(double r2, double qa, double qb) const {
  const double rc2 = params_.r_cut * params_.r_cut;
  if (r2 >= rc2) return 0.0;
  return raw_pair(r2, qa, qb, params_) - raw_pair(rc2, qa, qb, params_);
}

PoseSet crystal_reference(const ToyCrystal& model) {
  PoseSet ps{model.body(), {}};
  for (const auto& s : model.sites()) ps.poses.push_back(RigidPose{s, UnitQuaternion()});
  return ps;
}

namespace {

std::vector<BodyCoords> all_beads(const PoseSet& poses) {
  std::vector<BodyCoords> out;
  out.reserve(poses.poses.size());
  for (const auto& p : poses.poses) out.push_back(pose_apply(p, poses.body));
  return out;
}

double pair_energy(const BodyCoords& a, const BodyCoords& b, const ToyCrystal& model) {
  const auto& q = model.params().charges;
  double e = 0.0;
  for (Eigen::Index k = 0; k < a.rows(); ++k)
    for (Eigen::Index l = 0; l < b.rows(); ++l)
      e += model.pair_term((a.row(k) - b.row(l)).squaredNorm(), q[k], q[l]);
  return e;
}

double tether(const RigidPose& p, const Vec3& site, double k_t) {
  return k_t * (p.x0 - site).squaredNorm();
}

void check_size(const PoseSet& poses, const ToyCrystal& model) {
  if (static_cast<int>(poses.poses.size()) != model.size())
    throw ValidationError("pose count does not match the crystal size");
}

}  // namespace

double crystal_energy(const PoseSet& poses, const ToyCrystal& model) {
  check_size(poses, model);
  const auto beads = all_beads(poses);
  double e = 0.0;
  for (int i = 0; i < model.size(); ++i) {
    e += tether(poses.poses[i], model.sites()[i], model.params().k_t);
    for (int j = i + 1; j < model.size(); ++j) e += pair_energy(beads[i], beads[j], model);
  }
  return e;
}

double crystal_molecule_energy(const PoseSet& poses, int i, const ToyCrystal& model) {
  check_size(poses, model);
  const BodyCoords bi = pose_apply(poses.poses[i], poses.body);
  double e = tether(poses.poses[i], model.sites()[i], model.params().k_t);
  for (int j = 0; j < model.size(); ++j) {
    if (j == i) continue;
    e += pair_energy(bi, pose_apply(poses.poses[j], poses.body), model);
  }
  return e;
}

double crystal_energy_delta(const PoseSet& poses, int i, const RigidPose& pose,
                            const ToyCrystal& model) {
  check_size(poses, model);
  const BodyCoords old_b = pose_apply(poses.poses[i], poses.body);
  const BodyCoords new_b = pose_apply(pose, poses.body);
  const Vec3& site = model.sites()[i];
  double d = tether(pose, site, model.params().k_t) - tether(poses.poses[i], site, model.params().k_t);
  for (int j = 0; j < model.size(); ++j) {
    if (j == i) continue;
    const BodyCoords bj = pose_apply(poses.poses[j], poses.body);
    d += pair_energy(new_b, bj, model) - pair_energy(old_b, bj, model);
  }
  return d;
}

ad::Var crystal_energy_tape(const ad::Var& pos, const ad::Var& rot, const ToyCrystal& model) {
  using ad::Tensor;
  using ad::Var;
  ad::Tape& t = *pos.tape();
  const auto& p = model.params();
  const int n = model.size();
  const int kb = static_cast<int>(model.body().size());
  const Eigen::Index batch = pos.rows();
  if (pos.cols() != 3 * n || rot.cols() != 4 * n || rot.rows() != batch)
    throw std::invalid_argument("crystal_energy_tape: shape mismatch");

  // Quadratic monomials m = (q A) * (q B), ordered xx yy zz ww xy xz xw yz yw zw.
  static const int ma[10] = {0, 1, 2, 3, 0, 0, 0, 1, 1, 2};
  static const int mb[10] = {0, 1, 2, 3, 1, 2, 3, 2, 3, 3};
  Tensor A = Tensor::Zero(4, 10), Bm = Tensor::Zero(4, 10);
  for (int j = 0; j < 10; ++j) {
    A(ma[j], j) = 1.0;
    Bm(mb[j], j) = 1.0;
  }
  // Row-major rotation matrix entries as (homogeneous) quadratic forms.
  Tensor M = Tensor::Zero(10, 9);
  enum { XX, YY, ZZ, WW, XY, XZ, XW, YZ, YW, ZW };
  M(XX, 0) = 1; M(WW, 0) = 1; M(YY, 0) = -1; M(ZZ, 0) = -1;
  M(XY, 1) = 2; M(ZW, 1) = -2;
  M(XZ, 2) = 2; M(YW, 2) = 2;
  M(XY, 3) = 2; M(ZW, 3) = 2;
  M(YY, 4) = 1; M(WW, 4) = 1; M(XX, 4) = -1; M(ZZ, 4) = -1;
  M(YZ, 5) = 2; M(XW, 5) = -2;
  M(XZ, 6) = 2; M(YW, 6) = -2;
  M(YZ, 7) = 2; M(XW, 7) = 2;
  M(ZZ, 8) = 1; M(WW, 8) = 1; M(XX, 8) = -1; M(YY, 8) = -1;

  // World offset of bead k: R b_k, linear in the 9 entries of R.
  Tensor T = Tensor::Zero(9, 3 * kb);
  Tensor rep = Tensor::Zero(3, 3 * kb);
  for (int k = 0; k < kb; ++k) {
    const Vec3& b = model.body().bead(k);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) T(3 * r + c, 3 * k + r) = b[c];
      rep(r, 3 * k + r) = 1.0;
    }
  }

  const Var q = reshape(rot, batch * n, 4);
  const Var mono = matmul(q, t.constant(A)) * matmul(q, t.constant(Bm));
  const Var rmat = matmul(mono, t.constant(M));
  const Var x = reshape(pos, batch * n, 3);
  const Var beads = reshape(matmul(rmat, t.constant(T)) + matmul(x, t.constant(rep)), batch,
                            static_cast<Eigen::Index>(n) * kb * 3);

  // Differences for every bead pair of every molecule pair.
  std::vector<std::array<int, 4>> pairs;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      for (int k = 0; k < kb; ++k)
        for (int l = 0; l < kb; ++l) pairs.push_back({i, j, k, l});
  const auto np = static_cast<Eigen::Index>(pairs.size());
  Tensor D = Tensor::Zero(static_cast<Eigen::Index>(n) * kb * 3, 3 * np);
  const double rc2 = p.r_cut * p.r_cut;
  Tensor qq(1, np), shift(1, np);
  for (Eigen::Index s = 0; s < np; ++s) {
    const auto [i, j, k, l] = pairs[s];
    for (int d = 0; d < 3; ++d) {
      D((i * kb + k) * 3 + d, 3 * s + d) = 1.0;
      D((j * kb + l) * 3 + d, 3 * s + d) = -1.0;
    }
    qq(0, s) = p.charges[k] * p.charges[l];
    shift(0, s) = raw_pair(rc2, p.charges[k], p.charges[l], p);
  }
  const Var diff = matmul(beads, t.constant(D));
  const Var r2 = reshape(row_sum(reshape(square(diff), batch * np, 3)), batch, np);

  // Truncation mask from the current values; the energy is continuous there.
  const Tensor mask = (r2.value().array() < rc2).cast<double>().matrix();
  const Var soft = r2 + p.delta * p.delta;
  const Var s = (p.sigma * p.sigma) / soft;
  const Var s3 = s * square(s);
  const Var lj = (4.0 * p.epsilon) * (square(s3) - s3);
  const Var coul = t.constant(qq) / sqrt(soft);
  const Var pair = (lj + coul - t.constant(shift)) * t.constant(mask);

  Tensor sites(1, 3 * n);
  for (int i = 0; i < n; ++i) sites.block(0, 3 * i, 1, 3) = model.sites()[i].transpose();
  const Var teth = p.k_t * row_sum(square(pos - t.constant(sites)));
  return row_sum(pair) + teth;
}

double ensemble_u(double energy, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
  return energy / temperature;
}

std::vector<double> geometric_ladder(double t0, double t1, int rungs) {
  if (rungs < 2) throw ValidationError("a temperature ladder needs at least 2 rungs");
  if (!(t0 > 0.0) || !(t1 > 0.0)) throw ValidationError("temperatures must be positive");
  std::vector<double> out(rungs);
  const double ratio = std::pow(t1 / t0, 1.0 / (rungs - 1));
  for (int i = 0; i < rungs; ++i) out[i] = t0 * std::pow(ratio, i);
  out.back() = t1;
  return out;
}

}  // namespace rbflow
