#pragma once

// Flip-equivariant diffeomorphisms of S^3 and the symmetrized von Mises-Fisher
// density.
//
// Every map comes in two flavours: plain double precision on a single point
// (used by the numerical inverse, samplers and tests) and a batched tape
// version on (B x 4) rows of quaternions with per-row parameters (used inside
// coupling layers). Both share the same formulas.

#include <array>
#include <functional>
#include <utility>

#include <Eigen/Core>

#include "rbflow/autodiff.hpp"
#include "rbflow/geom.hpp"
#include "rbflow/random.hpp"

namespace rbflow {

struct MapResult {
  Vec4 p;
  double logdet = 0.0;
};

// ---------------------------------------------------------------------------
// Symmetrized Moebius transform

struct MoebiusParams {
  /// Realized center, |omega| < 1.
  Vec4 omega = Vec4::Zero();

  /// omega = 0.99 tanh(|v|) v / |v|.
  static MoebiusParams from_raw(const Vec4& v);
};

inline constexpr double kMoebiusRadius = 0.99;

/// Identity at omega = 0; flip-equivariant in p and invariant under omega -> -omega.
MapResult moebius_sym_forward(const Vec4& p, const MoebiusParams& params);
Vec4 moebius_sym_inverse(const Vec4& p_prime, const MoebiusParams& params);
/// log volume factor of the forward map at p.
double moebius_sym_logdet(const Vec4& p, const MoebiusParams& params);

/// The unsymmetrized building block p -> p - 2 proj_{q-p}(p) (an involution
/// for |q| < 1).
Vec4 moebius_chord(const Vec4& p, const Vec4& q);

/// Planar reduction with p = (1,0,0,0)-frame coordinate x and r = |omega|.
double moebius_planar_forward(double x, double r);
double moebius_planar_inverse(double x_prime, double r);

// ---------------------------------------------------------------------------
// Projective convex gradient map
//
// phi(p) = sum_h u_h log(b_h + cosh(W_h . p)) + c |p|^2 with u, b, c > 0.

struct ConvexPotentialParams {
  Eigen::Matrix<double, Eigen::Dynamic, 4> W;
  Eigen::VectorXd u_raw;
  Eigen::VectorXd b_raw;
  double c_raw = 0.0;

  int hidden() const { return static_cast<int>(W.rows()); }
  Eigen::VectorXd u() const;
  Eigen::VectorXd b() const;
  double c() const;
};

/// phi with W = 0 and all raw values 0 (the identity map).
ConvexPotentialParams identity_potential(int hidden);

Vec4 cg_gradient(const Vec4& p, const ConvexPotentialParams& params);
Eigen::Matrix4d cg_hessian(const Vec4& p, const ConvexPotentialParams& params);

/// p -> grad phi / |grad phi| on S^3 with its log volume factor computed from
/// the gradient and Hessian of an arbitrary smooth potential.
MapResult projective_gradient_map(const Vec4& p, const Vec4& grad, const Eigen::Matrix4d& hess);

MapResult cg_forward(const Vec4& p, const ConvexPotentialParams& params);

struct InverseStats {
  int iterations = 0;
  double residual = 0.0;
};

/// Numerical inverse: minimizes |Phi(x/|x|) - p'|^2 over R^4 with BFGS and a
/// cubic-interpolation line search started at p'. Throws NumericalError when
/// the residual is still above `tol` after `max_iter` iterations.
Vec4 cg_inverse(const Vec4& p_prime, const ConvexPotentialParams& params, double tol = 1e-5,
                int max_iter = 50, InverseStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Affine quaternion map p -> Wp / |Wp|

/// Throws ValidationError if W is singular.
Vec4 affine_quat_map(const Vec4& p, const Eigen::Matrix4d& W);
double affine_quat_logdet(const Vec4& p, const Eigen::Matrix4d& W);

// ---------------------------------------------------------------------------
// Symmetrized von Mises-Fisher density on S^3

struct SymVMFParams {
  Vec4 mu = Vec4(1.0, 0.0, 0.0, 0.0);
  double kappa = 0.0;
};

/// log C_4(kappa) with C_4 = kappa / (4 pi^2 I_1(kappa)).
double vmf_log_normalizer(double kappa);
double svmf_logpdf(const Vec4& q, const SymVMFParams& params);
Vec4 svmf_sample(const SymVMFParams& params, Rng& rng);

/// Uniform density on S^3, -log(2 pi^2).
double uniform_s3_logpdf();

// ---------------------------------------------------------------------------
// Numerical oracle

/// 0.5 log det(E^T J^T J E) of a map S^3 -> S^3 at p, with the ambient
/// Jacobian J taken by central differences along the tangent basis of p.
double numeric_tangent_logdet(const std::function<Vec4(const Vec4&)>& f, const Vec4& p,
                              double h = 1e-5);

// ---------------------------------------------------------------------------
// Batched tape versions. `p` is (B x 4); parameters carry one row per sample
// or a single broadcast row.

namespace ad_maps {

using ad::Var;

/// Tangent basis columns of each row of p, as three (B x 4) variables. The
/// seed vectors are chosen from the current values and treated as constants.
std::array<Var, 3> tangent_basis(const Var& p);

/// Returns (p', logdet (B x 1)). `omega` is (B x 4) or (1 x 4).
std::pair<Var, Var> moebius_forward(const Var& p, const Var& omega);
std::pair<Var, Var> moebius_inverse(const Var& p_prime, const Var& omega);

/// Realized convex potential; W is (B x 4H) holding row-major (H x 4) blocks,
/// u and b are (B x H), c is (B x 1). Rows may broadcast.
struct Potential {
  Var W, u, b, c;
  int hidden;
};

std::pair<Var, Var> cg_forward(const Var& p, const Potential& phi);

/// W is (B x 16) or (1 x 16) row-major; log|det W| is (B x 1) or (1 x 1).
std::pair<Var, Var> affine_forward(const Var& p, const Var& W, const Var& log_abs_det);

/// Symmetrized VMF log density per row (B x 1).
Var svmf_logpdf(const Var& q, const SymVMFParams& params);

}  // namespace ad_maps

}  // namespace rbflow
