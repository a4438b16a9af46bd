#include "rbflow/s3flows.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Geometry>
#include <Eigen/LU>

#include "rbflow/errors.hpp"

namespace rbflow {

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double det3_rows(const Eigen::Matrix3d& a) {
  return a.row(0).cross(a.row(1)).dot(a.row(2));
}

}  // namespace

// ---------------------------------------------------------------------------
// Moebius

MoebiusParams MoebiusParams::from_raw(const Vec4& v) {
  const double n = v.norm();
  MoebiusParams out;
  if (n > 0.0) out.omega = v * (kMoebiusRadius * std::tanh(n) / n);
  return out;
}

double moebius_sym_logdet(const Vec4& p, const MoebiusParams& params) {
  const Vec4& w = params.omega;
  const double r2 = w.squaredNorm();
  const double d = p.dot(w);
  const double qy2 = std::max(r2 - d * d, 0.0);
  const double one_m = 1.0 - r2;
  return std::log(one_m) + 3.0 * std::log1p(r2) - 2.0 * std::log(4.0 * qy2 + one_m * one_m);
}

MapResult moebius_sym_forward(const Vec4& p, const MoebiusParams& params) {
  const Vec4& w = params.omega;
  const double r2 = w.squaredNorm();
  const Vec4 y = (1.0 + r2) * p - (2.0 * p.dot(w)) * w;
  return {y / y.norm(), moebius_sym_logdet(p, params)};
}

Vec4 moebius_sym_inverse(const Vec4& p_prime, const MoebiusParams& params) {
  const Vec4& w = params.omega;
  const double r2 = w.squaredNorm();
  const Vec4 y = (1.0 - r2) * p_prime + (2.0 * p_prime.dot(w)) * w;
  return y / y.norm();
}

Vec4 moebius_chord(const Vec4& p, const Vec4& q) {
  const Vec4 u = q - p;
  return p - (2.0 * p.dot(u) / u.squaredNorm()) * u;
}

double moebius_planar_forward(double x, double r) {
  const double r2 = r * r;
  return x * (r2 - 1.0) / std::sqrt(1.0 + r2 * r2 + r2 * (2.0 - 4.0 * x * x));
}

double moebius_planar_inverse(double x_prime, double r) {
  const double r2 = r * r;
  return -x_prime * (r2 + 1.0) / std::sqrt(1.0 + r2 * r2 + r2 * (4.0 * x_prime * x_prime - 2.0));
}

// ---------------------------------------------------------------------------
// Convex gradient map

Eigen::VectorXd ConvexPotentialParams::u() const { return u_raw.unaryExpr(&softplus); }
Eigen::VectorXd ConvexPotentialParams::b() const { return b_raw.unaryExpr(&softplus); }
double ConvexPotentialParams::c() const { return softplus(c_raw); }

ConvexPotentialParams identity_potential(int hidden) {
  ConvexPotentialParams p;
  p.W = Eigen::Matrix<double, Eigen::Dynamic, 4>::Zero(hidden, 4);
  p.u_raw = Eigen::VectorXd::Zero(hidden);
  p.b_raw = Eigen::VectorXd::Zero(hidden);
  return p;
}

Vec4 cg_gradient(const Vec4& p, const ConvexPotentialParams& params) {
  const Eigen::ArrayXd s = (params.W * p).array();
  const Eigen::ArrayXd a = params.u().array() * s.sinh() / (params.b().array() + s.cosh());
  return params.W.transpose() * a.matrix() + 2.0 * params.c() * p;
}

Eigen::Matrix4d cg_hessian(const Vec4& p, const ConvexPotentialParams& params) {
  const Eigen::ArrayXd s = (params.W * p).array();
  const Eigen::ArrayXd ch = s.cosh();
  const Eigen::ArrayXd b = params.b().array();
  const Eigen::ArrayXd hd = params.u().array() * (1.0 + b * ch) / (b + ch).square();
  return params.W.transpose() * hd.matrix().asDiagonal() * params.W +
         2.0 * params.c() * Eigen::Matrix4d::Identity();
}

MapResult projective_gradient_map(const Vec4& p, const Vec4& grad, const Eigen::Matrix4d& hess) {
  const double n = grad.norm();
  const Vec4 pp = grad / n;
  const TangentBasis e = tangent_basis(p);
  const TangentBasis ep = tangent_basis(pp);
  const Eigen::Matrix3d a = ep.transpose() * hess * e;
  return {pp, std::log(std::abs(det3_rows(a))) - 3.0 * std::log(n)};
}

MapResult cg_forward(const Vec4& p, const ConvexPotentialParams& params) {
  return projective_gradient_map(p, cg_gradient(p, params), cg_hessian(p, params));
}

namespace {

struct InverseObjective {
  const Vec4& target;
  const ConvexPotentialParams& params;

  // Returns l(x) and its gradient; `residual` is |Phi(x/|x|) - p'|.
  double operator()(const Vec4& x, Vec4& grad) const {
    const double nx = x.norm();
    const Vec4 y = x / nx;
    const Vec4 g = cg_gradient(y, params);
    const Eigen::Matrix4d h = cg_hessian(y, params);
    const double ng = g.norm();
    const Vec4 pp = g / ng;
    const Vec4 res = pp - target;
    const Vec4 t = res - pp * pp.dot(res);
    const Vec4 ht = h * t;
    grad = (2.0 / (ng * nx)) * (ht - y * y.dot(ht));
    return res.squaredNorm();
  }
};

// Minimizer of the cubic through (0, f0, g0) and the last two trial points.
double cubic_step(double f0, double g0, double a0, double f_a0, double a1, double f_a1) {
  const double d0 = f_a0 - f0 - g0 * a0;
  const double d1 = f_a1 - f0 - g0 * a1;
  const double denom = a0 * a0 * a1 * a1 * (a1 - a0);
  const double ca = (a0 * a0 * d1 - a1 * a1 * d0) / denom;
  const double cb = (-a0 * a0 * a0 * d1 + a1 * a1 * a1 * d0) / denom;
  if (std::abs(ca) < 1e-300) return -g0 / (2.0 * cb);
  const double disc = cb * cb - 3.0 * ca * g0;
  if (disc < 0.0) return 0.5 * a1;
  return (-cb + std::sqrt(disc)) / (3.0 * ca);
}

}  // namespace

Vec4 cg_inverse(const Vec4& p_prime, const ConvexPotentialParams& params, double tol, int max_iter,
                InverseStats* stats) {
  const InverseObjective obj{p_prime, params};
  Vec4 x = p_prime;
  Vec4 g;
  double f = obj(x, g);
  Eigen::Matrix4d hinv = 0.5 * Eigen::Matrix4d::Identity();
  bool scaled = false;
  int it = 0;
  for (; it <= max_iter; ++it) {
    if (std::sqrt(f) <= tol) break;
    if (it == max_iter) break;
    Vec4 d = -hinv * g;
    double gd = g.dot(d);
    if (!(gd < 0.0)) {
      hinv = 0.5 * Eigen::Matrix4d::Identity();
      d = -0.5 * g;
      gd = g.dot(d);
    }

    // Armijo backtracking with quadratic then cubic interpolation.
    double alpha = 1.0;
    Vec4 x_new = x + alpha * d;
    Vec4 g_new;
    double f_new = obj(x_new, g_new);
    double alpha_prev = 0.0, f_prev = f;
    int ls = 0;
    while (!(f_new <= f + 1e-4 * alpha * gd) && ls < 30) {
      double next;
      if (ls == 0) {
        next = -gd * alpha * alpha / (2.0 * (f_new - f - gd * alpha));
      } else {
        next = cubic_step(f, gd, alpha_prev, f_prev, alpha, f_new);
      }
      if (!std::isfinite(next)) next = 0.5 * alpha;
      next = std::clamp(next, 0.1 * alpha, 0.5 * alpha);
      alpha_prev = alpha;
      f_prev = f_new;
      alpha = next;
      x_new = x + alpha * d;
      f_new = obj(x_new, g_new);
      ++ls;
    }
    if (!(f_new <= f)) break;

    const Vec4 s = x_new - x;
    const Vec4 yv = g_new - g;
    const double sy = s.dot(yv);
    if (sy > 1e-300) {
      if (!scaled) {
        hinv = (sy / yv.squaredNorm()) * Eigen::Matrix4d::Identity();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::Matrix4d v = Eigen::Matrix4d::Identity() - rho * yv * s.transpose();
      hinv = v.transpose() * hinv * v + rho * s * s.transpose();
    }
    x = x_new;
    g = g_new;
    f = f_new;
  }
  const double residual = std::sqrt(f);
  if (stats != nullptr) *stats = {it, residual};
  if (!(residual <= tol)) {
    throw NumericalError("convex gradient map inverse did not converge (residual " +
                             std::to_string(residual) + " after " + std::to_string(it) +
                             " iterations)",
                         residual);
  }
  return x / x.norm();
}

// ---------------------------------------------------------------------------
// Affine

namespace {

void check_invertible(const Eigen::Matrix4d& W) {
  const double scale = std::max(W.cwiseAbs().maxCoeff(), 1e-300);
  if (!(std::abs(W.determinant()) > 1e-12 * std::pow(scale, 4))) {
    throw ValidationError("affine quaternion map requires an invertible matrix");
  }
}

}  // namespace

Vec4 affine_quat_map(const Vec4& p, const Eigen::Matrix4d& W) {
  check_invertible(W);
  const Vec4 y = W * p;
  return y / y.norm();
}

double affine_quat_logdet(const Vec4& p, const Eigen::Matrix4d& W) {
  check_invertible(W);
  return std::log(std::abs(W.determinant())) - 4.0 * std::log((W * p).norm());
}

// ---------------------------------------------------------------------------
// Symmetrized VMF

double uniform_s3_logpdf() { return -std::log(2.0 * M_PI * M_PI); }

double vmf_log_normalizer(double kappa) {
  if (kappa < 0.0) throw ValidationError("VMF concentration must be non-negative");
  const double log_4pi2 = std::log(4.0 * M_PI * M_PI);
  if (kappa < 1e-6) return M_LN2 - log_4pi2 - std::log1p(kappa * kappa / 8.0);
  if (kappa < 500.0) return std::log(kappa) - log_4pi2 - std::log(std::cyl_bessel_i(1.0, kappa));
  // log I_1(k) ~ k - log(2 pi k)/2 + log(1 - 3/(8k) - 15/(128k^2) - 315/(3072k^3))
  const double z = kappa;
  const double series = 1.0 - 3.0 / (8.0 * z) - 15.0 / (128.0 * z * z) - 315.0 / (3072.0 * z * z * z);
  const double log_i1 = z - 0.5 * std::log(2.0 * M_PI * z) + std::log(series);
  return std::log(kappa) - log_4pi2 - log_i1;
}

namespace {

double logcosh(double x) {
  const double a = std::abs(x);
  return a + std::log1p(std::exp(-2.0 * a)) - M_LN2;
}

}  // namespace

double svmf_logpdf(const Vec4& q, const SymVMFParams& params) {
  return vmf_log_normalizer(params.kappa) + logcosh(params.kappa * params.mu.dot(q));
}

Vec4 svmf_sample(const SymVMFParams& params, Rng& rng) {
  // Wood (1994) rejection sampler for the cosine component, dimension p = 4.
  const double kappa = params.kappa;
  const double dim1 = 3.0;
  const double b = dim1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + dim1 * dim1));
  const double x0 = (1.0 - b) / (1.0 + b);
  const double c = kappa * x0 + dim1 * std::log(1.0 - x0 * x0);
  std::gamma_distribution<double> gam(1.5, 1.0);
  double w;
  for (;;) {
    const double g1 = gam(rng), g2 = gam(rng);
    const double z = g1 / (g1 + g2);
    w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
    const double u = uniform01(rng);
    if (kappa * w + dim1 * std::log(1.0 - x0 * w) - c >= std::log(u)) break;
  }
  const Vec4 mu = params.mu.normalized();
  Vec4 v;
  double vn;
  do {
    for (int i = 0; i < 4; ++i) v[i] = standard_normal(rng);
    v -= v.dot(mu) * mu;
    vn = v.norm();
  } while (vn < 1e-12);
  Vec4 q = w * mu + std::sqrt(std::max(0.0, 1.0 - w * w)) * (v / vn);
  q.normalize();
  if (uniform01(rng) < 0.5) q = -q;
  return q;
}

// ---------------------------------------------------------------------------
// Numerical oracle

double numeric_tangent_logdet(const std::function<Vec4(const Vec4&)>& f, const Vec4& p, double h) {
  const TangentBasis e = tangent_basis(p);
  Eigen::Matrix<double, 4, 3> je;
  for (int k = 0; k < 3; ++k) {
    const Vec4 plus = (p + h * e.col(k)).normalized();
    const Vec4 minus = (p - h * e.col(k)).normalized();
    // normalize() shrinks the step to tan^-1(h); rescale to a unit-speed chart.
    const double step = 2.0 * std::atan(h);
    je.col(k) = (f(plus) - f(minus)) / step;
  }
  const Eigen::Matrix3d g = je.transpose() * je;
  return 0.5 * std::log(g.determinant());
}

// ---------------------------------------------------------------------------
// Tape versions

namespace ad_maps {

using ad::Tensor;

namespace {

Var broadcast_rows(const Var& v, Eigen::Index rows) {
  if (v.rows() == rows) return v;
  if (v.rows() != 1) throw std::invalid_argument("parameter rows do not match batch");
  return v + v.tape()->constant(Tensor::Zero(rows, v.cols()));
}

}  // namespace

std::array<Var, 3> tangent_basis(const Var& p) {
  ad::Tape& t = *p.tape();
  const Tensor& pv = p.value();
  const Eigen::Index n = pv.rows();
  std::array<Tensor, 3> seeds;
  for (auto& s : seeds) s = Tensor::Zero(n, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    int skip = 0;
    for (int k = 1; k < 4; ++k)
      if (std::abs(pv(i, k)) > std::abs(pv(i, skip))) skip = k;
    int col = 0;
    for (int k = 0; k < 4; ++k) {
      if (k == skip) continue;
      seeds[col++](i, k) = 1.0;
    }
  }
  std::array<Var, 3> e;
  for (int k = 0; k < 3; ++k) {
    Var s = t.constant(seeds[k]);
    Var v = s - p * row_dot(s, p);
    for (int j = 0; j < k; ++j) v = v - e[j] * row_dot(v, e[j]);
    e[k] = v / row_norm(v);
  }
  return e;
}

namespace {

Var moebius_logdet(const Var& p, const Var& omega) {
  Var r2 = row_dot(omega, omega);
  Var d = row_dot(p, omega);
  Var one_m = 1.0 - r2;
  Var qy2 = clamp(r2 - square(d), 0.0, std::numeric_limits<double>::infinity());
  return log(one_m) + 3.0 * log(1.0 + r2) - 2.0 * log(4.0 * qy2 + square(one_m));
}

}  // namespace

std::pair<Var, Var> moebius_forward(const Var& p, const Var& omega) {
  Var r2 = row_dot(omega, omega);
  Var y = p * (1.0 + r2) - omega * (2.0 * row_dot(p, omega));
  return {y / row_norm(y), moebius_logdet(p, omega) + p.tape()->constant(Tensor::Zero(p.rows(), 1))};
}

std::pair<Var, Var> moebius_inverse(const Var& p_prime, const Var& omega) {
  Var r2 = row_dot(omega, omega);
  Var y = p_prime * (1.0 - r2) + omega * (2.0 * row_dot(p_prime, omega));
  Var p = y / row_norm(y);
  return {p, -moebius_logdet(p, omega)};
}

std::pair<Var, Var> cg_forward(const Var& p, const Potential& phi) {
  ad::Tape& t = *p.tape();
  const Eigen::Index n = p.rows();
  const int h = phi.hidden;
  Var W = broadcast_rows(phi.W, n);
  Var Wt = btranspose(W, h, 4);
  Var s = bmm(W, p, h, 4, 1);
  Var ch = cosh(s);
  Var den = phi.b + ch;
  Var a = phi.u * sinh(s) / den;
  Var g = bmm(Wt, a, 4, h, 1) + p * (2.0 * phi.c);
  Var hd = phi.u * (1.0 + phi.b * ch) / square(den);
  Var Ws = W * repeat_cols(hd, 4);
  Tensor eye = Tensor::Zero(1, 16);
  for (int i = 0; i < 4; ++i) eye(0, 5 * i) = 1.0;
  Var H = bmm(Wt, Ws, 4, h, 4) + (2.0 * phi.c) * t.constant(eye);

  Var gn = row_norm(g);
  Var pp = g / gn;
  const auto e = tangent_basis(p);
  const auto ep = tangent_basis(pp);
  std::array<Var, 3> he;
  for (int k = 0; k < 3; ++k) he[k] = bmm(H, e[k], 4, 4, 1);
  std::array<Var, 3> rows;
  for (int i = 0; i < 3; ++i) {
    rows[i] = ad::concat_cols({row_dot(ep[i], he[0]), row_dot(ep[i], he[1]), row_dot(ep[i], he[2])});
  }
  Var det = det3(rows[0], rows[1], rows[2]);
  Var logdet = 0.5 * log(square(det)) - 3.0 * log(gn);
  return {pp, logdet};
}

std::pair<Var, Var> affine_forward(const Var& p, const Var& W, const Var& log_abs_det) {
  Var y = bmm(broadcast_rows(W, p.rows()), p, 4, 4, 1);
  Var yn = row_norm(y);
  return {y / yn, log_abs_det - 4.0 * log(yn)};
}

Var svmf_logpdf(const Var& q, const SymVMFParams& params) {
  ad::Tape& t = *q.tape();
  Tensor mu(1, 4);
  mu << params.mu[0], params.mu[1], params.mu[2], params.mu[3];
  return logcosh(row_dot(q, t.constant(mu)) * params.kappa) + vmf_log_normalizer(params.kappa);
}

}  // namespace ad_maps

}  // namespace rbflow
