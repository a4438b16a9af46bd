#include "rbflow/geom.hpp"

#include <cmath>

#include <Eigen/Geometry>

#include "rbflow/errors.hpp"

namespace rbflow {

UnitQuaternion::UnitQuaternion(double x, double y, double z, double w)
    : UnitQuaternion(Vec4(x, y, z, w)) {}

UnitQuaternion::UnitQuaternion(const Vec4& xyzw) {
  const double n = xyzw.norm();
  if (!(n > 1e-300) || !std::isfinite(n)) {
    throw ValidationError("quaternion has zero or non-finite norm");
  }
  c_ = xyzw / n;
}

UnitQuaternion UnitQuaternion::operator-() const { return UnitQuaternion(Vec4(-c_), Raw{}); }

UnitQuaternion UnitQuaternion::conj() const {
  return UnitQuaternion(Vec4(-c_[0], -c_[1], -c_[2], c_[3]), Raw{});
}

UnitQuaternion UnitQuaternion::from_unit(const Vec4& xyzw, double tol) {
  const double n = xyzw.norm();
  if (!(std::abs(n - 1.0) <= tol)) {
    throw ValidationError("quaternion norm " + std::to_string(n) + " is not 1");
  }
  return UnitQuaternion(xyzw, Raw{});
}

UnitQuaternion UnitQuaternion::random(Rng& rng) {
  Vec4 v;
  do {
    for (int i = 0; i < 4; ++i) v[i] = standard_normal(rng);
  } while (v.norm() < 1e-8);
  return UnitQuaternion(v);
}

UnitQuaternion quat_mul(const UnitQuaternion& a, const UnitQuaternion& b) {
  const Vec3 va = a.vec();
  const Vec3 vb = b.vec();
  const double w = a.w() * b.w() - va.dot(vb);
  const Vec3 v = a.w() * vb + b.w() * va + va.cross(vb);
  return UnitQuaternion(Vec4(v[0], v[1], v[2], w));
}

Vec3 rotate_point(const UnitQuaternion& q, const Vec3& v) {
  const Vec3 u = q.vec();
  const Vec3 uv = u.cross(v);
  return v + 2.0 * q.w() * uv + 2.0 * u.cross(uv);
}

Mat3 quat_to_rotmat(const UnitQuaternion& q) {
  const double x = q.x(), y = q.y(), z = q.z(), w = q.w();
  Mat3 r;
  r << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w),
      2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w),
      2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y);
  return r;
}

UnitQuaternion canonical(const UnitQuaternion& q) {
  const Vec4& c = q.coeffs();
  if (c[3] > 0.0) return q;
  if (c[3] < 0.0) return -q;
  for (int i = 0; i < 3; ++i) {
    if (c[i] > 0.0) return q;
    if (c[i] < 0.0) return -q;
  }
  return q;
}

UnitQuaternion rotmat_to_quat(const Mat3& r, LiftSign sign, Rng* rng) {
  const double ortho_err = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (!(ortho_err <= 1e-6)) {
    throw ValidationError("matrix is not orthogonal (max |R^T R - I| = " +
                          std::to_string(ortho_err) + ")");
  }
  if (r.determinant() < 0.0) throw ValidationError("matrix is a reflection (det < 0)");

  const double t = r.trace();
  Vec4 c;
  if (t >= r(0, 0) && t >= r(1, 1) && t >= r(2, 2)) {
    const double w = 0.5 * std::sqrt(1.0 + t);
    c << (r(2, 1) - r(1, 2)) / (4.0 * w), (r(0, 2) - r(2, 0)) / (4.0 * w),
        (r(1, 0) - r(0, 1)) / (4.0 * w), w;
  } else if (r(0, 0) >= r(1, 1) && r(0, 0) >= r(2, 2)) {
    const double x = 0.5 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
    c << x, (r(0, 1) + r(1, 0)) / (4.0 * x), (r(0, 2) + r(2, 0)) / (4.0 * x),
        (r(2, 1) - r(1, 2)) / (4.0 * x);
  } else if (r(1, 1) >= r(2, 2)) {
    const double y = 0.5 * std::sqrt(1.0 - r(0, 0) + r(1, 1) - r(2, 2));
    c << (r(0, 1) + r(1, 0)) / (4.0 * y), y, (r(1, 2) + r(2, 1)) / (4.0 * y),
        (r(0, 2) - r(2, 0)) / (4.0 * y);
  } else {
    const double z = 0.5 * std::sqrt(1.0 - r(0, 0) - r(1, 1) + r(2, 2));
    c << (r(0, 2) + r(2, 0)) / (4.0 * z), (r(1, 2) + r(2, 1)) / (4.0 * z), z,
        (r(1, 0) - r(0, 1)) / (4.0 * z);
  }
  const UnitQuaternion plus = canonical(UnitQuaternion(c));
  switch (sign) {
    case LiftSign::plus:
      return plus;
    case LiftSign::minus:
      return -plus;
    case LiftSign::random:
      if (rng == nullptr) throw ValidationError("random lift requires an RNG");
      return uniform01(*rng) < 0.5 ? plus : -plus;
  }
  return plus;
}

TangentBasis tangent_basis(const Vec4& p) {
  int skip = 0;
  for (int i = 1; i < 4; ++i) {
    if (std::abs(p[i]) > std::abs(p[skip])) skip = i;
  }
  TangentBasis e;
  int col = 0;
  for (int i = 0; i < 4; ++i) {
    if (i == skip) continue;
    Vec4 v = Vec4::Unit(i);
    v -= v.dot(p) * p;
    for (int k = 0; k < col; ++k) v -= v.dot(e.col(k)) * e.col(k);
    e.col(col++) = v.normalized();
  }
  return e;
}

namespace {

Mat3 frame(const Vec3& a, const Vec3& b) {
  const Vec3 e1 = a.normalized();
  const Vec3 e2 = (b - b.dot(e1) * e1).normalized();
  Mat3 f;
  f.col(0) = e1;
  f.col(1) = e2;
  f.col(2) = e1.cross(e2);
  return f;
}

}  // namespace

BodyTemplate::BodyTemplate(std::vector<Vec3> beads) : beads_(std::move(beads)) {
  if (beads_.size() < 3) throw ValidationError("body template needs at least 3 beads");
  if (beads_[0].norm() > 1e-12) throw ValidationError("template bead 0 must be at the origin");
  const Vec3& a = beads_[1];
  const Vec3& b = beads_[2];
  if (a.cross(b).norm() <= 1e-10 * a.norm() * b.norm() || a.norm() == 0.0) {
    throw ValidationError("template beads 0, 1, 2 are collinear");
  }
}

BodyTemplate BodyTemplate::centered(std::vector<Vec3> beads) {
  if (beads.empty()) throw ValidationError("empty body template");
  const Vec3 origin = beads[0];
  for (auto& b : beads) b -= origin;
  return BodyTemplate(std::move(beads));
}

BodyCoords pose_apply(const RigidPose& pose, const BodyTemplate& body) {
  BodyCoords out(body.size(), 3);
  for (std::size_t k = 0; k < body.size(); ++k) {
    out.row(k) = (pose.x0 + rotate_point(pose.q, body.bead(k))).transpose();
  }
  return out;
}

RigidPose pose_extract(const BodyCoords& coords, const BodyTemplate& body) {
  if (static_cast<std::size_t>(coords.rows()) != body.size()) {
    throw ValidationError("bead count does not match template");
  }
  const Vec3 x0 = coords.row(0).transpose();
  const Mat3 ft = frame(body.bead(1), body.bead(2));
  const Mat3 fb = frame(coords.row(1).transpose() - x0, coords.row(2).transpose() - x0);
  RigidPose pose{x0, rotmat_to_quat(fb * ft.transpose(), LiftSign::plus)};

  const BodyCoords back = pose_apply(pose, body);
  const double rms = std::sqrt((back - coords).squaredNorm() / static_cast<double>(body.size()));
  if (!(rms <= 1e-6)) {
    throw ValidationError("body deviates from rigid template (RMS " + std::to_string(rms) + ")");
  }
  return pose;
}

}  // namespace rbflow
