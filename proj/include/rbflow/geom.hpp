#pragma once

// Quaternion algebra, the S^3 -> SO(3) double cover and rigid poses.
//
// Quaternions are stored scalar-last: (x, y, z, w).

#include <vector>

#include <Eigen/Core>

#include "rbflow/random.hpp"

namespace rbflow {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using TangentBasis = Eigen::Matrix<double, 4, 3>;

class UnitQuaternion {
 public:
  /// Identity rotation (0, 0, 0, 1).
  UnitQuaternion() : c_(0.0, 0.0, 0.0, 1.0) {}
  /// Normalizes its input. Throws ValidationError for a (near) zero vector.
  UnitQuaternion(double x, double y, double z, double w);
  explicit UnitQuaternion(const Vec4& xyzw);

  double x() const { return c_[0]; }
  double y() const { return c_[1]; }
  double z() const { return c_[2]; }
  double w() const { return c_[3]; }
  const Vec4& coeffs() const { return c_; }
  Vec3 vec() const { return c_.head<3>(); }

  UnitQuaternion operator-() const;
  UnitQuaternion conj() const;

  /// Keeps the components bit-for-bit; throws ValidationError if the norm is
  /// off by more than `tol`.
  static UnitQuaternion from_unit(const Vec4& xyzw, double tol = 1e-9);

  /// Uniformly distributed on S^3 (and thus on SO(3)).
  static UnitQuaternion random(Rng& rng);

 private:
  struct Raw {};
  UnitQuaternion(const Vec4& c, Raw) : c_(c) {}
  Vec4 c_;
};

UnitQuaternion quat_mul(const UnitQuaternion& a, const UnitQuaternion& b);
Vec3 rotate_point(const UnitQuaternion& q, const Vec3& v);
Mat3 quat_to_rotmat(const UnitQuaternion& q);

/// Which of the two preimages of a rotation to return.
enum class LiftSign { plus, minus, random };

/// Representative with w >= 0; at w == 0 the first nonzero imaginary
/// component is made positive.
UnitQuaternion canonical(const UnitQuaternion& q);

/// Shepperd extraction. `rng` is required for LiftSign::random.
UnitQuaternion rotmat_to_quat(const Mat3& r, LiftSign sign, Rng* rng = nullptr);

TangentBasis tangent_basis(const Vec4& p);

/// K beads in the canonical body frame. Bead 0 sits at the origin and beads
/// 0, 1, 2 span a nondegenerate frame.
class BodyTemplate {
 public:
  BodyTemplate() = default;
  explicit BodyTemplate(std::vector<Vec3> beads);

  std::size_t size() const { return beads_.size(); }
  const Vec3& bead(std::size_t k) const { return beads_[k]; }
  const std::vector<Vec3>& beads() const { return beads_; }

  /// Shift so bead 0 is at the origin, then validate.
  static BodyTemplate centered(std::vector<Vec3> beads);

 private:
  std::vector<Vec3> beads_;
};

struct RigidPose {
  Vec3 x0 = Vec3::Zero();
  UnitQuaternion q;
};

struct PoseSet {
  BodyTemplate body;
  std::vector<RigidPose> poses;
};

/// Bead coordinates, one row per bead.
using BodyCoords = Eigen::Matrix<double, Eigen::Dynamic, 3>;

BodyCoords pose_apply(const RigidPose& pose, const BodyTemplate& body);

/// Inverse of pose_apply using the frame spanned by beads 0, 1, 2. Throws
/// ValidationError if the coordinates are not a rigid image of the template
/// (RMS deviation above 1e-6).
RigidPose pose_extract(const BodyCoords& coords, const BodyTemplate& body);

}  // namespace rbflow
