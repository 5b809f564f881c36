#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace reorient {

using Rng = std::mt19937_64;

/// Unit quaternion on the w >= 0 hemisphere.
///
/// Every constructor and operation renormalizes and canonicalizes, so two
/// Rotations describing the same element of SO(3) compare equal component-wise
/// (up to rounding). When w == 0 the first nonzero vector component is made
/// positive.
class Rotation {
 public:
  Rotation() = default;
  Rotation(double w, double x, double y, double z);
  explicit Rotation(const Eigen::Quaterniond& q);

  static Rotation identity() { return {}; }
  static Rotation from_axis_angle(const Eigen::Vector3d& axis, double angle);
  /// Exponential map of a rotation vector (axis * angle).
  static Rotation exp(const Eigen::Vector3d& rotvec);
  static Rotation from_array(const std::array<double, 4>& wxyz);

  double w() const { return w_; }
  double x() const { return x_; }
  double y() const { return y_; }
  double z() const { return z_; }

  Rotation inverse() const;
  /// Rotation vector with angle in [0, pi].
  Eigen::Vector3d log() const;
  /// Rotation angle in [0, pi].
  double angle() const;

  Eigen::Quaterniond quaternion() const { return {w_, x_, y_, z_}; }
  Eigen::Matrix3d matrix() const { return quaternion().toRotationMatrix(); }
  Eigen::Vector3d rotate(const Eigen::Vector3d& v) const { return quaternion() * v; }
  Eigen::Vector4d coeffs_wxyz() const { return {w_, x_, y_, z_}; }
  std::array<double, 4> to_array() const { return {w_, x_, y_, z_}; }

 private:
  void canonicalize();

  double w_ = 1.0;
  double x_ = 0.0;
  double y_ = 0.0;
  double z_ = 0.0;
};

/// a * b: apply b first, then a.
Rotation compose(const Rotation& a, const Rotation& b);
inline Rotation operator*(const Rotation& a, const Rotation& b) { return compose(a, b); }

/// Geodesic angle between two rotations, in [0, pi].
double distance(const Rotation& a, const Rotation& b);

Rotation random_rotation(Rng& rng);

/// Right-multiplies r by a rotation about a uniformly random axis with an
/// angle drawn from N(0, sigma).
Rotation perturb_rotation(const Rotation& r, double sigma, Rng& rng);

/// The 24 proper rotations of the cube.
///
/// Generated by closure of {Rx(pi/2), Ry(pi/2)} and sorted by rotation angle,
/// then lexicographically on (w, x, y, z); index 0 is the identity.
class OctahedralGroup {
 public:
  static constexpr std::size_t kOrder = 24;

  static const OctahedralGroup& instance();

  std::span<const Rotation> elements() const { return elements_; }
  const Rotation& operator[](std::size_t i) const { return elements_[i]; }
  std::size_t size() const { return elements_.size(); }

  /// Index of the element closest to r.
  std::size_t nearest(const Rotation& r) const;

 private:
  OctahedralGroup();
  std::vector<Rotation> elements_;
};

/// r * g* for the group element g* bringing r closest to the identity.
/// Ties go to the lowest group index.
Rotation reduce_symmetry(const Rotation& r);

/// The 24 goal orientations, 1-based indices as used in reports.
/// Goal 3 is the identity (the cube's initial orientation in the benchmark);
/// the remaining goals follow the group order.
class GoalSet {
 public:
  static constexpr std::size_t kIdentityGoal = 3;

  static const GoalSet& instance();

  std::size_t size() const { return goals_.size(); }
  /// index in [1, 24]
  const Rotation& goal(std::size_t index) const;
  std::span<const Rotation> goals() const { return goals_; }

 private:
  GoalSet();
  std::vector<Rotation> goals_;
};

}  // namespace reorient
