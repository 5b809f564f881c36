#include "reorient/rotations.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace reorient {

Rotation::Rotation(double w, double x, double y, double z) : w_(w), x_(x), y_(y), z_(z) {
  canonicalize();
}

Rotation::Rotation(const Eigen::Quaterniond& q) : Rotation(q.w(), q.x(), q.y(), q.z()) {}

Rotation Rotation::from_axis_angle(const Eigen::Vector3d& axis, double angle) {
  const Eigen::Vector3d n = axis.normalized();
  const double s = std::sin(0.5 * angle);
  return {std::cos(0.5 * angle), s * n.x(), s * n.y(), s * n.z()};
}

Rotation Rotation::exp(const Eigen::Vector3d& rotvec) {
  const double angle = rotvec.norm();
  if (angle < 1e-12) {
    return {1.0, 0.5 * rotvec.x(), 0.5 * rotvec.y(), 0.5 * rotvec.z()};
  }
  return from_axis_angle(rotvec / angle, angle);
}

Rotation Rotation::from_array(const std::array<double, 4>& wxyz) {
  return {wxyz[0], wxyz[1], wxyz[2], wxyz[3]};
}

void Rotation::canonicalize() {
  const double n = std::sqrt(w_ * w_ + x_ * x_ + y_ * y_ + z_ * z_);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw std::invalid_argument("Rotation: quaternion must be finite and nonzero");
  }
  w_ /= n;
  x_ /= n;
  y_ /= n;
  z_ /= n;
  bool flip = w_ < 0.0;
  if (w_ == 0.0) {
    for (double c : {x_, y_, z_}) {
      if (c != 0.0) {
        flip = c < 0.0;
        break;
      }
    }
  }
  if (flip) {
    w_ = -w_;
    x_ = -x_;
    y_ = -y_;
    z_ = -z_;
  }
  // A negative zero would break the lexicographic group order.
  w_ += 0.0;
  x_ += 0.0;
  y_ += 0.0;
  z_ += 0.0;
}

Rotation Rotation::inverse() const { return {w_, -x_, -y_, -z_}; }

double Rotation::angle() const {
  const double v = std::sqrt(x_ * x_ + y_ * y_ + z_ * z_);
  return 2.0 * std::atan2(v, std::abs(w_));
}

Eigen::Vector3d Rotation::log() const {
  const Eigen::Vector3d v(x_, y_, z_);
  const double s = v.norm();
  if (s < 1e-12) {
    return 2.0 * v;
  }
  return v * (2.0 * std::atan2(s, w_) / s);
}

Rotation compose(const Rotation& a, const Rotation& b) {
  return Rotation(a.quaternion() * b.quaternion());
}

double distance(const Rotation& a, const Rotation& b) {
  const Eigen::Quaterniond rel = a.quaternion().conjugate() * b.quaternion();
  return 2.0 * std::atan2(rel.vec().norm(), std::abs(rel.w()));
}

Rotation random_rotation(Rng& rng) {
  // Shoemake's subgroup algorithm.
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u1 = unit(rng);
  const double u2 = unit(rng);
  const double u3 = unit(rng);
  const double a = std::sqrt(1.0 - u1);
  const double b = std::sqrt(u1);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  return {a * std::sin(two_pi * u2), a * std::cos(two_pi * u2), b * std::sin(two_pi * u3),
          b * std::cos(two_pi * u3)};
}

Rotation perturb_rotation(const Rotation& r, double sigma, Rng& rng) {
  if (sigma < 0.0) {
    throw std::invalid_argument("perturb_rotation: sigma must be non-negative");
  }
  if (sigma == 0.0) {
    return r;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Vector3d axis;
  do {
    axis = {normal(rng), normal(rng), normal(rng)};
  } while (axis.norm() < 1e-12);
  const double angle = sigma * normal(rng);
  return compose(r, Rotation::from_axis_angle(axis, angle));
}

namespace {

constexpr double kOrderTol = 1e-9;

bool group_less(const Rotation& a, const Rotation& b) {
  const double da = a.angle();
  const double db = b.angle();
  if (std::abs(da - db) > kOrderTol) {
    return da < db;
  }
  const auto ca = a.to_array();
  const auto cb = b.to_array();
  for (std::size_t i = 0; i < 4; ++i) {
    if (std::abs(ca[i] - cb[i]) > kOrderTol) {
      return ca[i] < cb[i];
    }
  }
  return false;
}

}  // namespace

OctahedralGroup::OctahedralGroup() {
  constexpr double half_pi = 0.5 * std::numbers::pi;
  const Rotation gens[] = {Rotation::from_axis_angle(Eigen::Vector3d::UnitX(), half_pi),
                           Rotation::from_axis_angle(Eigen::Vector3d::UnitY(), half_pi)};
  elements_.push_back(Rotation::identity());
  // Breadth-first closure under right multiplication by the generators.
  for (std::size_t head = 0; head < elements_.size(); ++head) {
    for (const auto& g : gens) {
      const Rotation candidate = compose(elements_[head], g);
      const bool known = std::any_of(elements_.begin(), elements_.end(), [&](const Rotation& e) {
        return distance(e, candidate) < 1e-6;
      });
      if (!known) {
        elements_.push_back(candidate);
      }
    }
  }
  if (elements_.size() != kOrder) {
    throw std::logic_error("OctahedralGroup: closure did not produce 24 elements");
  }
  std::sort(elements_.begin(), elements_.end(), group_less);
}

const OctahedralGroup& OctahedralGroup::instance() {
  static const OctahedralGroup group;
  return group;
}

std::size_t OctahedralGroup::nearest(const Rotation& r) const {
  std::size_t best = 0;
  double best_d = distance(r, elements_[0]);
  for (std::size_t i = 1; i < elements_.size(); ++i) {
    const double d = distance(r, elements_[i]);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

Rotation reduce_symmetry(const Rotation& r) {
  const auto& group = OctahedralGroup::instance();
  std::size_t best = 0;
  double best_angle = compose(r, group[0]).angle();
  for (std::size_t i = 1; i < group.size(); ++i) {
    const double a = compose(r, group[i]).angle();
    if (a < best_angle) {
      best_angle = a;
      best = i;
    }
  }
  return compose(r, group[best]);
}

GoalSet::GoalSet() {
  const auto& group = OctahedralGroup::instance();
  // group[0] is the identity; slot it in at goal 3.
  for (std::size_t i = 1; i < group.size(); ++i) {
    goals_.push_back(group[i]);
  }
  goals_.insert(goals_.begin() + static_cast<std::ptrdiff_t>(kIdentityGoal - 1), group[0]);
}

const GoalSet& GoalSet::instance() {
  static const GoalSet goals;
  return goals;
}

const Rotation& GoalSet::goal(std::size_t index) const {
  if (index < 1 || index > goals_.size()) {
    throw std::out_of_range("GoalSet: goal index must be in [1, 24]");
  }
  return goals_[index - 1];
}

}  // namespace reorient
