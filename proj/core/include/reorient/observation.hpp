#pragma once

#include <optional>
#include <vector>

#include <Eigen/Core>

#include "reorient/env.hpp"

namespace reorient::policy {

enum class Role { kPolicy, kQ };

/// What the observation builder needs from the simulator at one policy step.
struct EnvSnapshot {
  env::Joints q = env::Joints::Zero();      // measured joint angles
  env::Joints q_bar = env::Joints::Zero();  // desired angles before the next action
  Rotation goal;
  env::CubeState cube;                      // ground truth
};

EnvSnapshot snapshot(const env::Environment& e);

struct ObservationFrame {
  env::Joints q = env::Joints::Zero();
  env::Joints q_bar_prev = env::Joints::Zero();
  env::Joints ctrl_err = env::Joints::Zero();
  Rotation goal;
  Eigen::Vector3d cube_pos = Eigen::Vector3d::Zero();
  Rotation cube_rot_sym;
  Rotation delta_rot;
  std::optional<Eigen::Vector3d> cube_vel;  // Q frames only

  static constexpr int kPolicyDim = 51;
  static constexpr int kQDim = 54;

  /// q, q_bar_prev, ctrl_err, goal(wxyz), cube_pos, cube_rot_sym(wxyz), delta_rot(wxyz) [, cube_vel]
  Eigen::VectorXd to_vector() const;
};

/// Policy frames get Gaussian noise on q always and on the cube pose only when
/// `estimate` is absent. Q frames are exact and carry the cube velocity.
ObservationFrame build_observation(const EnvSnapshot& s, Role role, const env::CubeState* estimate,
                                   const env::NoiseConfig& noise, Rng& rng);

/// Last S frames, oldest first, zero-padded after reset.
class ObservationStack {
 public:
  ObservationStack(int frame_dim, int length = 5);

  void reset();
  void push(const Eigen::VectorXd& frame);
  Eigen::VectorXd flat() const;
  int frame_dim() const { return frame_dim_; }
  int length() const { return length_; }
  int dim() const { return frame_dim_ * length_; }

 private:
  int frame_dim_;
  int length_;
  std::vector<Eigen::VectorXd> frames_;
};

}  // namespace reorient::policy
