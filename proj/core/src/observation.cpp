#include "reorient/observation.hpp"

#include <stdexcept>

namespace reorient::policy {

EnvSnapshot snapshot(const env::Environment& e) {
  EnvSnapshot s;
  s.q = e.measured_q();
  s.q_bar = e.state().ctrl.q_bar;
  s.goal = e.goal();
  s.cube = e.state().cube;
  return s;
}

Eigen::VectorXd ObservationFrame::to_vector() const {
  Eigen::VectorXd v(cube_vel ? kQDim : kPolicyDim);
  v.segment<12>(0) = q;
  v.segment<12>(12) = q_bar_prev;
  v.segment<12>(24) = ctrl_err;
  v.segment<4>(36) = goal.coeffs_wxyz();
  v.segment<3>(40) = cube_pos;
  v.segment<4>(43) = cube_rot_sym.coeffs_wxyz();
  v.segment<4>(47) = delta_rot.coeffs_wxyz();
  if (cube_vel) {
    v.segment<3>(51) = *cube_vel;
  }
  return v;
}

ObservationFrame build_observation(const EnvSnapshot& s, Role role, const env::CubeState* estimate,
                                   const env::NoiseConfig& noise, Rng& rng) {
  ObservationFrame f;
  f.goal = s.goal;
  f.q_bar_prev = s.q_bar;
  Eigen::Vector3d x = s.cube.x;
  Rotation R = s.cube.R;
  if (role == Role::kQ) {
    f.q = s.q;
    f.cube_vel = s.cube.v;
  } else {
    std::normal_distribution<double> n(0.0, 1.0);
    f.q = s.q;
    if (noise.q_sigma > 0.0) {
      for (int i = 0; i < env::kJoints; ++i) {
        f.q[i] += noise.q_sigma * n(rng);
      }
    }
    if (estimate != nullptr) {
      x = estimate->x;
      R = estimate->R;
    } else {
      if (noise.x_sigma > 0.0) {
        for (int i = 0; i < 3; ++i) {
          x[i] += noise.x_sigma * n(rng);
        }
      }
      R = perturb_rotation(R, noise.R_sigma, rng);
    }
  }
  f.ctrl_err = f.q_bar_prev - f.q;
  f.cube_pos = x;
  f.cube_rot_sym = reduce_symmetry(R);
  f.delta_rot = compose(s.goal.inverse(), R);
  return f;
}

ObservationStack::ObservationStack(int frame_dim, int length) : frame_dim_(frame_dim), length_(length) {
  if (frame_dim <= 0 || length <= 0) {
    throw std::invalid_argument("ObservationStack: dimensions must be positive");
  }
  reset();
}

void ObservationStack::reset() { frames_.assign(static_cast<std::size_t>(length_), Eigen::VectorXd::Zero(frame_dim_)); }

void ObservationStack::push(const Eigen::VectorXd& frame) {
  if (frame.size() != frame_dim_) {
    throw std::invalid_argument("ObservationStack: frame has wrong dimension");
  }
  frames_.erase(frames_.begin());
  frames_.push_back(frame);
}

Eigen::VectorXd ObservationStack::flat() const {
  Eigen::VectorXd out(dim());
  for (int i = 0; i < length_; ++i) {
    out.segment(i * frame_dim_, frame_dim_) = frames_[static_cast<std::size_t>(i)];
  }
  return out;
}

}  // namespace reorient::policy
