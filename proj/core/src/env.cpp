#include "reorient/env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Geometry>

namespace reorient::env {

namespace {

void require_range(const char* name, double value, double lo, double hi) {
  if (!(value >= lo && value <= hi)) {
    throw RangeError(std::string("domain override ") + name + "=" + std::to_string(value) +
                     " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
}

}  // namespace

DomainConfig sample_domain(Rng& rng, const DomainOverrides& overrides) {
  using R = DomainRanges;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  // Every draw happens regardless of overrides so pinning one field does not
  // shift the random stream of the others.
  DomainConfig cfg;
  for (int i = 0; i < kJoints; ++i) {
    cfg.q_offset[i] = uniform(-R::kQOffset, R::kQOffset);
  }
  cfg.eta_lat = uniform(R::kEtaLatMin, R::kEtaLatMax);
  cfg.eta_spin = std::exp(uniform(std::log(R::kEtaSpinMin), std::log(R::kEtaSpinMax)));
  cfg.cube_mass = R::kMassNominal * uniform(1.0 - R::kMassSpread, 1.0 + R::kMassSpread);
  cfg.cube_size = R::kSizeNominal * uniform(1.0 - R::kSizeSpread, 1.0 + R::kSizeSpread);
  cfg.kp = R::kKpNominal * uniform(1.0 - R::kGainSpread, 1.0 + R::kGainSpread);
  cfg.kd = R::kKdNominal * uniform(1.0 - R::kGainSpread, 1.0 + R::kGainSpread);

  if (overrides.q_offset) {
    for (int i = 0; i < kJoints; ++i) {
      require_range("q_offset", (*overrides.q_offset)[i], -R::kQOffset, R::kQOffset);
    }
    cfg.q_offset = *overrides.q_offset;
  }
  if (overrides.eta_lat) {
    require_range("eta_lat", *overrides.eta_lat, R::kEtaLatMin, R::kEtaLatMax);
    cfg.eta_lat = *overrides.eta_lat;
  }
  if (overrides.eta_spin) {
    require_range("eta_spin", *overrides.eta_spin, R::kEtaSpinMin, R::kEtaSpinMax);
    cfg.eta_spin = *overrides.eta_spin;
  }
  if (overrides.cube_mass) {
    require_range("cube_mass", *overrides.cube_mass, R::kMassNominal * (1.0 - R::kMassSpread),
                  R::kMassNominal * (1.0 + R::kMassSpread));
    cfg.cube_mass = *overrides.cube_mass;
  }
  if (overrides.cube_size) {
    require_range("cube_size", *overrides.cube_size, R::kSizeNominal * (1.0 - R::kSizeSpread),
                  R::kSizeNominal * (1.0 + R::kSizeSpread));
    cfg.cube_size = *overrides.cube_size;
  }
  if (overrides.kp) {
    require_range("kp", *overrides.kp, R::kKpNominal * (1.0 - R::kGainSpread), R::kKpNominal * (1.0 + R::kGainSpread));
    cfg.kp = *overrides.kp;
  }
  if (overrides.kd) {
    require_range("kd", *overrides.kd, R::kKdNominal * (1.0 - R::kGainSpread), R::kKdNominal * (1.0 + R::kGainSpread));
    cfg.kd = *overrides.kd;
  }
  if (overrides.sticky_prob) {
    require_range("sticky_prob", *overrides.sticky_prob, 0.0, 1.0);
    cfg.sticky_prob = *overrides.sticky_prob;
  }
  if (overrides.gravity_scale) {
    require_range("gravity_scale", *overrides.gravity_scale, 0.0, 1.0);
    cfg.gravity_scale = *overrides.gravity_scale;
  }
  if (overrides.noise) {
    require_range("noise.q_sigma", overrides.noise->q_sigma, 0.0, 1e9);
    require_range("noise.x_sigma", overrides.noise->x_sigma, 0.0, 1e9);
    require_range("noise.R_sigma", overrides.noise->R_sigma, 0.0, 1e9);
    cfg.noise = *overrides.noise;
  }
  if (overrides.perturb_force_sigma) {
    require_range("perturb_force_sigma", *overrides.perturb_force_sigma, 0.0, 1e9);
    cfg.perturb_force_sigma = *overrides.perturb_force_sigma;
  }
  if (overrides.perturb_torque_sigma) {
    require_range("perturb_torque_sigma", *overrides.perturb_torque_sigma, 0.0, 1e9);
    cfg.perturb_torque_sigma = *overrides.perturb_torque_sigma;
  }
  return cfg;
}

double effective_spinning_friction(const DomainConfig& cfg) { return cfg.eta_spin * cfg.eta_lat / 0.9; }

const JointLimits& JointLimits::standard() {
  static const JointLimits limits = [] {
    JointLimits l;
    for (int f = 0; f < kFingers; ++f) {
      l.q_min[3 * f + 0] = -0.2;
      l.q_max[3 * f + 0] = 1.4;
      l.q_min[3 * f + 1] = -0.1;
      l.q_max[3 * f + 1] = 1.5;
      l.q_min[3 * f + 2] = -0.1;
      l.q_max[3 * f + 2] = 1.5;
    }
    return l;
  }();
  return limits;
}

ControllerState apply_action(const ControllerState& ctrl, const Joints& q, std::span<const double> action,
                             const JointLimits& limits) {
  if (action.size() != static_cast<std::size_t>(kJoints)) {
    throw std::invalid_argument("apply_action: expected 12 action components");
  }
  ControllerState next = ctrl;
  const double gain = ctrl.tau_max / ctrl.kp;
  for (int i = 0; i < kJoints; ++i) {
    const double a = action[static_cast<std::size_t>(i)];
    if (!(a >= -1.0 && a <= 1.0)) {
      throw std::invalid_argument("apply_action: action components must lie in [-1, 1]");
    }
    const double q_tilde = std::clamp(q[i] + a * gain, limits.q_min[i], limits.q_max[i]);
    next.q_tilde_prev[i] = q_tilde;
    next.q_bar[i] = ctrl.alpha * ctrl.q_bar[i] + (1.0 - ctrl.alpha) * q_tilde;
  }
  return next;
}

std::string to_string(Event e) {
  switch (e) {
    case Event::kNone: return "none";
    case Event::kDropped: return "dropped";
    case Event::kOutOfBounds: return "out_of_bounds";
    case Event::kSuccess: return "success";
    case Event::kTimeoutGoal: return "timeout_goal";
    case Event::kTimeoutEpisode: return "timeout_episode";
  }
  return "none";
}

Event event_from_string(const std::string& s) {
  for (Event e : {Event::kNone, Event::kDropped, Event::kOutOfBounds, Event::kSuccess, Event::kTimeoutGoal,
                  Event::kTimeoutEpisode}) {
    if (to_string(e) == s) {
      return e;
    }
  }
  throw std::invalid_argument("unknown event '" + s + "'");
}

void GoalHistory::push(double dist, double theta, int keep) {
  recent.emplace_back(dist, theta);
  while (static_cast<int>(recent.size()) > keep) {
    recent.pop_front();
  }
}

Event check_termination(const CubeState& cube, const Rotation& goal, const GoalHistory& history,
                        const TerminationThresholds& th) {
  (void)goal;  // theta is already folded into the history entries
  if (cube.x.z() <= th.drop_height) {
    return Event::kDropped;
  }
  if (cube.x.norm() > th.max_distance) {
    return Event::kOutOfBounds;
  }
  if (static_cast<int>(history.recent.size()) >= th.hold_steps) {
    const auto first = history.recent.end() - th.hold_steps;
    const bool held = std::all_of(first, history.recent.end(), [&](const auto& e) {
      return e.first < th.success_distance && e.second < th.success_angle;
    });
    if (held) {
      return Event::kSuccess;
    }
  }
  constexpr double eps = 1e-9;
  if (history.episode_time >= th.episode_timeout - eps) {
    return Event::kTimeoutEpisode;
  }
  if (history.time_on_goal >= th.goal_timeout - eps) {
    return Event::kTimeoutGoal;
  }
  return Event::kNone;
}

FingerKinematics finger_kinematics(const PhysicsParams& p, int finger, const Eigen::Vector3d& q) {
  const double phi = 0.5 * std::numbers::pi * finger;
  const Vec3 e_r(std::cos(phi), std::sin(phi), 0.0);
  const Vec3 e_t(-std::sin(phi), std::cos(phi), 0.0);
  const Vec3 down(0.0, 0.0, -1.0);
  const Vec3 base = p.base_radius * e_r + Vec3(0.0, 0.0, p.palm_height);

  const Eigen::AngleAxisd spread(q[0], e_r);
  const Vec3 axis = spread * e_t;
  auto dir = [&](double angle) -> Vec3 { return spread * (Eigen::AngleAxisd(angle - p.mount_pitch, e_t) * down); };

  const Vec3 p1 = base + p.link_lengths[0] * dir(q[1]);
  const Vec3 p2 = p1 + p.link_lengths[1] * dir(q[1] + q[2]);
  const Vec3 tip = p2 + p.link_lengths[2] * dir(q[1] + 2.0 * q[2]);

  FingerKinematics k;
  k.tip = tip;
  k.jv.col(0) = e_r.cross(tip - base);
  k.jv.col(1) = axis.cross(tip - base);
  k.jv.col(2) = axis.cross(tip - p1) + axis.cross(tip - p2);
  k.jw.col(0) = e_r;
  k.jw.col(1) = axis;
  k.jw.col(2) = 2.0 * axis;
  return k;
}

std::array<Vec3, kFingers> fingertip_positions(const PhysicsParams& p, const Joints& q) {
  std::array<Vec3, kFingers> out;
  for (int f = 0; f < kFingers; ++f) {
    out[static_cast<std::size_t>(f)] = finger_kinematics(p, f, q.segment<3>(3 * f)).tip;
  }
  return out;
}

double kinetic_energy(const SimState& s, const DomainConfig& cfg, const PhysicsParams& p) {
  const double inertia = cfg.cube_mass * cfg.cube_size * cfg.cube_size / 6.0;
  double ke = 0.5 * p.joint_inertia * s.hand.qdot.squaredNorm();
  if (!s.support_active) {
    ke += 0.5 * cfg.cube_mass * s.cube.v.squaredNorm() + 0.5 * inertia * s.cube.w.squaredNorm();
  }
  return ke;
}

int active_contacts(const SimState& s) {
  return static_cast<int>(std::count_if(s.contacts.begin(), s.contacts.end(),
                                        [](const Contact& c) { return c.active && c.normal_force > 0.0; }));
}

namespace {

/// Closest-feature query between the fingertip sphere and the cube box.
bool contact_geometry(const CubeState& cube, double half, const Vec3& tip, double radius, Vec3& point, Vec3& normal,
                      double& depth) {
  const Eigen::Matrix3d rot = cube.R.matrix();
  const Vec3 local = rot.transpose() * (tip - cube.x);
  const Vec3 clamped = local.cwiseMax(-half).cwiseMin(half);
  const Vec3 diff = local - clamped;
  const double dist = diff.norm();
  Vec3 n_local;
  Vec3 c_local = clamped;
  if (dist > 1e-12) {
    depth = radius - dist;
    n_local = diff / dist;
  } else {
    int axis = 0;
    double best = half - std::abs(local[0]);
    for (int i = 1; i < 3; ++i) {
      const double gap = half - std::abs(local[i]);
      if (gap < best) {
        best = gap;
        axis = i;
      }
    }
    const double sign = local[axis] >= 0.0 ? 1.0 : -1.0;
    n_local = Vec3::Zero();
    n_local[axis] = sign;
    c_local[axis] = sign * half;
    depth = radius + best;
  }
  if (depth <= 0.0) {
    return false;
  }
  point = cube.x + rot * c_local;
  normal = rot * n_local;
  return true;
}

}  // namespace

void substep(SimState& s, const DomainConfig& cfg, const PhysicsParams& p, const Perturbation& perturbation,
             EnergyLedger* ledger, FrictionDiagnostics* friction) {
  const double dt = p.dt;
  const double half = 0.5 * cfg.cube_size;
  const double inertia = cfg.cube_mass * cfg.cube_size * cfg.cube_size / 6.0;
  const double eta_spin_eff = effective_spinning_friction(cfg);
  const auto& limits = JointLimits::standard();

  // Impedance controller acting on the measured angles.
  Joints tau_motor;
  for (int i = 0; i < kJoints; ++i) {
    const double q_meas = s.hand.q[i] + cfg.q_offset[i];
    const double tau = s.ctrl.kp * (s.ctrl.q_bar[i] - q_meas) - s.ctrl.kd * s.hand.qdot[i];
    tau_motor[i] = std::clamp(tau, -s.ctrl.tau_max, s.ctrl.tau_max);
  }

  Joints tau_contact = Joints::Zero();
  Vec3 cube_force = Vec3::Zero();
  Vec3 cube_torque = Vec3::Zero();

  for (int f = 0; f < kFingers; ++f) {
    auto& c = s.contacts[static_cast<std::size_t>(f)];
    const Eigen::Vector3d qf = s.hand.q.segment<3>(3 * f);
    const Eigen::Vector3d qdf = s.hand.qdot.segment<3>(3 * f);
    const FingerKinematics k = finger_kinematics(p, f, qf);

    Vec3 point, normal;
    double depth = 0.0;
    if (!contact_geometry(s.cube, half, k.tip, p.tip_radius, point, normal, depth)) {
      c = Contact{};
      continue;
    }
    const Vec3 tip_v = k.jv * qdf;
    const Vec3 tip_w = k.jw * qdf;
    const Vec3 cube_point_v = s.support_active ? Vec3::Zero() : Vec3(s.cube.v + s.cube.w.cross(point - s.cube.x));
    const Vec3 cube_w = s.support_active ? Vec3::Zero() : s.cube.w;
    const Vec3 rel_v = tip_v + tip_w.cross(point - k.tip) - cube_point_v;

    const double depth_rate = -rel_v.dot(normal);
    const double fn = std::max(0.0, p.normal_stiffness * depth + p.normal_damping * depth_rate);

    Vec3 slip = c.active ? c.slip : Vec3::Zero();
    slip -= slip.dot(normal) * normal;
    const Vec3 v_t = rel_v - rel_v.dot(normal) * normal;
    slip += v_t * dt;
    Vec3 f_t = -p.lateral_stiffness * slip - p.lateral_damping * v_t;
    const double lat_cap = cfg.eta_lat * fn;
    if (f_t.norm() > lat_cap) {
      f_t *= f_t.norm() > 0.0 ? lat_cap / f_t.norm() : 0.0;
      slip = -f_t / p.lateral_stiffness;
    }

    double twist = c.active ? c.twist : 0.0;
    const double w_rel = (tip_w - cube_w).dot(normal);
    twist += w_rel * dt;
    double tau_spin = -p.twist_stiffness * twist - p.twist_damping * w_rel;
    const double spin_cap = eta_spin_eff * fn;
    if (std::abs(tau_spin) > spin_cap) {
      tau_spin = std::copysign(spin_cap, tau_spin);
      twist = -tau_spin / p.twist_stiffness;
    }

    c.active = true;
    c.point = point;
    c.normal = normal;
    c.depth = depth;
    c.normal_force = fn;
    c.lateral_force = f_t;
    c.spin_torque = tau_spin;
    c.slip = slip;
    c.twist = twist;

    if (friction != nullptr && fn > 0.0) {
      friction->max_lateral_excess = std::max(friction->max_lateral_excess, f_t.norm() - lat_cap);
      friction->max_spin_excess = std::max(friction->max_spin_excess, std::abs(tau_spin) - spin_cap);
      ++friction->contact_substeps;
    }

    // Wrench on the distal link at the contact point, mapped to joint torques.
    const Vec3 force_on_tip = fn * normal + f_t;
    const Vec3 moment_on_tip = (point - k.tip).cross(force_on_tip) + tau_spin * normal;
    tau_contact.segment<3>(3 * f) += k.jv.transpose() * force_on_tip + k.jw.transpose() * moment_on_tip;

    cube_force -= force_on_tip;
    cube_torque += (point - s.cube.x).cross(-force_on_tip) - tau_spin * normal;
  }

  // Joints.
  const Joints qdot_old = s.hand.qdot;
  Joints qdot_new = qdot_old + dt * (tau_motor + tau_contact) / p.joint_inertia;
  const Joints qdot_mid = 0.5 * (qdot_old + qdot_new);
  if (ledger != nullptr) {
    ledger->actuator += dt * tau_motor.dot(qdot_mid);
    ledger->contact_on_hand += dt * tau_contact.dot(qdot_mid);
  }
  Joints q_new = s.hand.q + dt * qdot_new;
  for (int i = 0; i < kJoints; ++i) {
    if (q_new[i] < limits.q_min[i] || q_new[i] > limits.q_max[i]) {
      q_new[i] = std::clamp(q_new[i], limits.q_min[i], limits.q_max[i]);
      if (ledger != nullptr) {
        ledger->joint_limit -= 0.5 * p.joint_inertia * qdot_new[i] * qdot_new[i];
      }
      qdot_new[i] = 0.0;
    }
  }
  s.hand.q = q_new;
  s.hand.qdot = qdot_new;
  for (int f = 0; f < kFingers; ++f) {
    s.hand.q4[static_cast<std::size_t>(f)] = s.hand.q[3 * f + 2];
  }

  // Cube.
  if (!s.support_active) {
    const Vec3 gravity_force(0.0, 0.0, -cfg.gravity_scale * p.gravity * cfg.cube_mass);
    const Vec3 total_force = cube_force + perturbation.force + gravity_force;
    const Vec3 total_torque = cube_torque + perturbation.torque;
    const Vec3 v_old = s.cube.v;
    const Vec3 w_old = s.cube.w;
    const Vec3 v_new = v_old + dt * total_force / cfg.cube_mass;
    const Vec3 w_new = w_old + dt * total_torque / inertia;
    if (ledger != nullptr) {
      const Vec3 v_mid = 0.5 * (v_old + v_new);
      const Vec3 w_mid = 0.5 * (w_old + w_new);
      ledger->contact_on_cube += dt * (cube_force.dot(v_mid) + cube_torque.dot(w_mid));
      ledger->perturbation += dt * (perturbation.force.dot(v_mid) + perturbation.torque.dot(w_mid));
      ledger->gravity += dt * gravity_force.dot(v_mid);
    }
    s.cube.v = v_new;
    s.cube.w = w_new;
    s.cube.x += dt * v_new;
    s.cube.R = compose(Rotation::exp(dt * w_new), s.cube.R);
  } else {
    s.cube.v.setZero();
    s.cube.w.setZero();
  }
  s.time += dt;

  if (!s.cube.finite() || !s.hand.q.allFinite() || !s.hand.qdot.allFinite()) {
    throw SimulationDiverged("simulation produced a non-finite state at t=" + std::to_string(s.time));
  }
}

Joints open_posture() {
  Joints q;
  for (int f = 0; f < kFingers; ++f) {
    q[3 * f + 0] = 0.0;
    q[3 * f + 1] = -0.1;
    q[3 * f + 2] = -0.1;
  }
  return q;
}

Environment::Environment(EnvConfig config, std::uint64_t seed) : config_(std::move(config)), rng_(seed) {
  domain_ = sample_domain(rng_);
}

void Environment::set_lowpass_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("lowpass alpha must lie in [0, 1)");
  }
  config_.lowpass_alpha = alpha;
  state_.ctrl.alpha = alpha;
}

Joints Environment::measured_q() const { return state_.hand.q + domain_.q_offset; }

void Environment::set_goal(const Rotation& goal) {
  goal_ = goal;
  history_.recent.clear();
  history_.time_on_goal = 0.0;
}

void Environment::reset_diagnostics() {
  energy_ = EnergyLedger{};
  energy_.kinetic_start = kinetic_energy(state_, domain_, config_.physics);
  energy_.kinetic_end = energy_.kinetic_start;
  friction_ = FrictionDiagnostics{};
}

StepResult Environment::reset(const DomainConfig& domain, std::optional<std::size_t> start_element) {
  domain_ = domain;
  for (reset_attempts_ = 1; reset_attempts_ <= config_.max_reset_attempts; ++reset_attempts_) {
    if (try_reset(start_element)) {
      history_ = GoalHistory{};
      state_.time = 0.0;
      reset_diagnostics();
      return make_result(Event::kNone);
    }
  }
  throw ResetFailed("hand closure failed after " + std::to_string(config_.max_reset_attempts) + " attempts");
}

bool Environment::try_reset(std::optional<std::size_t> start_element) {
  const auto& group = OctahedralGroup::instance();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  const std::size_t element =
      start_element ? *start_element : static_cast<std::size_t>(unit(rng_) * static_cast<double>(group.size()));
  if (element >= group.size()) {
    throw std::out_of_range("reset: start element must index the octahedral group");
  }
  Vec3 axis(normal(rng_), normal(rng_), normal(rng_));
  if (axis.norm() < 1e-12) {
    axis = Vec3::UnitX();
  }
  const double jitter_angle = config_.reset_orientation_jitter * unit(rng_);
  Vec3 offset;
  for (int i = 0; i < 3; ++i) {
    offset[i] = config_.reset_position_jitter * (2.0 * unit(rng_) - 1.0);
  }

  state_ = SimState{};
  state_.hand.q = open_posture();
  state_.cube.x = offset;
  state_.cube.R = compose(group[element % group.size()], Rotation::from_axis_angle(axis, jitter_angle));
  state_.support_active = true;
  state_.ctrl.kp = domain_.kp;
  state_.ctrl.kd = domain_.kd;
  state_.ctrl.tau_max = config_.tau_max;
  state_.ctrl.alpha = config_.lowpass_alpha;
  state_.ctrl.q_bar = measured_q();
  state_.ctrl.q_tilde_prev = state_.ctrl.q_bar;

  const auto& p = config_.physics;
  const Perturbation none;
  constexpr double close_rate = 1.5;       // rad/s along the closing path
  constexpr double touch_force = 0.05;     // N
  constexpr double squeeze = 0.06;         // rad past first touch on q2 and q3
  constexpr double max_close_time = 2.0;   // s
  constexpr double preload_time = 0.1;     // s with support before release
  std::array<bool, kFingers> closed{};
  const int max_close_steps = static_cast<int>(max_close_time / p.dt);
  bool all_closed = false;
  for (int step = 0; step < max_close_steps && !all_closed; ++step) {
    for (int f = 0; f < kFingers; ++f) {
      if (closed[static_cast<std::size_t>(f)]) {
        continue;
      }
      if (state_.contacts[static_cast<std::size_t>(f)].normal_force > touch_force) {
        closed[static_cast<std::size_t>(f)] = true;
        const Joints qm = measured_q();
        state_.ctrl.q_bar[3 * f + 1] = qm[3 * f + 1] + squeeze;
        state_.ctrl.q_bar[3 * f + 2] = qm[3 * f + 2] + squeeze;
        continue;
      }
      state_.ctrl.q_bar[3 * f + 1] += close_rate * p.dt;
      state_.ctrl.q_bar[3 * f + 2] += close_rate * p.dt;
    }
    all_closed = std::all_of(closed.begin(), closed.end(), [](bool c) { return c; });
    substep(state_, domain_, p, none, nullptr, nullptr);
  }
  if (!all_closed) {
    return false;
  }
  for (int i = 0; i < static_cast<int>(preload_time / p.dt); ++i) {
    substep(state_, domain_, p, none, nullptr, nullptr);
  }
  state_.ctrl.q_tilde_prev = state_.ctrl.q_bar;
  state_.support_active = false;
  for (int i = 0; i < static_cast<int>(config_.settle_time / p.dt); ++i) {
    substep(state_, domain_, p, none, nullptr, nullptr);
  }
  const bool static_cube = state_.cube.v.norm() < 1e-3;
  const bool grasped = active_contacts(state_) >= 3;
  const bool in_place = state_.cube.x.norm() < config_.thresholds.success_distance;
  return static_cube && grasped && in_place;
}

void Environment::integrate(int substeps, const Perturbation& pert, std::vector<SensorSample>* samples) {
  const auto& p = config_.physics;
  for (int i = 0; i < substeps; ++i) {
    substep(state_, domain_, p, pert, &energy_, &friction_);
    if (samples != nullptr && (i + 1) % p.substeps_per_sample == 0) {
      SensorSample s;
      s.t = state_.time;
      s.q = measured_q();
      s.qdot = state_.hand.qdot;
      s.q_bar = state_.ctrl.q_bar;
      s.cube = state_.cube;
      samples->push_back(s);
    }
  }
  energy_.kinetic_end = kinetic_energy(state_, domain_, p);
}

StepResult Environment::step(std::span<const double> action) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const bool sticky = unit(rng_) < domain_.sticky_prob;
  Perturbation pert;
  for (int i = 0; i < 3; ++i) {
    pert.force[i] = domain_.perturb_force_sigma * normal(rng_);
    pert.torque[i] = domain_.perturb_torque_sigma * normal(rng_);
  }
  if (!config_.perturbations) {
    pert = Perturbation{};
  }
  if (!sticky) {
    state_.ctrl = apply_action(state_.ctrl, measured_q(), action);
  } else if (action.size() != static_cast<std::size_t>(kJoints)) {
    throw std::invalid_argument("step: expected 12 action components");
  }

  StepResult result;
  const auto& p = config_.physics;
  integrate(p.substeps_per_policy_step, pert, config_.record_samples ? &result.samples : nullptr);

  const double dt_policy = p.dt * p.substeps_per_policy_step;
  history_.time_on_goal += dt_policy;
  history_.episode_time += dt_policy;
  history_.push(state_.cube.x.norm(), distance(goal_, state_.cube.R), config_.thresholds.hold_steps);
  result.hand = state_.hand;
  result.cube_true = state_.cube;
  result.event = check_termination(state_.cube, goal_, history_, config_.thresholds);
  return result;
}

StepResult Environment::make_result(Event e) const {
  StepResult r;
  r.hand = state_.hand;
  r.cube_true = state_.cube;
  r.event = e;
  return r;
}

}  // namespace reorient::env
