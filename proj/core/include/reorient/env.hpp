#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "reorient/rotations.hpp"

namespace reorient::env {

constexpr int kFingers = 4;
constexpr int kJointsPerFinger = 3;
constexpr int kJoints = kFingers * kJointsPerFinger;

using Joints = Eigen::Matrix<double, kJoints, 1>;
using Vec3 = Eigen::Vector3d;

/// Pose and twist of the cube. x is measured from the nominal grasp center,
/// with +z pointing towards the (downward-facing) palm.
struct CubeState {
  Vec3 x = Vec3::Zero();
  Rotation R;
  Vec3 v = Vec3::Zero();
  Vec3 w = Vec3::Zero();

  bool finite() const { return x.allFinite() && v.allFinite() && w.allFinite(); }
};

/// Active joints per finger: q1 spread, q2 proximal flexion, q3 middle flexion.
/// The passive distal joint follows q4 = q3.
struct HandState {
  Joints q = Joints::Zero();
  Joints qdot = Joints::Zero();
  std::array<double, kFingers> q4{};
};

struct ControllerState {
  Joints q_bar = Joints::Zero();
  Joints q_tilde_prev = Joints::Zero();
  double kp = 2.0;
  double kd = 0.05;
  double tau_max = 0.4;
  double alpha = 0.5;
};

struct NoiseConfig {
  double q_sigma = 0.02;
  double x_sigma = 0.01;
  double R_sigma = 0.2;
};

/// One sampled realization of every per-episode randomization.
struct DomainConfig {
  Joints q_offset = Joints::Zero();
  double eta_lat = 0.9;
  double eta_spin = 1e-3;
  double cube_mass = 0.1;
  double cube_size = 0.08;
  double kp = 2.0;
  double kd = 0.05;
  double sticky_prob = 0.1;
  double gravity_scale = 1.0;
  NoiseConfig noise;
  double perturb_force_sigma = 0.2;
  double perturb_torque_sigma = 2e-3;
};

/// Fields pinned instead of sampled.
struct DomainOverrides {
  std::optional<Joints> q_offset;
  std::optional<double> eta_lat;
  std::optional<double> eta_spin;
  std::optional<double> cube_mass;
  std::optional<double> cube_size;
  std::optional<double> kp;
  std::optional<double> kd;
  std::optional<double> sticky_prob;
  std::optional<double> gravity_scale;
  std::optional<NoiseConfig> noise;
  std::optional<double> perturb_force_sigma;
  std::optional<double> perturb_torque_sigma;
};

/// Sampling support of each randomized quantity.
struct DomainRanges {
  static constexpr double kQOffset = 0.04;
  static constexpr double kEtaLatMin = 0.81;
  static constexpr double kEtaLatMax = 0.99;
  static constexpr double kEtaSpinMin = 2e-4;
  static constexpr double kEtaSpinMax = 2e-2;
  static constexpr double kMassNominal = 0.1;
  static constexpr double kMassSpread = 0.2;
  static constexpr double kSizeNominal = 0.08;
  static constexpr double kSizeSpread = 0.05;
  static constexpr double kKpNominal = 2.0;
  static constexpr double kKdNominal = 0.05;
  static constexpr double kGainSpread = 0.2;
};

class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class SimulationDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ResetFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

DomainConfig sample_domain(Rng& rng, const DomainOverrides& overrides = {});

/// eta_spin * eta_lat / 0.9
double effective_spinning_friction(const DomainConfig& cfg);

struct JointLimits {
  Joints q_min;
  Joints q_max;
  static const JointLimits& standard();
};

/// Relative action interface followed by the first-order lowpass:
/// q_tilde = clip(q + a * tau_max / kp, q_min, q_max); q_bar <- alpha q_bar + (1 - alpha) q_tilde.
/// `q` is the measured joint angle vector.
ControllerState apply_action(const ControllerState& ctrl, const Joints& q, std::span<const double> action,
                             const JointLimits& limits = JointLimits::standard());

enum class Event { kNone, kDropped, kOutOfBounds, kSuccess, kTimeoutGoal, kTimeoutEpisode };

std::string to_string(Event e);
Event event_from_string(const std::string& s);
/// Only drops, out-of-bounds and successes end a trajectory for learning.
inline bool is_learning_termination(Event e) {
  return e == Event::kDropped || e == Event::kOutOfBounds || e == Event::kSuccess;
}
inline bool ends_episode(Event e) { return e != Event::kNone && e != Event::kSuccess; }

struct TerminationThresholds {
  double drop_height = -0.05;
  double max_distance = 0.10;
  double success_distance = 0.025;
  double success_angle = 0.4;
  int hold_steps = 4;
  double goal_timeout = 10.0;
  double episode_timeout = 120.0;
};

/// Goal-reaching bookkeeping, one entry per policy step since the goal was set.
struct GoalHistory {
  std::deque<std::pair<double, double>> recent;  // (|x|, theta), newest last
  double time_on_goal = 0.0;
  double episode_time = 0.0;

  void push(double dist, double theta, int keep);
};

Event check_termination(const CubeState& cube, const Rotation& goal, const GoalHistory& history,
                        const TerminationThresholds& thresholds = {});

/// Proprioceptive reading at the estimator rate.
struct SensorSample {
  double t = 0.0;
  Joints q = Joints::Zero();     // measured (offset included)
  Joints qdot = Joints::Zero();
  Joints q_bar = Joints::Zero();  // desired angles, the control input
  CubeState cube;                 // ground truth for supervision
};

struct StepResult {
  HandState hand;
  CubeState cube_true;
  Event event = Event::kNone;
  std::vector<SensorSample> samples;
};

struct Contact {
  bool active = false;
  Vec3 point = Vec3::Zero();
  Vec3 normal = Vec3::Zero();  // cube -> fingertip
  double depth = 0.0;
  double normal_force = 0.0;
  Vec3 lateral_force = Vec3::Zero();
  double spin_torque = 0.0;
  // Stiction state: tangential spring elongation and torsional twist.
  Vec3 slip = Vec3::Zero();
  double twist = 0.0;
};

/// Work done by every force class, accumulated with midpoint velocities so
/// that the kinetic energy change is matched exactly by the discrete updates.
struct EnergyLedger {
  double actuator = 0.0;
  double perturbation = 0.0;
  double gravity = 0.0;
  double contact_on_cube = 0.0;
  double contact_on_hand = 0.0;
  double joint_limit = 0.0;
  double kinetic_start = 0.0;
  double kinetic_end = 0.0;

  double contact_net() const { return contact_on_cube + contact_on_hand; }
  double residual() const {
    return (kinetic_end - kinetic_start) -
           (actuator + perturbation + gravity + contact_on_cube + contact_on_hand + joint_limit);
  }
};

struct FrictionDiagnostics {
  double max_lateral_excess = -1e300;  // max(|F_t| - eta_lat |F_n|)
  double max_spin_excess = -1e300;     // max(|tau_s| - eta_eff |F_n|)
  std::int64_t contact_substeps = 0;
};

struct PhysicsParams {
  double dt = 1e-3;
  int substeps_per_policy_step = 100;
  int substeps_per_sample = 10;
  double normal_stiffness = 5000.0;
  double normal_damping = 20.0;
  double lateral_stiffness = 2000.0;
  double lateral_damping = 5.0;
  double twist_stiffness = 0.5;
  double twist_damping = 1e-3;
  double joint_inertia = 2e-3;
  double tip_radius = 0.01;
  double palm_height = 0.1175;
  double base_radius = 0.06;
  double mount_pitch = 0.35;
  std::array<double, 3> link_lengths{0.05, 0.04, 0.03};
  double gravity = 9.81;
};

struct FingerKinematics {
  Vec3 tip = Vec3::Zero();
  Eigen::Matrix3d jv = Eigen::Matrix3d::Zero();  // d tip / d (q1, q2, q3)
  Eigen::Matrix3d jw = Eigen::Matrix3d::Zero();  // distal link angular velocity / d (q1, q2, q3)
};

FingerKinematics finger_kinematics(const PhysicsParams& p, int finger, const Eigen::Vector3d& q);
std::array<Vec3, kFingers> fingertip_positions(const PhysicsParams& p, const Joints& q);

/// Full simulator state.
struct SimState {
  HandState hand;
  CubeState cube;
  ControllerState ctrl;
  std::array<Contact, kFingers> contacts{};
  bool support_active = false;
  double time = 0.0;
};

/// Per-policy-step external wrench on the cube.
struct Perturbation {
  Vec3 force = Vec3::Zero();
  Vec3 torque = Vec3::Zero();
};

/// Advances one 1 kHz substep. Throws SimulationDiverged on non-finite state.
void substep(SimState& s, const DomainConfig& cfg, const PhysicsParams& p, const Perturbation& perturbation,
             EnergyLedger* ledger, FrictionDiagnostics* friction);

double kinetic_energy(const SimState& s, const DomainConfig& cfg, const PhysicsParams& p);
int active_contacts(const SimState& s);

struct EnvConfig {
  PhysicsParams physics;
  TerminationThresholds thresholds;
  double lowpass_alpha = 0.5;
  double tau_max = 0.4;
  double settle_time = 0.5;
  double reset_orientation_jitter = 0.1;
  double reset_position_jitter = 0.005;
  int max_reset_attempts = 10;
  bool perturbations = true;
  bool record_samples = true;
};

/// Surrogate hand-cube environment driven at the policy rate.
class Environment {
 public:
  Environment(EnvConfig config, std::uint64_t seed);

  /// Places the cube (orientation = start group element composed with jitter,
  /// random element when unset), closes the hand, drops the support and
  /// settles. Retries with fresh samples on closure failure.
  StepResult reset(const DomainConfig& domain, std::optional<std::size_t> start_element = std::nullopt);

  /// Applies the action through apply_action (or reuses q_bar on a sticky
  /// step) and integrates one policy period.
  StepResult step(std::span<const double> action);

  void set_goal(const Rotation& goal);
  const Rotation& goal() const { return goal_; }
  const GoalHistory& history() const { return history_; }

  const SimState& state() const { return state_; }
  SimState& mutable_state() { return state_; }
  const DomainConfig& domain() const { return domain_; }
  DomainConfig& mutable_domain() { return domain_; }
  const EnvConfig& config() const { return config_; }
  EnvConfig& mutable_config() { return config_; }
  void set_lowpass_alpha(double alpha);

  /// Joint angles as read by the sensors (true angles plus offset).
  Joints measured_q() const;

  const EnergyLedger& energy() const { return energy_; }
  const FrictionDiagnostics& friction() const { return friction_; }
  void reset_diagnostics();

  Rng& rng() { return rng_; }
  double time() const { return state_.time; }
  int reset_attempts() const { return reset_attempts_; }

 private:
  bool try_reset(std::optional<std::size_t> start_element);
  StepResult make_result(Event e) const;
  void integrate(int substeps, const Perturbation& pert, std::vector<SensorSample>* samples);

  EnvConfig config_;
  Rng rng_;
  SimState state_;
  DomainConfig domain_;
  Rotation goal_;
  GoalHistory history_;
  EnergyLedger energy_;
  FrictionDiagnostics friction_;
  int reset_attempts_ = 0;
};

/// Closing posture used by the scripted reset: q2 = q3 = s along the path.
Joints open_posture();

}  // namespace reorient::env
