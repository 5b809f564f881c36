#include "reorient/sac.hpp"

#include <cmath>
#include <numbers>

namespace reorient::policy {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

std::vector<int> layer_sizes(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> s{in};
  s.insert(s.end(), hidden.begin(), hidden.end());
  s.push_back(out);
  return s;
}

Matrix hcat(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

// log(1 - tanh(u)^2) in a form that stays finite for large |u|.
Matrix log_one_minus_tanh_sq(const Matrix& u) {
  Matrix out(u.rows(), u.cols());
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    const double x = -2.0 * u.data()[i];
    const double softplus = x > 30.0 ? x : std::log1p(std::exp(x));
    out.data()[i] = 2.0 * (std::numbers::ln2 - u.data()[i] - softplus);
  }
  return out;
}

void check_finite(double v, const char* what, const SacAgent& agent) {
  if (!std::isfinite(v)) {
    throw NonFiniteLoss(std::string("SAC ") + what + " is not finite after " + std::to_string(agent.updates()) +
                        " updates (alpha=" + std::to_string(agent.alpha()) + ")");
  }
}

}  // namespace

Matrix standard_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = n(rng);
  }
  return m;
}

SacAgent::SacAgent(int policy_dim, int q_dim, int action_dim, SacConfig config, Rng& rng)
    : config_(std::move(config)),
      policy_dim_(policy_dim),
      q_dim_(q_dim),
      action_dim_(action_dim),
      target_entropy_(config_.target_entropy != 0.0 ? config_.target_entropy : -static_cast<double>(action_dim)),
      actor_(layer_sizes(policy_dim, config_.hidden, 2 * action_dim), config_.activation, rng, 0.1),
      q1_(layer_sizes(q_dim + action_dim, config_.hidden, 1), config_.activation, rng),
      q2_(layer_sizes(q_dim + action_dim, config_.hidden, 1), config_.activation, rng),
      q1_target_(q1_),
      q2_target_(q2_),
      log_alpha_(Matrix::Constant(1, 1, std::log(config_.init_alpha))),
      actor_opt_(nn::AdamConfig{.learning_rate = config_.actor_lr, .max_grad_norm = config_.max_grad_norm}),
      critic_opt_(nn::AdamConfig{.learning_rate = config_.critic_lr, .max_grad_norm = config_.max_grad_norm}),
      alpha_opt_(nn::AdamConfig{.learning_rate = config_.alpha_lr}) {}

double SacAgent::alpha() const { return std::exp(log_alpha_.value(0, 0)); }

Matrix SacAgent::log_std(const Matrix& raw) const {
  const double lo = config_.log_std_min;
  const double hi = config_.log_std_max;
  return (lo + 0.5 * (hi - lo) * (raw.array().tanh() + 1.0)).matrix();
}

PlainSample SacAgent::sample_plain(const Matrix& policy_obs, const Matrix& noise) const {
  const Matrix out = actor_.forward(policy_obs);
  const Matrix mean = out.leftCols(action_dim_);
  const Matrix ls = log_std(out.rightCols(action_dim_));
  const Matrix u = (mean.array() + ls.array().exp() * noise.array()).matrix();
  PlainSample s;
  s.action = u.array().tanh().matrix();
  const Matrix gauss = (-0.5 * noise.array().square() - ls.array() - kHalfLog2Pi).matrix();
  s.log_prob = gauss.rowwise().sum() - log_one_minus_tanh_sq(u).rowwise().sum();
  return s;
}

Eigen::VectorXd SacAgent::act(const Eigen::VectorXd& policy_obs, bool deterministic, Rng& rng) const {
  const Matrix obs = policy_obs.transpose();
  if (deterministic) {
    const Matrix out = actor_.forward(obs);
    return out.leftCols(action_dim_).array().tanh().matrix().transpose();
  }
  return sample_plain(obs, standard_normal(rng, 1, action_dim_)).action.transpose();
}

std::pair<ad::Var, ad::Var> SacAgent::sample(ad::Tape& tape, const ad::Var& policy_obs, const Matrix& noise) {
  const double lo = config_.log_std_min;
  const double hi = config_.log_std_max;
  ad::Var out = actor_.forward(tape, policy_obs);
  ad::Var mean = ad::slice_cols(out, 0, action_dim_);
  ad::Var ls = ad::add_scalar(ad::scale(ad::add_scalar(ad::tanh(ad::slice_cols(out, action_dim_, action_dim_)), 1.0),
                                        0.5 * (hi - lo)),
                              lo);
  ad::Var eps = tape.constant(noise);
  ad::Var u = ad::add(mean, ad::mul(ad::exp(ls), eps));
  ad::Var action = ad::tanh(u);
  // log N(u; mean, std) = -eps^2/2 - log std - log(2 pi)/2
  ad::Var gauss = ad::sub(tape.constant((-0.5 * noise.array().square() - kHalfLog2Pi).matrix()), ls);
  // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
  ad::Var squash = ad::scale(ad::add_scalar(ad::neg(ad::add(u, ad::softplus(ad::scale(u, -2.0)))), std::numbers::ln2), 2.0);
  ad::Var log_prob = ad::sub(ad::row_sum(gauss), ad::row_sum(squash));
  return {action, log_prob};
}

ad::Var SacAgent::critic_loss(ad::Tape& tape, const Batch& batch, const Matrix& next_noise) {
  const PlainSample next = sample_plain(batch.next_policy_obs, next_noise);
  const Matrix next_in = hcat(batch.next_q_obs, next.action);
  const Matrix q_next = q1_target_.forward(next_in).cwiseMin(q2_target_.forward(next_in));
  const Matrix soft = q_next - alpha() * next.log_prob;
  const Matrix target =
      (batch.reward.array() + config_.gamma * (1.0 - batch.terminal.array()) * soft.array()).matrix();

  ad::Var in = tape.constant(hcat(batch.q_obs, batch.action));
  ad::Var y = tape.constant(target);
  ad::Var e1 = ad::sub(q1_.forward(tape, in), y);
  ad::Var e2 = ad::sub(q2_.forward(tape, in), y);
  return ad::add(ad::mean(ad::square(e1)), ad::mean(ad::square(e2)));
}

ad::Var SacAgent::actor_loss(ad::Tape& tape, const Batch& batch, const Matrix& noise, Matrix* log_prob_out) {
  auto [action, log_prob] = sample(tape, tape.constant(batch.policy_obs), noise);
  ad::Var in = ad::concat_cols({tape.constant(batch.q_obs), action});
  ad::Var q = ad::minimum(q1_.forward(tape, in), q2_.forward(tape, in));
  if (log_prob_out != nullptr) {
    *log_prob_out = log_prob.value();
  }
  return ad::mean(ad::sub(ad::scale(log_prob, alpha()), q));
}

ad::Var SacAgent::alpha_loss(ad::Tape& tape, const Matrix& log_prob) {
  ad::Var la = tape.parameter(log_alpha_);
  ad::Var shifted = tape.constant((log_prob.array() + target_entropy_).matrix());
  return ad::neg(ad::mean(ad::mul(la, shifted)));
}

std::vector<ad::Parameter*> SacAgent::critic_parameters() {
  auto p = q1_.parameters();
  auto p2 = q2_.parameters();
  p.insert(p.end(), p2.begin(), p2.end());
  return p;
}

void SacAgent::update_targets(double tau) {
  q1_target_.polyak_update(q1_, tau);
  q2_target_.polyak_update(q2_, tau);
}

SacDiagnostics SacAgent::update(const Batch& batch, Rng& rng) {
  SacDiagnostics d;
  const Eigen::Index n = batch.size();
  const auto critic_params = critic_parameters();
  const auto actor_params = actor_.parameters();
  {
    ad::Tape tape;
    ad::Var loss = critic_loss(tape, batch, standard_normal(rng, n, action_dim_));
    d.critic_loss = loss.scalar();
    check_finite(d.critic_loss, "critic loss", *this);
    tape.backward(loss);
    critic_opt_.step(critic_params);
  }
  Matrix log_prob;
  {
    ad::Tape tape;
    ad::Var loss = actor_loss(tape, batch, standard_normal(rng, n, action_dim_), &log_prob);
    d.actor_loss = loss.scalar();
    check_finite(d.actor_loss, "actor loss", *this);
    tape.backward(loss);
    actor_opt_.step(actor_params);
    for (auto* p : critic_params) {
      p->zero_grad();
    }
  }
  {
    ad::Tape tape;
    ad::Var loss = alpha_loss(tape, log_prob);
    d.alpha_loss = loss.scalar();
    tape.backward(loss);
    alpha_opt_.step({&log_alpha_});
  }
  update_targets(config_.tau);
  ++updates_;
  d.alpha = alpha();
  d.entropy = -log_prob.mean();
  d.q_mean = q1_.forward(hcat(batch.q_obs, batch.action)).mean();
  return d;
}

AgentState SacAgent::state() const {
  AgentState s;
  s.policy_sizes = actor_.sizes();
  s.q_sizes = q1_.sizes();
  s.actor = actor_.flatten();
  s.q1 = q1_.flatten();
  s.q2 = q2_.flatten();
  s.q1_target = q1_target_.flatten();
  s.q2_target = q2_target_.flatten();
  s.log_alpha = log_alpha_.value(0, 0);
  s.actor_opt = actor_opt_.state();
  s.critic_opt = critic_opt_.state();
  s.alpha_opt = alpha_opt_.state();
  s.updates = updates_;
  return s;
}

void SacAgent::restore(const AgentState& s) {
  if (s.policy_sizes != actor_.sizes() || s.q_sizes != q1_.sizes()) {
    throw std::invalid_argument("SacAgent: checkpoint network shapes do not match the configured agent");
  }
  actor_.unflatten(s.actor);
  q1_.unflatten(s.q1);
  q2_.unflatten(s.q2);
  q1_target_.unflatten(s.q1_target);
  q2_target_.unflatten(s.q2_target);
  log_alpha_.value(0, 0) = s.log_alpha;
  actor_opt_.restore(s.actor_opt, actor_.parameters());
  critic_opt_.restore(s.critic_opt, critic_parameters());
  alpha_opt_.restore(s.alpha_opt, {&log_alpha_});
  updates_ = s.updates;
}

}  // namespace reorient::policy
