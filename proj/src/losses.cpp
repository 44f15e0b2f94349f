#include "verifierq/losses.hpp"

#include <algorithm>
#include <cmath>

#include "verifierq/error.hpp"

namespace verifierq {

double expectile_loss(double u, double tau) {
  const double w = u < 0.0 ? 1.0 - tau : tau;
  return w * u * u;
}

double expectile_loss_grad(double u, double tau) {
  const double w = u < 0.0 ? 1.0 - tau : tau;
  return 2.0 * w * u;
}

namespace {

void require_nonempty(BatchView batch) {
  if (batch.empty()) {
    throw ContractError("loss over an empty batch");
  }
}

std::vector<HeadInput> q_inputs(BatchView batch) {
  std::vector<HeadInput> in;
  in.reserve(batch.size());
  for (const Transition* t : batch) {
    in.push_back(HeadInput{t->state.problem, t->state.prefix, t->action});
  }
  return in;
}

std::vector<HeadInput> v_inputs(BatchView batch) {
  std::vector<HeadInput> in;
  in.reserve(batch.size());
  for (const Transition* t : batch) {
    in.push_back(HeadInput{t->state.problem, t->state.prefix, kNoAction});
  }
  return in;
}

std::vector<double> values(const Approximator& head, std::span<const HeadInput> in) {
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = head.value(in[i]);
  }
  return out;
}

}  // namespace

std::vector<double> td_targets(BatchView batch, const ValueNet& v, double gamma) {
  std::vector<double> y(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Transition& t = *batch[i];
    const double next = t.terminal ? 0.0 : v.core().value(HeadInput{t.next_state.problem, t.next_state.prefix, kNoAction});
    y[i] = 0.5 * (t.reward.value() + gamma * next);
  }
  return y;
}

LossWithGrad regression_loss(BatchView batch, const QHead& q, std::span<const double> targets) {
  require_nonempty(batch);
  if (targets.size() != batch.size()) {
    throw ContractError("regression_loss: one target per transition required");
  }
  const auto in = q_inputs(batch);
  const auto qs = values(q.core(), in);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::vector<double> upstream(batch.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double d = qs[i] - targets[i];
    loss += d * d;
    upstream[i] = 2.0 * d * inv_n;
  }
  return LossWithGrad{loss * inv_n, backprop(q.core(), in, upstream)};
}

LossWithGrad td_loss(BatchView batch, const QHead& q, const ValueNet& v, double gamma) {
  require_nonempty(batch);
  const auto y = td_targets(batch, v, gamma);
  return regression_loss(batch, q, y);
}

CqlTerms cql_loss(BatchView batch, const QHead& q_online, const QHead& q_target, const ValueNet& v,
                  const ExpectileConfig& cfg, double alpha, SignMode sign_mode) {
  require_nonempty(batch);
  if (!(alpha >= 0.0)) {
    throw ContractError("cql_loss: alpha must be >= 0");
  }
  const auto qin = q_inputs(batch);
  const auto vin = v_inputs(batch);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const double pi_sign = sign_mode == SignMode::literal ? -1.0 : 1.0;
  CqlTerms out;
  std::vector<double> upstream(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double vs = v.core().value(vin[i]);
    const double u_mu = q_target.core().value(qin[i]) - vs;
    const double u_pi = q_online.core().value(qin[i]) - vs;
    out.l_mu += expectile_loss(u_mu, cfg.tau1);
    out.l_pi += expectile_loss(u_pi, cfg.tau2);
    // du/dV = -1 for both terms.
    upstream[i] = -alpha * inv_n * (expectile_loss_grad(u_mu, cfg.tau1) + pi_sign * expectile_loss_grad(u_pi, cfg.tau2));
  }
  out.l_mu *= inv_n;
  out.l_pi *= inv_n;
  out.value = alpha * (out.l_mu + pi_sign * out.l_pi);
  out.grad_psi = backprop(v.core(), vin, upstream);
  return out;
}

LossWithGrad iql_value_loss(BatchView batch, const QHead& q, const ValueNet& v, double tau) {
  require_nonempty(batch);
  if (!(tau > 0.0 && tau < 1.0)) {
    throw ContractError("iql_value_loss: tau must lie in (0, 1)");
  }
  const auto qin = q_inputs(batch);
  const auto vin = v_inputs(batch);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  std::vector<double> upstream(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double u = q.core().value(qin[i]) - v.core().value(vin[i]);
    loss += expectile_loss(u, tau);
    upstream[i] = -inv_n * expectile_loss_grad(u, tau);
  }
  return LossWithGrad{loss * inv_n, backprop(v.core(), vin, upstream)};
}

LossWithGrad bce_loss(BatchView batch, const QHead& q) {
  require_nonempty(batch);
  const auto in = q_inputs(batch);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  std::vector<double> upstream_gap(batch.size());
  const auto softplus = [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double gap = q.core().gap(in[i]);
    const double z = std::clamp(gap, -kGapLimit, kGapLimit);
    const double r = batch[i]->reward.value();
    // -[r log sigma(z) + (1 - r) log(1 - sigma(z))]
    loss += r * softplus(-z) + (1.0 - r) * softplus(z);
    upstream_gap[i] = (gap > kGapLimit || gap < -kGapLimit) ? 0.0 : inv_n * (bounded_sigmoid(z) - r);
  }
  return LossWithGrad{loss * inv_n, backprop_gap(q.core(), in, upstream_gap)};
}

LossReport combined_loss(BatchView batch, const QHead& theta, const QHead& theta_hat, const ValueNet& psi,
                         double gamma, const ExpectileConfig& cfg, double alpha, SignMode sign_mode) {
  auto td = td_loss(batch, theta, psi, gamma);
  auto cql = cql_loss(batch, theta, theta_hat, psi, cfg, alpha, sign_mode);
  LossReport r;
  r.td_loss = td.value;
  r.l_mu = cql.l_mu;
  r.l_pi = cql.l_pi;
  r.cql_loss = cql.value;
  r.total = td.value + cql.value;
  r.grads_theta = std::move(td.grad);
  r.grads_psi = std::move(cql.grad_psi);
  return r;
}

}  // namespace verifierq
