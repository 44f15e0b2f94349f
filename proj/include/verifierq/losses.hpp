#pragma once

#include <span>
#include <vector>

#include "verifierq/approximator.hpp"
#include "verifierq/dataset.hpp"

namespace verifierq {

using BatchView = std::span<const Transition* const>;

/// Expectile levels of the two CQL terms. Ablations may set tau1 >= tau2;
/// ordered() reports whether the usual 0 < tau1 < tau2 < 1 holds.
struct ExpectileConfig {
  double tau1 = 0.3;
  double tau2 = 0.9;

  bool ordered() const { return 0.0 < tau1 && tau1 < tau2 && tau2 < 1.0; }
};

/// `literal` is alpha * (L_mu - L_pi); `both_positive` is alpha * (L_mu + L_pi).
enum class SignMode { literal, both_positive };

/// |tau - 1(u < 0)| * u^2.
double expectile_loss(double u, double tau);
/// d/du of expectile_loss; 0 at u = 0.
double expectile_loss_grad(double u, double tau);

struct LossWithGrad {
  double value = 0.0;
  GradVector grad;
};

/// y = 0.5 * (r + gamma * V(s')), with V(s') = 0 on terminal transitions.
std::vector<double> td_targets(BatchView batch, const ValueNet& v, double gamma);

/// mean (Q(s, a) - y)^2 with the targets held constant; gradient over theta.
LossWithGrad regression_loss(BatchView batch, const QHead& q, std::span<const double> targets);

/// mean (0.5 * (r + gamma * V_psi(s')) - Q_theta(s, a))^2. V_psi(s') is a
/// constant here: no gradient reaches psi.
LossWithGrad td_loss(BatchView batch, const QHead& q, const ValueNet& v, double gamma);

struct CqlTerms {
  double l_mu = 0.0;
  double l_pi = 0.0;
  double value = 0.0;
  GradVector grad_psi;
};

/// L_mu    = mean expectile(Q_target(s, a) - V(s), tau1)
/// L_pi    = mean expectile(Q_online(s, a) - V(s), tau2)
/// value   = alpha * (L_mu -/+ L_pi) by sign mode.
/// Both Q heads are constants; the gradient is over psi only.
CqlTerms cql_loss(BatchView batch, const QHead& q_online, const QHead& q_target, const ValueNet& v,
                  const ExpectileConfig& cfg, double alpha, SignMode sign_mode);

/// mean expectile(Q(s, a) - V(s), tau); gradient over psi (Q constant).
LossWithGrad iql_value_loss(BatchView batch, const QHead& q, const ValueNet& v, double tau);

/// mean binary cross-entropy of Q(s, a) against the step reward; gradient over theta.
LossWithGrad bce_loss(BatchView batch, const QHead& q);

struct LossReport {
  double td_loss = 0.0;
  double l_mu = 0.0;
  double l_pi = 0.0;
  double cql_loss = 0.0;
  /// td_loss + cql_loss.
  double total = 0.0;
  GradVector grads_theta;
  GradVector grads_psi;
};

/// TD loss drives theta, the CQL term drives psi; no cross-gradients.
LossReport combined_loss(BatchView batch, const QHead& theta, const QHead& theta_hat, const ValueNet& psi,
                         double gamma, const ExpectileConfig& cfg, double alpha, SignMode sign_mode);

}  // namespace verifierq
