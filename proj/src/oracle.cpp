#include "verifierq/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "verifierq/error.hpp"

namespace verifierq {

FiniteMdp FiniteMdp::from_problem(const Problem& problem, std::uint64_t cap) {
  check_enumerable(problem, cap);
  const auto states = enumerate_states(problem, cap);
  FiniteMdp mdp;
  mdp.num_actions = static_cast<std::size_t>(problem.vocab_size());
  for (const State& s : states) {
    if (!is_terminal(problem, s)) {
      ++mdp.num_states;
    }
  }
  mdp.next.assign(mdp.num_states * mdp.num_actions, -1);
  mdp.reward.assign(mdp.num_states * mdp.num_actions, 0.0);
  for (std::size_t si = 0; si < mdp.num_states; ++si) {
    const State& s = states[si];
    for (std::size_t a = 0; a < mdp.num_actions; ++a) {
      const auto act = static_cast<ActionIndex>(a);
      mdp.reward[mdp.cell(si, a)] = step_reward(problem, s, act).value();
      const State n = transition(problem, s, act);
      if (!is_terminal(problem, n)) {
        mdp.next[mdp.cell(si, a)] = static_cast<std::int64_t>(state_index(problem, n.prefix));
      }
    }
  }
  return mdp;
}

FiniteMdp FiniteMdp::self_loop(double r) {
  return FiniteMdp{1, 1, {0}, {r}};
}

double ExactQTable::at(const Problem& problem, const State& state, ActionIndex a) const {
  if (is_terminal(problem, state)) {
    throw ContractError("exact Q of a terminal state");
  }
  const auto s = state_index(problem, state.prefix);
  if (s >= num_states || a >= num_actions) {
    throw ContractError("state or action outside the exact table");
  }
  return at(static_cast<std::size_t>(s), a);
}

std::vector<double> apply_modified_bellman(const FiniteMdp& mdp, std::span<const double> q, double gamma) {
  std::vector<double> best(mdp.num_states, 0.0);
  for (std::size_t s = 0; s < mdp.num_states; ++s) {
    const auto row = q.subspan(s * mdp.num_actions, mdp.num_actions);
    best[s] = *std::max_element(row.begin(), row.end());
  }
  std::vector<double> out(q.size());
  for (std::size_t c = 0; c < out.size(); ++c) {
    const double next = mdp.next[c] < 0 ? 0.0 : best[static_cast<std::size_t>(mdp.next[c])];
    out[c] = 0.5 * (mdp.reward[c] + gamma * next);
  }
  return out;
}

ExactQTable value_iteration_modified(const FiniteMdp& mdp, double gamma, double tol, int max_iterations) {
  if (!(gamma > 0.0 && gamma < 1.0)) {
    throw ParameterError("gamma must lie in (0, 1)");
  }
  if (!(tol > 0.0)) {
    throw ParameterError("tol must be > 0");
  }
  if (mdp.num_states == 0 || mdp.num_actions == 0) {
    throw ParameterError("empty MDP");
  }
  ExactQTable t;
  t.num_states = mdp.num_states;
  t.num_actions = mdp.num_actions;
  t.gamma = gamma;
  t.values.assign(mdp.num_states * mdp.num_actions, 0.0);
  for (int k = 1; k <= max_iterations; ++k) {
    auto next = apply_modified_bellman(mdp, t.values, gamma);
    double residual = 0.0;
    for (std::size_t c = 0; c < next.size(); ++c) {
      residual = std::max(residual, std::abs(next[c] - t.values[c]));
    }
    t.values = std::move(next);
    t.residuals.push_back(residual);
    t.iterations_used = k;
    t.final_residual = residual;
    if (residual <= tol) {
      return t;
    }
  }
  throw ContractError("value iteration did not reach tol within " + std::to_string(max_iterations) + " sweeps");
}

ExactQTable value_iteration_modified(const Problem& problem, double gamma, double tol, std::uint64_t cap) {
  return value_iteration_modified(FiniteMdp::from_problem(problem, cap), gamma, tol);
}

double exact_expectile(std::span<const double> samples, double tau, double tol) {
  if (samples.empty()) {
    throw ParameterError("exact_expectile needs at least one sample");
  }
  if (!(tau > 0.0 && tau < 1.0)) {
    throw ParameterError("tau must lie in (0, 1)");
  }
  auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
  double lo = *lo_it;
  double hi = *hi_it;
  // Half the negative derivative of the objective; strictly decreasing in m.
  const auto slope = [&](double m) {
    double s = 0.0;
    for (double x : samples) {
      const double u = x - m;
      s += (u < 0.0 ? 1.0 - tau : tau) * u;
    }
    return s;
  };
  for (int i = 0; i < 200 && hi - lo > tol; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (slope(mid) > 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

std::pair<double, double> exact_max_min_q(const ExactQTable& table, const Problem& problem, const State& state) {
  double mx = table.at(problem, state, 0);
  double mn = mx;
  for (std::size_t a = 1; a < table.num_actions; ++a) {
    const double q = table.at(problem, state, static_cast<ActionIndex>(a));
    mx = std::max(mx, q);
    mn = std::min(mn, q);
  }
  return {mx, mn};
}

}  // namespace verifierq
