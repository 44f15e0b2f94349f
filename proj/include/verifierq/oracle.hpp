#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "verifierq/mdp.hpp"

namespace verifierq {

/// Dense MDP over states 0..num_states-1; next == -1 marks a transition into
/// a terminal state, whose value is 0.
struct FiniteMdp {
  std::size_t num_states = 0;
  std::size_t num_actions = 0;
  std::vector<std::int64_t> next;  // num_states * num_actions
  std::vector<double> reward;      // num_states * num_actions

  /// Non-terminal states of `problem` in breadth-first order.
  static FiniteMdp from_problem(const Problem& problem, std::uint64_t cap = kDefaultEnumerationCap);
  /// One state, one action, looping onto itself with reward r.
  static FiniteMdp self_loop(double r);

  std::size_t cell(std::size_t s, std::size_t a) const { return s * num_actions + a; }
};

struct ExactQTable {
  std::size_t num_states = 0;
  std::size_t num_actions = 0;
  std::vector<double> values;  // num_states * num_actions
  double gamma = 0.0;
  int iterations_used = 0;
  double final_residual = 0.0;
  /// Sup-norm change of every sweep, in order.
  std::vector<double> residuals;

  double at(std::size_t s, std::size_t a) const { return values[s * num_actions + a]; }
  /// Q*(state, a) for a table built from `problem`.
  double at(const Problem& problem, const State& state, ActionIndex a) const;
};

/// Q <- 0.5 * (R + gamma * max_a' Q(s', a')), applied once to every cell.
std::vector<double> apply_modified_bellman(const FiniteMdp& mdp, std::span<const double> q, double gamma);

/// Jacobi iteration from Q = 0 until the sweep residual is <= tol.
/// Throws ParameterError for invalid gamma/tol, and ContractError if
/// max_iterations sweeps do not reach tol.
ExactQTable value_iteration_modified(const FiniteMdp& mdp, double gamma, double tol, int max_iterations = 100000);
ExactQTable value_iteration_modified(const Problem& problem, double gamma, double tol,
                                     std::uint64_t cap = kDefaultEnumerationCap);

/// Minimizer of sum_i expectile_loss(x_i - m, tau) by bisection on [min, max].
double exact_expectile(std::span<const double> samples, double tau, double tol = 1e-12);

/// (max_a Q*(s, a), min_a Q*(s, a)) over every action.
std::pair<double, double> exact_max_min_q(const ExactQTable& table, const Problem& problem, const State& state);

}  // namespace verifierq
