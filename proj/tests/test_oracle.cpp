#include <doctest.h>

#include <cmath>

#include "verifierq/error.hpp"
#include "verifierq/oracle.hpp"
#include "verifierq/rng.hpp"

using namespace verifierq;

namespace {

/// Q* by backward recursion over prefixes; independent of value iteration.
double recursive_q(const Problem& p, const State& s, ActionIndex a, double gamma) {
  const double r = step_reward(p, s, a).value();
  const State n = transition(p, s, a);
  if (is_terminal(p, n)) {
    return 0.5 * r;
  }
  double best = 0.0;
  for (ActionIndex b = 0; b < static_cast<ActionIndex>(p.vocab_size()); ++b) {
    best = std::max(best, recursive_q(p, n, b, gamma));
  }
  return 0.5 * (r + gamma * best);
}

}  // namespace

TEST_CASE("self-loop fixed point is 1 / (2 - gamma)") {
  const auto t = value_iteration_modified(FiniteMdp::self_loop(1.0), 0.99, 1e-13);
  CHECK(std::abs(t.at(0, 0) - 1.0 / (2.0 - 0.99)) <= 1e-11);
  CHECK(t.final_residual <= 1e-13);
  CHECK(t.iterations_used == static_cast<int>(t.residuals.size()));
  for (std::size_t k = 1; k < t.residuals.size(); ++k) {
    // Below ~1e-6 the ratio is dominated by roundoff in the table itself.
    if (t.residuals[k - 1] > 1e-6) {
      CHECK(t.residuals[k] / t.residuals[k - 1] <= 0.495 + 1e-9);
    }
  }
}

TEST_CASE("value iteration matches backward recursion") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const int horizon = 1 + static_cast<int>(rng.index(4));
    const int vocab = 2 + static_cast<int>(rng.index(3));
    const Problem p = generate_problem(seed, horizon, vocab, vocab, 1);
    const auto t = value_iteration_modified(p, 0.9, 1e-12);
    CHECK(t.iterations_used <= horizon + 1);
    for (const State& s : enumerate_states(p)) {
      if (is_terminal(p, s)) {
        continue;
      }
      for (ActionIndex a = 0; a < static_cast<ActionIndex>(vocab); ++a) {
        CHECK(t.at(p, s, a) == doctest::Approx(recursive_q(p, s, a, 0.9)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("on-chain Q* follows the closed form") {
  // Q* at on-chain depth i for the correct step: sum_{j<m-i} (gamma/2)^j / 2.
  const Problem p = generate_problem(3, 5, 3, 3, 1);
  const double gamma = 0.99;
  const auto t = value_iteration_modified(p, gamma, 1e-12);
  State s = root_state(p);
  for (int i = 0; i < 5; ++i) {
    double expect = 0.0;
    for (int j = 0; j < 5 - i; ++j) {
      expect += 0.5 * std::pow(gamma / 2.0, j);
    }
    CHECK(t.at(p, s, p.correct_chain()[i]) == doctest::Approx(expect).epsilon(1e-12));
    s = transition(p, s, p.correct_chain()[i]);
  }
}

TEST_CASE("last correct step is worth one half") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Problem p = generate_problem(seed, 3, 3, 3, 1);
    const auto t = value_iteration_modified(p, 0.99, 1e-12);
    const State last{p.id(), {p.correct_chain()[0], p.correct_chain()[1]}};
    const auto [mx, mn] = exact_max_min_q(t, p, last);
    CHECK(t.at(p, last, p.correct_chain()[2]) == 0.5);
    CHECK(mx == 0.5);
    CHECK(mn == 0.0);
  }
}

TEST_CASE("minimal problem max and min") {
  const Problem p = generate_problem(4, 1, 2, 2, 1);
  const auto t = value_iteration_modified(p, 0.99, 1e-12);
  const auto [mx, mn] = exact_max_min_q(t, p, root_state(p));
  CHECK(mx == 0.5);
  CHECK(mn == 0.0);
}

TEST_CASE("off-chain states are worthless for every action") {
  const Problem p = generate_problem(6, 4, 3, 3, 1);
  const auto t = value_iteration_modified(p, 0.99, 1e-12);
  const State off{p.id(), {(p.correct_chain()[0] + 1) % 3}};
  const auto [mx, mn] = exact_max_min_q(t, p, off);
  CHECK(mx == mn);
  CHECK(mx == 0.0);
}

TEST_CASE("fixed points satisfy the operator and stay bounded") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ProblemShape shape{4, 3, 3, 1, seed % 2 == 0 ? 0.0 : 0.5};
    const Problem p = generate_problem(seed, shape);
    for (double gamma : {0.5, 0.9, 0.99}) {
      const double tol = 1e-10;
      const auto mdp = FiniteMdp::from_problem(p);
      const auto t = value_iteration_modified(mdp, gamma, tol);
      const auto again = apply_modified_bellman(mdp, t.values, gamma);
      for (std::size_t c = 0; c < again.size(); ++c) {
        CHECK(std::abs(again[c] - t.values[c]) <= 2.0 * tol);
        CHECK(t.values[c] >= 0.0);
        CHECK(t.values[c] <= 1.0 / (2.0 - gamma));
      }
      for (std::size_t k = 1; k < t.residuals.size(); ++k) {
        CHECK(t.residuals[k] <= (gamma / 2.0) * t.residuals[k - 1] + 1e-9);
      }
      for (const auto& [mx, mn] : {exact_max_min_q(t, p, root_state(p))}) {
        CHECK(mx >= mn);
      }
    }
  }
}

TEST_CASE("value iteration argument checks") {
  const auto loop = FiniteMdp::self_loop(1.0);
  CHECK_THROWS_AS(value_iteration_modified(loop, 1.0, 1e-9), ParameterError);
  CHECK_THROWS_AS(value_iteration_modified(loop, 0.9, 0.0), ParameterError);
  CHECK_THROWS_AS(value_iteration_modified(loop, 0.99, 1e-15, 5), ContractError);
  CHECK_THROWS_AS(value_iteration_modified(generate_problem(1, 10, 10, 10, 1), 0.9, 1e-9), SizeError);
  const Problem p = generate_problem(1, 2, 2, 2, 1);
  const auto t = value_iteration_modified(p, 0.9, 1e-9);
  CHECK_THROWS_AS(t.at(p, State{p.id(), {0, 0}}, 0), ContractError);
}

TEST_CASE("exact_expectile values") {
  const std::vector<double> two{0.0, 1.0};
  CHECK(exact_expectile(two, 0.5) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(exact_expectile(two, 0.9) == doctest::Approx(0.9).epsilon(1e-12));
  const std::vector<double> three{0.2, 0.5, 0.8};
  CHECK(std::abs(exact_expectile(three, 0.999) - 0.8) <= 0.01);
  const std::vector<double> one{0.3};
  CHECK(exact_expectile(one, 0.7) == 0.3);
  CHECK_THROWS_AS(exact_expectile(std::vector<double>{}, 0.5), ParameterError);
  CHECK_THROWS_AS(exact_expectile(two, 1.0), ParameterError);
}

TEST_CASE("exact_expectile is monotone in tau with the right limits") {
  Rng rng(17);
  for (int set = 0; set < 100; ++set) {
    std::vector<double> xs(2 + rng.index(20));
    for (double& x : xs) {
      x = rng.uniform();
    }
    const double mx = *std::max_element(xs.begin(), xs.end());
    const double mn = *std::min_element(xs.begin(), xs.end());
    double mean = 0.0;
    for (double x : xs) {
      mean += x / static_cast<double>(xs.size());
    }
    double prev = -1.0;
    for (int k = 1; k <= 99; ++k) {
      const double e = exact_expectile(xs, k / 100.0);
      CHECK(e >= prev);
      prev = e;
    }
    CHECK(std::abs(exact_expectile(xs, 0.5) - mean) <= 1e-9);
    CHECK(std::abs(exact_expectile(xs, 0.999) - mx) <= 0.02);
    CHECK(std::abs(exact_expectile(xs, 0.001) - mn) <= 0.02);
  }
}
