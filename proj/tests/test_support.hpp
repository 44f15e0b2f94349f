#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "verifierq/approximator.hpp"
#include "verifierq/dataset.hpp"
#include "verifierq/rng.hpp"

namespace verifierq::testing {

/// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero gradients from
/// turning roundoff of the difference quotient into large ratios.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Max relative error of `grad` against central differences of `f` on
/// `coords` random coordinates of `params`. `params` is restored.
inline double fd_max_error(std::vector<double>& params, const std::vector<double>& grad,
                           const std::function<double()>& f, Rng& rng, int coords = 20, double h = 1e-5) {
  double worst = 0.0;
  for (int c = 0; c < coords; ++c) {
    const auto i = static_cast<std::size_t>(rng.index(params.size()));
    const double saved = params[i];
    params[i] = saved + h;
    const double up = f();
    params[i] = saved - h;
    const double down = f();
    params[i] = saved;
    worst = std::max(worst, relative_error(grad[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

inline void randomize(ParamSet& p, Rng& rng, double scale) {
  for (double& x : p.values) {
    x = scale * (2.0 * rng.uniform() - 1.0);
  }
}

inline std::vector<const Transition*> all_transitions(const OfflineDataset& ds) {
  std::vector<const Transition*> out;
  for (const auto& t : ds.transitions()) {
    out.push_back(&t);
  }
  return out;
}

inline std::vector<const Transition*> pick(const OfflineDataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<const Transition*> out;
  for (std::size_t i : idx) {
    out.push_back(&ds.transitions()[i]);
  }
  return out;
}

}  // namespace verifierq::testing

namespace verifierq::testing {

/// One rollout from every non-terminal state of `p`, each following an
/// optimal continuation: the correct step on the chain, step 0 off it.
inline OfflineDataset optimal_cover_dataset(const Problem& p) {
  std::vector<Transition> ts;
  std::uint64_t rid = 0;
  for (const State& start : enumerate_states(p)) {
    if (is_terminal(p, start)) {
      continue;
    }
    State s = start;
    while (!is_terminal(p, s)) {
      const ActionIndex a = p.on_chain(s.prefix) ? p.correct_chain()[s.depth()] : 0;
      Transition t;
      t.state = s;
      t.action = a;
      t.reward = step_reward(p, s, a);
      t.next_state = transition(p, s, a);
      t.terminal = is_terminal(p, t.next_state);
      t.rollout_id = rid;
      t.step_index = static_cast<int>(s.depth());
      s = t.next_state;
      ts.push_back(std::move(t));
    }
    ++rid;
  }
  return OfflineDataset({p}, std::move(ts), DatasetMeta{});
}

}  // namespace verifierq::testing
