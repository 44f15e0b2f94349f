#include "verifierq/mdp.hpp"

#include <string>

#include "verifierq/error.hpp"
#include "verifierq/rng.hpp"

namespace verifierq {

namespace {

std::uint64_t checked_pow(std::uint64_t base, int exp, std::uint64_t limit) {
  std::uint64_t r = 1;
  for (int i = 0; i < exp; ++i) {
    if (r > limit / base) {
      return limit + 1;
    }
    r *= base;
  }
  return r;
}

void validate(const ProblemShape& s) {
  if (s.horizon < 1) {
    throw ParameterError("horizon must be >= 1, got " + std::to_string(s.horizon));
  }
  if (s.vocab_size < 2) {
    throw ParameterError("vocab_size must be >= 2, got " + std::to_string(s.vocab_size));
  }
  if (s.step_len < 1) {
    throw ParameterError("step_len must be >= 1, got " + std::to_string(s.step_len));
  }
  if (s.subvocab < 2) {
    throw ParameterError("subvocab must be >= 2, got " + std::to_string(s.subvocab));
  }
  const auto vocab = static_cast<std::uint64_t>(s.vocab_size);
  if (checked_pow(static_cast<std::uint64_t>(s.subvocab), s.step_len, vocab) < vocab) {
    throw ParameterError("subvocab^step_len must be >= vocab_size");
  }
  if (!(s.recovery_prob >= 0.0 && s.recovery_prob <= 1.0)) {
    throw ParameterError("recovery_prob must lie in [0, 1]");
  }
}

void require_nonterminal(const Problem& problem, const State& state) {
  if (state.problem != problem.id()) {
    throw ContractError("state belongs to a different problem");
  }
  if (is_terminal(problem, state)) {
    throw ContractError("operation requires a non-terminal state");
  }
}

}  // namespace

StepReward StepReward::from_value(double v) {
  if (v == 1.0) {
    return correct();
  }
  if (v == 0.0) {
    return incorrect();
  }
  throw ParameterError("step reward must be exactly 0 or 1");
}

Problem::Problem(ProblemId id, ProblemShape shape, std::vector<ActionIndex> correct_chain)
    : id_(id), shape_(shape), correct_chain_(std::move(correct_chain)) {
  validate(shape_);
  if (correct_chain_.size() != static_cast<std::size_t>(shape_.horizon)) {
    throw ParameterError("correct chain length must equal horizon");
  }
  for (ActionIndex a : correct_chain_) {
    if (a >= static_cast<ActionIndex>(shape_.vocab_size)) {
      throw ParameterError("correct chain step out of range");
    }
  }
}

StepAction Problem::action(ActionIndex index) const {
  if (index >= static_cast<ActionIndex>(shape_.vocab_size)) {
    throw ContractError("action index out of range");
  }
  StepAction a;
  a.index = index;
  a.tokens.resize(static_cast<std::size_t>(shape_.step_len));
  std::uint32_t rest = index;
  for (int i = shape_.step_len - 1; i >= 0; --i) {
    a.tokens[static_cast<std::size_t>(i)] = rest % static_cast<std::uint32_t>(shape_.subvocab);
    rest /= static_cast<std::uint32_t>(shape_.subvocab);
  }
  return a;
}

ActionIndex Problem::action_index(std::span<const std::uint32_t> tokens) const {
  if (tokens.size() != static_cast<std::size_t>(shape_.step_len)) {
    throw ParameterError("token sequence has wrong length");
  }
  std::uint64_t index = 0;
  for (std::uint32_t t : tokens) {
    if (t >= static_cast<std::uint32_t>(shape_.subvocab)) {
      throw ParameterError("sub-token out of range");
    }
    index = index * static_cast<std::uint64_t>(shape_.subvocab) + t;
  }
  if (index >= static_cast<std::uint64_t>(shape_.vocab_size)) {
    throw ParameterError("token sequence does not name a step action");
  }
  return static_cast<ActionIndex>(index);
}

std::size_t Problem::first_deviation(std::span<const ActionIndex> chain) const {
  const std::size_t n = std::min(chain.size(), correct_chain_.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (chain[i] != correct_chain_[i]) {
      return i;
    }
  }
  return chain.size();
}

AnswerLabel Problem::answer_of(std::span<const ActionIndex> chain) const {
  const std::uint64_t last = chain.empty() ? ~0ULL : chain.back();
  return derive_seed(id_, 0xa5a5ULL, last, first_deviation(chain));
}

Problem generate_problem(std::uint64_t seed, const ProblemShape& shape) {
  validate(shape);
  Rng rng(derive_seed(seed, 0x70726f62ULL));
  std::vector<ActionIndex> chain(static_cast<std::size_t>(shape.horizon));
  for (auto& a : chain) {
    a = static_cast<ActionIndex>(rng.index(static_cast<std::uint64_t>(shape.vocab_size)));
  }
  return Problem(seed, shape, std::move(chain));
}

Problem generate_problem(std::uint64_t seed, int horizon, int vocab_size, int subvocab, int step_len) {
  return generate_problem(seed, ProblemShape{horizon, vocab_size, subvocab, step_len, 0.0});
}

State root_state(const Problem& problem) { return State{problem.id(), {}}; }

bool is_terminal(const Problem& problem, const State& state) {
  return state.prefix.size() >= static_cast<std::size_t>(problem.horizon());
}

StepReward step_reward(const Problem& problem, const State& state, ActionIndex action) {
  require_nonterminal(problem, state);
  if (action >= static_cast<ActionIndex>(problem.vocab_size())) {
    throw ContractError("action index out of range");
  }
  const std::size_t pos = state.prefix.size();
  if (action != problem.correct_chain()[pos]) {
    return StepReward::incorrect();
  }
  if (problem.on_chain(state.prefix)) {
    return StepReward::correct();
  }
  const double p = problem.shape().recovery_prob;
  if (p <= 0.0) {
    return StepReward::incorrect();
  }
  std::uint64_t h = derive_seed(problem.id(), 0x7265636fULL, pos, action);
  for (ActionIndex a : state.prefix) {
    h = hash_combine(h, a);
  }
  return unit_interval(h) < p ? StepReward::correct() : StepReward::incorrect();
}

StepReward step_reward(const Problem& problem, const State& state, const StepAction& action) {
  return step_reward(problem, state, problem.action_index(action.tokens));
}

State transition(const Problem& problem, const State& state, ActionIndex action) {
  require_nonterminal(problem, state);
  if (action >= static_cast<ActionIndex>(problem.vocab_size())) {
    throw ContractError("action index out of range");
  }
  State next = state;
  next.prefix.push_back(action);
  return next;
}

void check_enumerable(const Problem& problem, std::uint64_t cap) {
  const auto leaves = checked_pow(static_cast<std::uint64_t>(problem.vocab_size()), problem.horizon(), cap);
  if (leaves > cap) {
    throw SizeError("vocab^horizon exceeds enumeration cap " + std::to_string(cap));
  }
}

std::uint64_t state_count(const Problem& problem) {
  const auto v = static_cast<std::uint64_t>(problem.vocab_size());
  std::uint64_t total = 0;
  std::uint64_t level = 1;
  for (int k = 0; k <= problem.horizon(); ++k) {
    total += level;
    level *= v;
  }
  return total;
}

std::uint64_t state_index(const Problem& problem, std::span<const ActionIndex> prefix) {
  const auto v = static_cast<std::uint64_t>(problem.vocab_size());
  std::uint64_t offset = 0;
  std::uint64_t level = 1;
  for (std::size_t k = 0; k < prefix.size(); ++k) {
    offset += level;
    level *= v;
  }
  std::uint64_t within = 0;
  for (ActionIndex a : prefix) {
    within = within * v + a;
  }
  return offset + within;
}

std::vector<State> enumerate_states(const Problem& problem, std::uint64_t cap) {
  check_enumerable(problem, cap);
  std::vector<State> out;
  out.reserve(static_cast<std::size_t>(state_count(problem)));
  out.push_back(root_state(problem));
  const auto v = static_cast<ActionIndex>(problem.vocab_size());
  for (std::size_t head = 0; head < out.size(); ++head) {
    if (is_terminal(problem, out[head])) {
      continue;
    }
    for (ActionIndex a = 0; a < v; ++a) {
      State child = out[head];
      child.prefix.push_back(a);
      out.push_back(std::move(child));
    }
  }
  return out;
}

}  // namespace verifierq
