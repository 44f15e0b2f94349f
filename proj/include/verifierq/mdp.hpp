#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace verifierq {

using ProblemId = std::uint64_t;
using ActionIndex = std::uint32_t;
using AnswerLabel = std::uint64_t;

inline constexpr std::uint64_t kDefaultEnumerationCap = 200'000;

/// One utterance: a fixed-length sequence of sub-tokens.
///
/// Every problem addresses its step actions by a dense index in
/// [0, vocab_size); `tokens` is the sub-token view of that index.
struct StepAction {
  ActionIndex index = 0;
  std::vector<std::uint32_t> tokens;

  bool operator==(const StepAction& o) const { return tokens == o.tokens; }
};

/// Per-step correctness reward, exactly 0 or 1.
class StepReward {
 public:
  constexpr StepReward() = default;
  static constexpr StepReward correct() { return StepReward(1.0); }
  static constexpr StepReward incorrect() { return StepReward(0.0); }
  static StepReward from_value(double v);

  constexpr double value() const { return value_; }
  constexpr bool is_correct() const { return value_ == 1.0; }
  constexpr bool operator==(const StepReward&) const = default;

 private:
  constexpr explicit StepReward(double v) : value_(v) {}
  double value_ = 0.0;
};

struct ProblemShape {
  int horizon = 1;
  int vocab_size = 2;
  int subvocab = 2;
  int step_len = 1;
  /// Probability that a correct step taken after a mistake is still rewarded.
  /// Zero gives strict absorption: once off the correct chain, every reward is 0.
  double recovery_prob = 0.0;

  bool operator==(const ProblemShape&) const = default;
};

/// A synthetic multi-step problem with one fully-correct chain.
class Problem {
 public:
  Problem(ProblemId id, ProblemShape shape, std::vector<ActionIndex> correct_chain);

  ProblemId id() const { return id_; }
  const ProblemShape& shape() const { return shape_; }
  int horizon() const { return shape_.horizon; }
  int vocab_size() const { return shape_.vocab_size; }
  const std::vector<ActionIndex>& correct_chain() const { return correct_chain_; }

  StepAction action(ActionIndex index) const;
  /// Inverse of action(); throws ParameterError for unknown token sequences.
  ActionIndex action_index(std::span<const std::uint32_t> tokens) const;

  /// Position of the first step that differs from the correct chain, or
  /// chain.size() when `chain` is a prefix of it.
  std::size_t first_deviation(std::span<const ActionIndex> chain) const;
  bool on_chain(std::span<const ActionIndex> prefix) const {
    return first_deviation(prefix) == prefix.size();
  }

  /// Final-answer label: a 64-bit mix of the problem id, the last step and
  /// the position of the first mistake. Only the correct chain has
  /// deviation position == horizon, so wrong chains collide with the correct
  /// answer only through a hash collision, while wrong chains that make the
  /// same mistake and end on the same step agree with each other.
  AnswerLabel answer_of(std::span<const ActionIndex> chain) const;
  AnswerLabel correct_answer() const { return answer_of(correct_chain_); }

  bool operator==(const Problem&) const = default;

 private:
  ProblemId id_;
  ProblemShape shape_;
  std::vector<ActionIndex> correct_chain_;
};

/// Problem id plus the steps taken so far.
struct State {
  ProblemId problem = 0;
  std::vector<ActionIndex> prefix;

  std::size_t depth() const { return prefix.size(); }
  bool operator==(const State&) const = default;
};

/// Deterministic in `seed`; the problem id is the seed itself.
Problem generate_problem(std::uint64_t seed, const ProblemShape& shape);
Problem generate_problem(std::uint64_t seed, int horizon, int vocab_size, int subvocab, int step_len);

State root_state(const Problem& problem);
bool is_terminal(const Problem& problem, const State& state);

StepReward step_reward(const Problem& problem, const State& state, ActionIndex action);
StepReward step_reward(const Problem& problem, const State& state, const StepAction& action);

State transition(const Problem& problem, const State& state, ActionIndex action);

/// Number of states with prefix length 0..horizon: sum of vocab^k.
std::uint64_t state_count(const Problem& problem);

/// Breadth-first position of a prefix; prefixes of equal length are ordered
/// lexicographically by action index.
std::uint64_t state_index(const Problem& problem, std::span<const ActionIndex> prefix);

/// All reachable states in breadth-first order. Throws SizeError when
/// vocab^horizon exceeds `cap`.
std::vector<State> enumerate_states(const Problem& problem, std::uint64_t cap = kDefaultEnumerationCap);

/// Throws SizeError when vocab^horizon exceeds `cap`.
void check_enumerable(const Problem& problem, std::uint64_t cap = kDefaultEnumerationCap);

}  // namespace verifierq
