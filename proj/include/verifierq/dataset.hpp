#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "verifierq/mdp.hpp"
#include "verifierq/rng.hpp"

namespace verifierq {

struct Transition {
  State state;
  ActionIndex action = 0;
  StepReward reward;
  State next_state;
  bool terminal = false;
  std::uint64_t rollout_id = 0;
  int step_index = 0;

  bool operator==(const Transition&) const = default;
};

struct Rollout {
  std::uint64_t id = 0;
  ProblemId problem = 0;
  std::vector<ActionIndex> chain;
  AnswerLabel final_answer = 0;
  bool answer_correct = false;

  bool operator==(const Rollout&) const = default;
};

/// Per-step noise of the behaviour policy that produced the offline data.
struct NoisePolicy {
  /// Probability of replacing the correct step with a uniformly random wrong one.
  double epsilon = 0.0;
  /// Force every rollout to contain a mistake while every position's correct
  /// step still appears in at least one rollout.
  bool stitch_mode = false;

  bool operator==(const NoisePolicy&) const = default;
};

struct DatasetMeta {
  std::uint64_t seed = 0;
  NoisePolicy policy;
  int rollouts_per_problem = 0;
  /// Only meaningful when policy.stitch_mode is set.
  bool stitch_guarantee_held = true;
  std::vector<std::string> warnings;

  bool operator==(const DatasetMeta&) const = default;
};

class OfflineDataset {
 public:
  OfflineDataset() = default;
  OfflineDataset(std::vector<Problem> problems, std::vector<Transition> transitions, DatasetMeta meta);

  const std::vector<Problem>& problems() const { return problems_; }
  const std::vector<Transition>& transitions() const { return transitions_; }
  const std::vector<Rollout>& rollouts() const { return rollouts_; }
  const DatasetMeta& meta() const { return meta_; }
  DatasetMeta& meta() { return meta_; }

  bool empty() const { return transitions_.empty(); }
  std::size_t size() const { return transitions_.size(); }

  const Problem& problem(ProblemId id) const;
  bool has_problem(ProblemId id) const { return problem_pos_.contains(id); }

  /// Transition indices of each rollout, in step order.
  const std::vector<std::size_t>& rollout_steps(std::size_t rollout) const { return rollout_steps_[rollout]; }

  /// Index of the transition that follows `i` in its rollout, or -1.
  std::ptrdiff_t next_in_rollout(std::size_t i) const { return next_[i]; }

  /// Fraction of rollouts whose chain is the correct chain.
  double fully_correct_fraction() const;

  bool operator==(const OfflineDataset& o) const {
    return problems_ == o.problems_ && transitions_ == o.transitions_ && rollouts_ == o.rollouts_ &&
           meta_ == o.meta_;
  }

 private:
  std::vector<Problem> problems_;
  std::vector<Transition> transitions_;
  std::vector<Rollout> rollouts_;
  DatasetMeta meta_;
  std::unordered_map<ProblemId, std::size_t> problem_pos_;
  std::vector<std::vector<std::size_t>> rollout_steps_;
  std::vector<std::ptrdiff_t> next_;
};

/// `k` full-horizon rollouts of one problem. Deterministic in `seed`.
OfflineDataset generate_rollouts(const Problem& problem, const NoisePolicy& policy, int k, std::uint64_t seed);

/// Rollouts for several problems, each seeded from (seed, problem position).
/// Rollout ids are unique across the whole corpus.
OfflineDataset generate_corpus(std::span<const Problem> problems, const NoisePolicy& policy, int k,
                               std::uint64_t seed);

/// `count` problems with ids derived from `seed`.
std::vector<Problem> generate_problem_set(std::uint64_t seed, int count, const ProblemShape& shape);

inline constexpr const char* kDatasetMagic = "#verifierq-dataset";
inline constexpr int kDatasetVersion = 1;

/// One header line `#verifierq-dataset v1 {meta}` followed by one JSON object
/// per transition with keys pid, prefix, act, r, term, rid, k.
void write_dataset(const OfflineDataset& ds, const std::filesystem::path& path);
void write_dataset(const OfflineDataset& ds, std::ostream& out);
OfflineDataset read_dataset(const std::filesystem::path& path);
OfflineDataset read_dataset(std::istream& in);

enum class BatchMode { transitions, by_rollout };

/// Transition indices into the dataset. In by_rollout mode `batch_size`
/// counts whole rollouts and `group_starts` marks where each one begins.
struct Batch {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> group_starts;
};

/// Uniform sampling with replacement.
Batch sample_batch(const OfflineDataset& ds, int batch_size, Rng& rng, BatchMode mode = BatchMode::transitions);

}  // namespace verifierq
