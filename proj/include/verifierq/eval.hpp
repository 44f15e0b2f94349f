#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "verifierq/approximator.hpp"
#include "verifierq/dataset.hpp"
#include "verifierq/mdp.hpp"
#include "verifierq/rng.hpp"

namespace verifierq {

/// Scores the steps of a (possibly partial) chain from the root.
class Verifier {
 public:
  virtual ~Verifier() = default;
  virtual std::string name() const = 0;
  /// Element i scores chain[i] taken from the prefix chain[0..i).
  virtual std::vector<double> step_scores(const Problem& problem, std::span<const ActionIndex> chain) const = 0;
};

class QHeadVerifier final : public Verifier {
 public:
  QHeadVerifier(std::string name, QHead q) : name_(std::move(name)), q_(std::move(q)) {}
  std::string name() const override { return name_; }
  std::vector<double> step_scores(const Problem& problem, std::span<const ActionIndex> chain) const override;
  const QHead& head() const { return q_; }

 private:
  std::string name_;
  QHead q_;
};

/// Ground-truth step rewards.
class OracleVerifier final : public Verifier {
 public:
  std::string name() const override { return "oracle"; }
  std::vector<double> step_scores(const Problem& problem, std::span<const ActionIndex> chain) const override;
};

class ConstantVerifier final : public Verifier {
 public:
  explicit ConstantVerifier(double value = 0.5) : value_(value) {}
  std::string name() const override { return "constant"; }
  std::vector<double> step_scores(const Problem& problem, std::span<const ActionIndex> chain) const override;

 private:
  double value_;
};

/// Minimum step score of a full-horizon chain.
double score_solution(const Verifier& verifier, const Problem& problem, std::span<const ActionIndex> chain);

struct Candidate {
  std::vector<ActionIndex> chain;
  AnswerLabel final_answer = 0;
  bool answer_correct = false;

  bool operator==(const Candidate&) const = default;
};

struct CandidatePool {
  ProblemId problem_id = 0;
  std::vector<Candidate> candidates;

  std::size_t n_max() const { return candidates.size(); }
  double correct_rate() const;
  bool operator==(const CandidatePool&) const = default;
};

/// `size` generator samples for `problem`; use seeds disjoint from training data.
CandidatePool generate_pool(const Problem& problem, const NoisePolicy& policy, int size, std::uint64_t seed);
/// One pool per problem, seeded from (seed, problem position).
std::vector<CandidatePool> generate_pools(std::span<const Problem> problems, const NoisePolicy& policy, int size,
                                          std::uint64_t seed);

/// Pool positions of a uniform size-`n` subsample in ascending order.
/// `n == pool_size` returns the identity without consuming randomness.
std::vector<std::size_t> subsample(std::size_t pool_size, std::size_t n, Rng& rng);

/// Pool index of the highest-scoring candidate in a size-`n` subsample.
/// Ties go to the lowest pool index.
std::size_t best_of_n(const Verifier& verifier, const Problem& problem, const CandidatePool& pool, std::size_t n,
                      Rng& rng);

/// Most frequent final answer in a size-`n` subsample. Ties go to the answer
/// occurring first in pool order.
AnswerLabel majority_vote(const CandidatePool& pool, std::size_t n, Rng& rng);

struct CurvePoint {
  std::size_t n = 0;
  double accuracy = 0.0;
  /// Standard error of the mean over problems of per-problem accuracy.
  double std_error = 0.0;

  bool operator==(const CurvePoint&) const = default;
};

struct EvalCurve {
  std::string method;
  std::vector<CurvePoint> points;
  std::uint64_t seed = 0;
  int trials = 0;
  /// How subsamples are drawn.
  std::string scheme = "uniform-without-replacement";

  bool operator==(const EvalCurve&) const = default;
};

/// Subsample seeds are derive_seed(seed, problem id, n, trial), so problems
/// can be evaluated in any order. Pools are matched to problems by id.
EvalCurve accuracy_curve(const Verifier& verifier, std::span<const Problem> problems,
                         std::span<const CandidatePool> pools, std::span<const std::size_t> ns, int trials,
                         std::uint64_t seed);
EvalCurve majority_vote_curve(std::span<const CandidatePool> pools, std::span<const std::size_t> ns, int trials,
                              std::uint64_t seed);

/// Header `method,N,accuracy,stderr`, curves in the given order.
void write_curves_csv(std::ostream& out, std::span<const EvalCurve> curves);

struct ProbeRow {
  ProblemId problem = 0;
  std::size_t position = 0;
  ActionIndex original = 0;
  ActionIndex perturbed = 0;
  double a_original = 0.0;
  double a_perturbed = 0.0;
  double b_original = 0.0;
  double b_perturbed = 0.0;

  bool operator==(const ProbeRow&) const = default;
};

struct ProbeReport {
  std::string name_a;
  std::string name_b;
  std::vector<ProbeRow> rows;
  double a_original_mean = 0.0;
  double a_perturbed_mean = 0.0;
  double b_original_mean = 0.0;
  double b_perturbed_mean = 0.0;

  bool operator==(const ProbeReport&) const = default;
};

/// Each problem is probed with probability `perturb_rate`: one uniformly
/// chosen step of its correct chain is replaced by a uniformly chosen wrong
/// action and both verifiers score that step and the original one.
ProbeReport overestimation_probe(const Verifier& a, const Verifier& b, std::span<const Problem> problems,
                                 double perturb_rate, std::uint64_t seed);

/// Header `problem,position,original,perturbed,<a>_original,<a>_perturbed,<b>_original,<b>_perturbed`.
void write_probe_csv(std::ostream& out, const ProbeReport& report);

/// Worker count: VERIFIERQ_THREADS if set and positive, else hardware concurrency.
unsigned worker_threads();

}  // namespace verifierq
