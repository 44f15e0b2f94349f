#include "verifierq/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <ostream>
#include <thread>
#include <unordered_map>

#include "verifierq/checkpoint.hpp"
#include "verifierq/error.hpp"

namespace verifierq {

std::vector<double> QHeadVerifier::step_scores(const Problem& problem, std::span<const ActionIndex> chain) const {
  return q_values_chain(q_, problem, chain);
}

std::vector<double> OracleVerifier::step_scores(const Problem& problem, std::span<const ActionIndex> chain) const {
  std::vector<double> out;
  out.reserve(chain.size());
  State s = root_state(problem);
  for (ActionIndex a : chain) {
    out.push_back(step_reward(problem, s, a).value());
    s = transition(problem, s, a);
  }
  return out;
}

std::vector<double> ConstantVerifier::step_scores(const Problem&, std::span<const ActionIndex> chain) const {
  return std::vector<double>(chain.size(), value_);
}

double score_solution(const Verifier& verifier, const Problem& problem, std::span<const ActionIndex> chain) {
  if (chain.size() != static_cast<std::size_t>(problem.shape().horizon)) {
    throw ContractError("score_solution needs a full-horizon chain");
  }
  const auto scores = verifier.step_scores(problem, chain);
  return *std::min_element(scores.begin(), scores.end());
}

double CandidatePool::correct_rate() const {
  if (candidates.empty()) {
    return 0.0;
  }
  const auto hits = std::count_if(candidates.begin(), candidates.end(), [](const Candidate& c) {
    return c.answer_correct;
  });
  return static_cast<double>(hits) / static_cast<double>(candidates.size());
}

CandidatePool generate_pool(const Problem& problem, const NoisePolicy& policy, int size, std::uint64_t seed) {
  if (size < 1) {
    throw ParameterError("pool size must be >= 1");
  }
  const OfflineDataset ds = generate_rollouts(problem, policy, size, seed);
  CandidatePool pool;
  pool.problem_id = problem.id();
  pool.candidates.reserve(ds.rollouts().size());
  for (const Rollout& r : ds.rollouts()) {
    pool.candidates.push_back(Candidate{r.chain, r.final_answer, r.answer_correct});
  }
  return pool;
}

std::vector<CandidatePool> generate_pools(std::span<const Problem> problems, const NoisePolicy& policy, int size,
                                          std::uint64_t seed) {
  std::vector<CandidatePool> out;
  out.reserve(problems.size());
  for (std::size_t i = 0; i < problems.size(); ++i) {
    out.push_back(generate_pool(problems[i], policy, size, derive_seed(seed, 0x706f6f6cULL, i)));
  }
  return out;
}

std::vector<std::size_t> subsample(std::size_t pool_size, std::size_t n, Rng& rng) {
  if (n < 1 || n > pool_size) {
    throw ContractError("subsample size " + std::to_string(n) + " outside [1, " + std::to_string(pool_size) + "]");
  }
  std::vector<std::size_t> order(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) {
    order[i] = i;
  }
  if (n == pool_size) {
    return order;
  }
  // Partial Fisher-Yates: the first n slots are a uniform n-subset.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.index(pool_size - i));
    std::swap(order[i], order[j]);
  }
  order.resize(n);
  std::sort(order.begin(), order.end());
  return order;
}

namespace {

std::size_t argmax_lowest(std::span<const std::size_t> picks, std::span<const double> scores) {
  std::size_t best = picks[0];
  for (std::size_t idx : picks) {
    if (scores[idx] > scores[best]) {
      best = idx;
    }
  }
  return best;
}

AnswerLabel vote(const CandidatePool& pool, std::span<const std::size_t> picks) {
  // picks are ascending, so the first occurrence order is pool order.
  std::vector<std::pair<AnswerLabel, int>> counts;
  for (std::size_t idx : picks) {
    const AnswerLabel a = pool.candidates[idx].final_answer;
    auto it = std::find_if(counts.begin(), counts.end(), [a](const auto& c) { return c.first == a; });
    if (it == counts.end()) {
      counts.emplace_back(a, 1);
    } else {
      ++it->second;
    }
  }
  auto best = counts.begin();
  for (auto it = counts.begin(); it != counts.end(); ++it) {
    if (it->second > best->second) {
      best = it;
    }
  }
  return best->first;
}

bool answer_is_correct(const CandidatePool& pool, AnswerLabel a) {
  for (const Candidate& c : pool.candidates) {
    if (c.final_answer == a) {
      return c.answer_correct;
    }
  }
  return false;
}

template <class Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const unsigned workers = std::min<unsigned>(worker_threads(), static_cast<unsigned>(std::max<std::size_t>(count, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) {
      fn(i);
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < count && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) {
            failure = std::current_exception();
          }
        }
      }
    });
  }
  for (auto& t : threads) {
    t.join();
  }
  if (failure) {
    std::rethrow_exception(failure);
  }
}

void check_ns(std::span<const CandidatePool> pools, std::span<const std::size_t> ns, int trials) {
  if (trials < 1) {
    throw ParameterError("trials must be >= 1");
  }
  for (std::size_t i = 0; i < ns.size(); ++i) {
    if (i > 0 && ns[i] <= ns[i - 1]) {
      throw ParameterError("N values must be strictly increasing");
    }
    for (const CandidatePool& p : pools) {
      if (ns[i] < 1 || ns[i] > p.n_max()) {
        throw ContractError("N=" + std::to_string(ns[i]) + " outside pool of size " + std::to_string(p.n_max()));
      }
    }
  }
}

/// hits[problem][n] = fraction of trials whose selection was correct.
template <class Select>
EvalCurve reduce_curve(std::string method, std::span<const CandidatePool> pools, std::span<const std::size_t> ns,
                       int trials, std::uint64_t seed, Select&& select) {
  std::vector<std::vector<double>> hits(pools.size(), std::vector<double>(ns.size(), 0.0));
  parallel_for(pools.size(), [&](std::size_t p) { select(p, hits[p]); });
  EvalCurve curve;
  curve.method = std::move(method);
  curve.seed = seed;
  curve.trials = trials;
  const double count = static_cast<double>(pools.size());
  for (std::size_t j = 0; j < ns.size(); ++j) {
    double sum = 0.0;
    for (std::size_t p = 0; p < pools.size(); ++p) {
      sum += hits[p][j];
    }
    const double mean = count > 0 ? sum / count : 0.0;
    double sq = 0.0;
    for (std::size_t p = 0; p < pools.size(); ++p) {
      sq += (hits[p][j] - mean) * (hits[p][j] - mean);
    }
    const double se = count > 1 ? std::sqrt(sq / (count - 1.0) / count) : 0.0;
    curve.points.push_back(CurvePoint{ns[j], mean, se});
  }
  return curve;
}

}  // namespace

std::size_t best_of_n(const Verifier& verifier, const Problem& problem, const CandidatePool& pool, std::size_t n,
                      Rng& rng) {
  const auto picks = subsample(pool.n_max(), n, rng);
  std::vector<double> scores(pool.n_max(), 0.0);
  for (std::size_t idx : picks) {
    scores[idx] = score_solution(verifier, problem, pool.candidates[idx].chain);
  }
  return argmax_lowest(picks, scores);
}

AnswerLabel majority_vote(const CandidatePool& pool, std::size_t n, Rng& rng) {
  const auto picks = subsample(pool.n_max(), n, rng);
  return vote(pool, picks);
}

EvalCurve accuracy_curve(const Verifier& verifier, std::span<const Problem> problems,
                         std::span<const CandidatePool> pools, std::span<const std::size_t> ns, int trials,
                         std::uint64_t seed) {
  check_ns(pools, ns, trials);
  std::unordered_map<ProblemId, const Problem*> by_id;
  for (const Problem& p : problems) {
    by_id.emplace(p.id(), &p);
  }
  for (const CandidatePool& pool : pools) {
    if (!by_id.contains(pool.problem_id)) {
      throw ContractError("no problem for pool " + std::to_string(pool.problem_id));
    }
  }
  return reduce_curve(verifier.name(), pools, ns, trials, seed, [&](std::size_t p, std::vector<double>& hits) {
    const CandidatePool& pool = pools[p];
    const Problem& problem = *by_id.at(pool.problem_id);
    // Every candidate is scored once; subsamples only select among them.
    std::vector<double> scores;
    scores.reserve(pool.n_max());
    for (const Candidate& c : pool.candidates) {
      scores.push_back(score_solution(verifier, problem, c.chain));
    }
    for (std::size_t j = 0; j < ns.size(); ++j) {
      int correct = 0;
      for (int t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, pool.problem_id, ns[j], t));
        const auto picks = subsample(pool.n_max(), ns[j], rng);
        correct += pool.candidates[argmax_lowest(picks, scores)].answer_correct ? 1 : 0;
      }
      hits[j] = static_cast<double>(correct) / static_cast<double>(trials);
    }
  });
}

EvalCurve majority_vote_curve(std::span<const CandidatePool> pools, std::span<const std::size_t> ns, int trials,
                              std::uint64_t seed) {
  check_ns(pools, ns, trials);
  return reduce_curve("majority", pools, ns, trials, seed, [&](std::size_t p, std::vector<double>& hits) {
    const CandidatePool& pool = pools[p];
    for (std::size_t j = 0; j < ns.size(); ++j) {
      int correct = 0;
      for (int t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, pool.problem_id, ns[j], t));
        correct += answer_is_correct(pool, majority_vote(pool, ns[j], rng)) ? 1 : 0;
      }
      hits[j] = static_cast<double>(correct) / static_cast<double>(trials);
    }
  });
}

void write_curves_csv(std::ostream& out, std::span<const EvalCurve> curves) {
  out << "method,N,accuracy,stderr\n";
  for (const EvalCurve& c : curves) {
    for (const CurvePoint& p : c.points) {
      out << c.method << ',' << p.n << ',' << format_double(p.accuracy) << ',' << format_double(p.std_error) << '\n';
    }
  }
}

ProbeReport overestimation_probe(const Verifier& a, const Verifier& b, std::span<const Problem> problems,
                                 double perturb_rate, std::uint64_t seed) {
  if (!(perturb_rate > 0.0 && perturb_rate <= 1.0)) {
    throw ParameterError("perturb_rate must lie in (0, 1]");
  }
  ProbeReport report;
  report.name_a = a.name();
  report.name_b = b.name();
  for (const Problem& p : problems) {
    Rng rng(derive_seed(seed, 0x70726f6265ULL, p.id()));
    if (perturb_rate < 1.0 && !rng.bernoulli(perturb_rate)) {
      continue;
    }
    const auto& chain = p.correct_chain();
    const std::size_t vocab = static_cast<std::size_t>(p.shape().vocab_size);
    if (chain.empty() || vocab < 2) {
      continue;
    }
    ProbeRow row;
    row.problem = p.id();
    row.position = static_cast<std::size_t>(rng.index(chain.size()));
    row.original = chain[row.position];
    // Uniform over the vocab_size - 1 wrong actions.
    const auto w = static_cast<ActionIndex>(rng.index(vocab - 1));
    row.perturbed = w >= row.original ? w + 1 : w;
    std::vector<ActionIndex> prefix(chain.begin(), chain.begin() + static_cast<std::ptrdiff_t>(row.position) + 1);
    row.a_original = a.step_scores(p, prefix).back();
    row.b_original = b.step_scores(p, prefix).back();
    prefix.back() = row.perturbed;
    row.a_perturbed = a.step_scores(p, prefix).back();
    row.b_perturbed = b.step_scores(p, prefix).back();
    report.rows.push_back(row);
  }
  if (!report.rows.empty()) {
    const double n = static_cast<double>(report.rows.size());
    for (const ProbeRow& r : report.rows) {
      report.a_original_mean += r.a_original;
      report.a_perturbed_mean += r.a_perturbed;
      report.b_original_mean += r.b_original;
      report.b_perturbed_mean += r.b_perturbed;
    }
    report.a_original_mean /= n;
    report.a_perturbed_mean /= n;
    report.b_original_mean /= n;
    report.b_perturbed_mean /= n;
  }
  return report;
}

void write_probe_csv(std::ostream& out, const ProbeReport& report) {
  const std::string& a = report.name_a;
  const std::string& b = report.name_b;
  out << "problem,position,original,perturbed," << a << "_original," << a << "_perturbed," << b << "_original," << b
      << "_perturbed\n";
  for (const ProbeRow& r : report.rows) {
    out << r.problem << ',' << r.position << ',' << r.original << ',' << r.perturbed << ','
        << format_double(r.a_original) << ',' << format_double(r.a_perturbed) << ',' << format_double(r.b_original)
        << ',' << format_double(r.b_perturbed) << '\n';
  }
}

unsigned worker_threads() {
  if (const char* env = std::getenv("VERIFIERQ_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) {
      return static_cast<unsigned>(v);
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace verifierq
