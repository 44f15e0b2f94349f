#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <map>
#include <sstream>

#include "test_support.hpp"
#include "verifierq/error.hpp"
#include "verifierq/eval.hpp"

using namespace verifierq;

namespace {

/// Scores whole chains by lookup; each step gets the chain's score.
class LookupVerifier final : public Verifier {
 public:
  std::map<std::vector<ActionIndex>, std::vector<double>> table;
  std::string name() const override { return "lookup"; }
  std::vector<double> step_scores(const Problem&, std::span<const ActionIndex> chain) const override {
    return table.at(std::vector<ActionIndex>(chain.begin(), chain.end()));
  }
};

const ProblemShape kShape{3, 4, 4, 1, 0.0};

std::vector<Problem> problems(std::uint64_t seed, int count, const ProblemShape& shape = kShape) {
  return generate_problem_set(seed, count, shape);
}

bool fully_correct(const Problem& p, const Candidate& c) { return c.chain == p.correct_chain(); }

/// Pool of labelled candidates with distinct dummy chains.
CandidatePool labelled_pool(ProblemId id, std::span<const AnswerLabel> labels, AnswerLabel correct) {
  CandidatePool pool;
  pool.problem_id = id;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    pool.candidates.push_back(Candidate{{static_cast<ActionIndex>(i)}, labels[i], labels[i] == correct});
  }
  return pool;
}

/// P(X >= need) for X ~ Hypergeometric(population, successes, draws).
double hypergeometric_tail(int population, int successes, int draws, int need) {
  auto log_choose = [](int n, int k) { return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0); };
  double total = 0.0;
  for (int x = need; x <= std::min(successes, draws); ++x) {
    if (draws - x > population - successes) {
      continue;
    }
    total += std::exp(log_choose(successes, x) + log_choose(population - successes, draws - x) -
                      log_choose(population, draws));
  }
  return total;
}

}  // namespace

TEST_CASE("score_solution takes the minimum step score") {
  const Problem p = generate_problem(1, kShape);
  LookupVerifier v;
  v.table[{0, 1, 2}] = {0.9, 0.8, 0.95};
  v.table[{1, 1, 2}] = {0.9, 0.0, 0.95};
  CHECK(score_solution(v, p, std::vector<ActionIndex>{0, 1, 2}) == 0.8);
  CHECK(score_solution(v, p, std::vector<ActionIndex>{1, 1, 2}) == 0.0);
  CHECK_THROWS_AS(score_solution(v, p, std::vector<ActionIndex>{0, 1}), ContractError);

  const Problem single = generate_problem(2, ProblemShape{1, 3, 3, 1, 0.0});
  const std::vector<ActionIndex> chain{single.correct_chain()[0]};
  Rng rng(4);
  auto q = QHead::mlp(FeatureSpec{1, 3, 16, 9}, MlpShape{}, 7);
  verifierq::testing::randomize(q.params(), rng, 1.0);
  const QHeadVerifier qv("q", q);
  CHECK(score_solution(qv, single, chain) == q_value(q, single, root_state(single), chain[0]));
}

TEST_CASE("chain scoring equals the stepwise loop") {
  const auto ps = problems(3, 5, ProblemShape{5, 4, 4, 1, 0.0});
  const auto pools = generate_pools(ps, NoisePolicy{0.5, false}, 8, 11);
  Rng rng(5);
  auto q = QHead::mlp(FeatureSpec{5, 4, 16, 2}, MlpShape{}, 3);
  verifierq::testing::randomize(q.params(), rng, 1.0);
  const QHeadVerifier v("q", q);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (const Candidate& c : pools[i].candidates) {
      double loop = 1.0;
      State s = root_state(ps[i]);
      for (ActionIndex a : c.chain) {
        loop = std::min(loop, q_value(q, ps[i], s, a));
        s = transition(ps[i], s, a);
      }
      CHECK(score_solution(v, ps[i], c.chain) == loop);
    }
  }
}

TEST_CASE("pools come from the generator") {
  const auto ps = problems(4, 6);
  const auto pools = generate_pools(ps, NoisePolicy{0.4, false}, 16, 21);
  REQUIRE(pools.size() == ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    CHECK(pools[i].problem_id == ps[i].id());
    CHECK(pools[i].n_max() == 16);
    for (const Candidate& c : pools[i].candidates) {
      CHECK(c.chain.size() == 3);
      CHECK(c.final_answer == ps[i].answer_of(c.chain));
      CHECK(c.answer_correct == (c.final_answer == ps[i].correct_answer()));
    }
  }
  CHECK(generate_pools(ps, NoisePolicy{0.4, false}, 16, 21) == pools);
  CHECK_THROWS_AS(generate_pool(ps[0], NoisePolicy{}, 0, 1), ParameterError);
}

TEST_CASE("subsample is a sorted uniform subset") {
  Rng rng(8);
  std::vector<int> freq(10, 0);
  for (int t = 0; t < 20000; ++t) {
    const auto s = subsample(10, 3, rng);
    REQUIRE(s.size() == 3);
    CHECK(std::is_sorted(s.begin(), s.end()));
    CHECK(std::adjacent_find(s.begin(), s.end()) == s.end());
    for (auto i : s) {
      ++freq[i];
    }
  }
  for (int f : freq) {
    CHECK(std::abs(f - 6000) < 400);
  }
  Rng a(1);
  const Rng before = a;
  CHECK(subsample(7, 7, a) == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6});
  CHECK(a == before);
  CHECK_THROWS_AS(subsample(7, 0, a), ContractError);
  CHECK_THROWS_AS(subsample(7, 8, a), ContractError);
}

TEST_CASE("best_of_n selection rules") {
  const Problem p = generate_problem(1, kShape);
  CandidatePool pool;
  pool.problem_id = p.id();
  LookupVerifier v;
  for (ActionIndex i = 0; i < 10; ++i) {
    std::vector<ActionIndex> chain{i % 4, i / 4, 0};
    pool.candidates.push_back(Candidate{chain, 0, false});
    v.table[chain] = std::vector<double>(3, (i == 3 || i == 7) ? 0.9 : 0.1 * (i % 3));
  }
  Rng rng(1);
  CHECK(best_of_n(v, p, pool, 10, rng) == 3);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng a(seed);
    Rng b(seed);
    CHECK(best_of_n(v, p, pool, 1, a) == subsample(10, 1, b)[0]);
  }
  Rng c(2);
  CHECK_THROWS_AS(best_of_n(v, p, pool, 0, c), ContractError);
  CHECK_THROWS_AS(best_of_n(v, p, pool, 11, c), ContractError);

  // N = N_max uses no randomness.
  Rng d(3);
  Rng e(99);
  CHECK(best_of_n(v, p, pool, 10, d) == best_of_n(v, p, pool, 10, e));
}

TEST_CASE("oracle verifier picks a correct chain when one is sampled") {
  const auto ps = problems(5, 30);
  const auto pools = generate_pools(ps, NoisePolicy{0.5, false}, 12, 3);
  const OracleVerifier oracle;
  int checked = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (std::uint64_t t = 0; t < 10; ++t) {
      Rng a(t);
      Rng b(t);
      const auto picks = subsample(12, 4, b);
      const bool any = std::any_of(picks.begin(), picks.end(),
                                   [&](std::size_t k) { return fully_correct(ps[i], pools[i].candidates[k]); });
      const auto chosen = best_of_n(oracle, ps[i], pools[i], 4, a);
      if (any) {
        ++checked;
        CHECK(fully_correct(ps[i], pools[i].candidates[chosen]));
        CHECK(pools[i].candidates[chosen].answer_correct);
      }
    }
  }
  CHECK(checked > 20);
}

TEST_CASE("majority_vote rules") {
  Rng rng(1);
  const std::vector<AnswerLabel> aab{0, 0, 1};
  CHECK(majority_vote(labelled_pool(1, aab, 0), 3, rng) == 0);
  const std::vector<AnswerLabel> distinct{5, 2, 9, 1};
  CHECK(majority_vote(labelled_pool(1, distinct, 0), 4, rng) == 5);
  const std::vector<AnswerLabel> tie{7, 3, 3, 7};
  CHECK(majority_vote(labelled_pool(1, tie, 0), 4, rng) == 7);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng a(seed);
    Rng b(seed);
    CHECK(majority_vote(labelled_pool(1, distinct, 0), 1, a) == distinct[subsample(4, 1, b)[0]]);
  }
  CHECK_THROWS_AS(majority_vote(labelled_pool(1, aab, 0), 4, rng), ContractError);
}

TEST_CASE("perfect verifier at N_max is always right") {
  const auto ps = problems(6, 40);
  auto pools = generate_pools(ps, NoisePolicy{0.4, false}, 16, 5);
  std::vector<Problem> kept;
  std::vector<CandidatePool> kept_pools;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (std::any_of(pools[i].candidates.begin(), pools[i].candidates.end(),
                    [&](const Candidate& c) { return fully_correct(ps[i], c); })) {
      kept.push_back(ps[i]);
      kept_pools.push_back(pools[i]);
    }
  }
  REQUIRE(kept.size() > 10);
  const std::vector<std::size_t> ns{16};
  const auto curve = accuracy_curve(OracleVerifier{}, kept, kept_pools, ns, 3, 1);
  CHECK(curve.method == "oracle");
  CHECK(curve.points[0].accuracy == 1.0);
  CHECK(curve.points[0].std_error == 0.0);
}

TEST_CASE("constant verifier matches the base correct rate") {
  const auto ps = problems(7, 200);
  const auto pools = generate_pools(ps, NoisePolicy{0.3, false}, 16, 9);
  double base = 0.0;
  for (const auto& pool : pools) {
    base += pool.correct_rate();
  }
  base /= static_cast<double>(pools.size());
  const std::vector<std::size_t> ns{1, 4};
  const auto curve = accuracy_curve(ConstantVerifier{0.5}, ps, pools, ns, 50, 77);
  for (const auto& pt : curve.points) {
    MESSAGE("N=" << pt.n << " accuracy " << pt.accuracy << " base " << base);
    CHECK(std::abs(pt.accuracy - base) <= 0.03);
  }
}

TEST_CASE("majority vote with a 60 percent correct pool") {
  std::vector<CandidatePool> spread;
  std::vector<CandidatePool> single;
  Rng rng(11);
  for (ProblemId id = 0; id < 100; ++id) {
    std::vector<AnswerLabel> a;
    std::vector<AnswerLabel> b;
    for (int i = 0; i < 100; ++i) {
      const bool ok = i < 60;
      a.push_back(ok ? 0 : static_cast<AnswerLabel>(1 + rng.index(4)));
      b.push_back(ok ? 0 : 1);
    }
    // Positions shuffled so ties are not biased by construction order.
    for (std::size_t i = a.size() - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(rng.index(i + 1));
      std::swap(a[i], a[j]);
      std::swap(b[i], b[j]);
    }
    spread.push_back(labelled_pool(id, a, 0));
    single.push_back(labelled_pool(id, b, 0));
  }
  const std::vector<std::size_t> ns{1, 5, 33};
  const auto s = majority_vote_curve(spread, ns, 50, 3);
  CHECK(s.method == "majority");
  CHECK(std::abs(s.points[0].accuracy - 0.6) <= 0.03);
  CHECK(s.points[2].accuracy >= 0.95);
  CHECK(s.points[1].accuracy < s.points[2].accuracy);

  // Two labels only: the exact hypergeometric tail is the oracle.
  const auto t = majority_vote_curve(single, ns, 50, 3);
  const double expected = hypergeometric_tail(100, 60, 33, 17);
  MESSAGE("two-label N=33 accuracy " << t.points[2].accuracy << " oracle " << expected);
  CHECK(std::abs(t.points[2].accuracy - expected) <= 0.03);
}

TEST_CASE("accuracy falls as the generator gets noisier") {
  const auto ps = problems(8, 150, ProblemShape{4, 4, 4, 1, 0.0});
  const std::vector<std::size_t> ns{4};
  std::vector<double> oracle_acc;
  std::vector<double> vote_acc;
  for (double eps : {0.1, 0.2, 0.3, 0.4, 0.5}) {
    const auto pools = generate_pools(ps, NoisePolicy{eps, false}, 16, 13);
    oracle_acc.push_back(accuracy_curve(OracleVerifier{}, ps, pools, ns, 10, 1).points[0].accuracy);
    vote_acc.push_back(majority_vote_curve(pools, ns, 10, 1).points[0].accuracy);
  }
  for (const auto* acc : {&oracle_acc, &vote_acc}) {
    int decreasing = 0;
    for (std::size_t i = 0; i + 1 < acc->size(); ++i) {
      decreasing += (*acc)[i + 1] < (*acc)[i] ? 1 : 0;
    }
    decreasing += acc->back() < acc->front() ? 1 : 0;
    CHECK(decreasing >= 4);
  }
}

TEST_CASE("curves do not depend on the thread count") {
  const auto ps = problems(9, 40);
  const auto pools = generate_pools(ps, NoisePolicy{0.5, false}, 16, 2);
  const std::vector<std::size_t> ns{1, 2, 4, 8, 16};
  setenv("VERIFIERQ_THREADS", "1", 1);
  CHECK(worker_threads() == 1);
  const auto one = accuracy_curve(OracleVerifier{}, ps, pools, ns, 5, 4);
  const auto vote_one = majority_vote_curve(pools, ns, 5, 4);
  setenv("VERIFIERQ_THREADS", "4", 1);
  CHECK(worker_threads() == 4);
  CHECK(accuracy_curve(OracleVerifier{}, ps, pools, ns, 5, 4) == one);
  CHECK(majority_vote_curve(pools, ns, 5, 4) == vote_one);
  unsetenv("VERIFIERQ_THREADS");

  const std::vector<std::size_t> bad{4, 2};
  CHECK_THROWS_AS(accuracy_curve(OracleVerifier{}, ps, pools, bad, 5, 4), ParameterError);
  const std::vector<std::size_t> big{17};
  CHECK_THROWS_AS(majority_vote_curve(pools, big, 5, 4), ContractError);
}

TEST_CASE("curve CSV") {
  EvalCurve c;
  c.method = "oracle";
  c.points = {{1, 0.5, 0.25}, {2, 1.0, 0.0}};
  std::ostringstream os;
  const std::vector<EvalCurve> cs{c};
  write_curves_csv(os, cs);
  CHECK(os.str() == "method,N,accuracy,stderr\noracle,1,0.5,0.25\noracle,2,1,0\n");
}

TEST_CASE("overestimation probe") {
  const auto ps = problems(10, 50);
  const OracleVerifier oracle;
  const ConstantVerifier half(0.5);
  const auto r = overestimation_probe(oracle, half, ps, 1.0, 3);
  REQUIRE(r.rows.size() == ps.size());
  for (const auto& row : r.rows) {
    CHECK(row.a_perturbed == 0.0);
    CHECK(row.a_original == 1.0);
    CHECK(row.b_perturbed == 0.5);
    CHECK(row.perturbed != row.original);
    CHECK(row.position < 3);
  }
  CHECK(r.a_perturbed_mean == 0.0);
  CHECK(r.b_original_mean == 0.5);

  const auto same = overestimation_probe(oracle, oracle, ps, 1.0, 3);
  for (const auto& row : same.rows) {
    CHECK(row.a_original == row.b_original);
    CHECK(row.a_perturbed == row.b_perturbed);
  }
  CHECK(same.a_perturbed_mean == same.b_perturbed_mean);
  CHECK(overestimation_probe(oracle, oracle, ps, 1.0, 3) == same);

  const auto part = overestimation_probe(oracle, half, ps, 0.5, 3);
  CHECK(part.rows.size() > 10);
  CHECK(part.rows.size() < 40);
  CHECK_THROWS_AS(overestimation_probe(oracle, half, ps, 0.0, 3), ParameterError);
  CHECK_THROWS_AS(overestimation_probe(oracle, half, ps, 1.5, 3), ParameterError);

  std::ostringstream os;
  write_probe_csv(os, r);
  CHECK(os.str().rfind("problem,position,original,perturbed,oracle_original,oracle_perturbed,constant_original,"
                       "constant_perturbed\n",
                       0) == 0);
}
