#include "verifierq/dataset.hpp"

#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "verifierq/error.hpp"

namespace verifierq {

using ordered_json = nlohmann::ordered_json;

OfflineDataset::OfflineDataset(std::vector<Problem> problems, std::vector<Transition> transitions, DatasetMeta meta)
    : problems_(std::move(problems)), transitions_(std::move(transitions)), meta_(std::move(meta)) {
  for (std::size_t i = 0; i < problems_.size(); ++i) {
    if (!problem_pos_.emplace(problems_[i].id(), i).second) {
      throw ParameterError("duplicate problem id in dataset");
    }
  }
  // Rollouts are listed in order of first appearance of their id.
  std::unordered_map<std::uint64_t, std::size_t> rollout_pos;
  next_.assign(transitions_.size(), -1);
  for (std::size_t i = 0; i < transitions_.size(); ++i) {
    const Transition& t = transitions_[i];
    if (!has_problem(t.state.problem)) {
      throw ParameterError("transition references unknown problem");
    }
    auto [it, inserted] = rollout_pos.emplace(t.rollout_id, rollout_steps_.size());
    if (inserted) {
      rollout_steps_.emplace_back();
      rollouts_.push_back(Rollout{t.rollout_id, t.state.problem, {}, 0, false});
    }
    auto& steps = rollout_steps_[it->second];
    if (!steps.empty()) {
      const Transition& prev = transitions_[steps.back()];
      if (prev.step_index + 1 == t.step_index && prev.next_state == t.state) {
        next_[steps.back()] = static_cast<std::ptrdiff_t>(i);
      }
    }
    steps.push_back(i);
  }
  for (std::size_t r = 0; r < rollouts_.size(); ++r) {
    const Transition& last = transitions_[rollout_steps_[r].back()];
    Rollout& ro = rollouts_[r];
    ro.chain = last.next_state.prefix;
    const Problem& p = problem(ro.problem);
    ro.final_answer = p.answer_of(ro.chain);
    ro.answer_correct = ro.final_answer == p.correct_answer();
  }
}

const Problem& OfflineDataset::problem(ProblemId id) const {
  auto it = problem_pos_.find(id);
  if (it == problem_pos_.end()) {
    throw ContractError("unknown problem id " + std::to_string(id));
  }
  return problems_[it->second];
}

double OfflineDataset::fully_correct_fraction() const {
  if (rollouts_.empty()) {
    return 0.0;
  }
  std::size_t ok = 0;
  for (const Rollout& r : rollouts_) {
    const Problem& p = problem(r.problem);
    ok += (r.chain == p.correct_chain()) ? 1 : 0;
  }
  return static_cast<double>(ok) / static_cast<double>(rollouts_.size());
}

namespace {

ActionIndex sample_step(const Problem& p, std::size_t pos, double epsilon, Rng& rng) {
  const ActionIndex correct = p.correct_chain()[pos];
  if (!rng.bernoulli(epsilon)) {
    return correct;
  }
  auto wrong = static_cast<ActionIndex>(rng.index(static_cast<std::uint64_t>(p.vocab_size() - 1)));
  return wrong >= correct ? wrong + 1 : wrong;
}

std::size_t count_wrong(const Problem& p, const std::vector<ActionIndex>& chain) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    n += chain[i] != p.correct_chain()[i] ? 1 : 0;
  }
  return n;
}

// Enforces "every rollout has a mistake" and "every correct step appears".
// Returns false when the second half cannot be met.
bool apply_stitching(const Problem& p, std::vector<std::vector<ActionIndex>>& chains, Rng& rng) {
  const auto horizon = static_cast<std::size_t>(p.horizon());
  for (auto& chain : chains) {
    if (count_wrong(p, chain) == 0) {
      const auto pos = static_cast<std::size_t>(rng.index(horizon));
      const ActionIndex c = p.correct_chain()[pos];
      auto w = static_cast<ActionIndex>(rng.index(static_cast<std::uint64_t>(p.vocab_size() - 1)));
      chain[pos] = w >= c ? w + 1 : w;
    }
  }
  bool held = true;
  for (std::size_t pos = 0; pos < horizon; ++pos) {
    const ActionIndex c = p.correct_chain()[pos];
    bool covered = false;
    for (const auto& chain : chains) {
      covered = covered || chain[pos] == c;
    }
    if (covered) {
      continue;
    }
    const auto start = static_cast<std::size_t>(rng.index(chains.size()));
    bool fixed = false;
    for (std::size_t j = 0; j < chains.size() && !fixed; ++j) {
      auto& chain = chains[(start + j) % chains.size()];
      if (count_wrong(p, chain) >= 2) {
        chain[pos] = c;
        fixed = true;
      }
    }
    held = held && fixed;
  }
  return held;
}

void append_rollout(const Problem& p, const std::vector<ActionIndex>& chain, std::uint64_t rid,
                    std::vector<Transition>& out) {
  State s = root_state(p);
  for (std::size_t i = 0; i < chain.size(); ++i) {
    Transition t;
    t.state = s;
    t.action = chain[i];
    t.reward = step_reward(p, s, chain[i]);
    t.next_state = transition(p, s, chain[i]);
    t.terminal = is_terminal(p, t.next_state);
    t.rollout_id = rid;
    t.step_index = static_cast<int>(i);
    s = t.next_state;
    out.push_back(std::move(t));
  }
}

struct ProblemRollouts {
  std::vector<std::vector<ActionIndex>> chains;
  bool stitch_held = true;
};

ProblemRollouts sample_chains(const Problem& p, const NoisePolicy& policy, int k, std::uint64_t seed) {
  Rng rng(seed);
  ProblemRollouts out;
  out.chains.reserve(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    std::vector<ActionIndex> chain(static_cast<std::size_t>(p.horizon()));
    for (std::size_t pos = 0; pos < chain.size(); ++pos) {
      chain[pos] = sample_step(p, pos, policy.epsilon, rng);
    }
    out.chains.push_back(std::move(chain));
  }
  if (policy.stitch_mode) {
    out.stitch_held = apply_stitching(p, out.chains, rng);
  }
  return out;
}

void validate_policy(const NoisePolicy& policy, int k) {
  if (k < 1) {
    throw ParameterError("rollout count k must be >= 1");
  }
  if (!(policy.epsilon >= 0.0 && policy.epsilon <= 1.0)) {
    throw ParameterError("epsilon must lie in [0, 1]");
  }
}

}  // namespace

OfflineDataset generate_rollouts(const Problem& problem, const NoisePolicy& policy, int k, std::uint64_t seed) {
  return generate_corpus(std::span<const Problem>(&problem, 1), policy, k, seed);
}

OfflineDataset generate_corpus(std::span<const Problem> problems, const NoisePolicy& policy, int k,
                               std::uint64_t seed) {
  validate_policy(policy, k);
  DatasetMeta meta;
  meta.seed = seed;
  meta.policy = policy;
  meta.rollouts_per_problem = k;
  std::vector<Transition> transitions;
  std::uint64_t rid = 0;
  std::size_t failed = 0;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    const Problem& p = problems[i];
    auto r = sample_chains(p, policy, k, problems.size() == 1 ? seed : derive_seed(seed, i));
    failed += r.stitch_held ? 0 : 1;
    for (const auto& chain : r.chains) {
      append_rollout(p, chain, rid++, transitions);
    }
  }
  if (policy.stitch_mode) {
    meta.stitch_guarantee_held = failed == 0;
    if (failed > 0) {
      meta.warnings.push_back("stitching guarantee not met for " + std::to_string(failed) + " of " +
                              std::to_string(problems.size()) + " problems");
    }
  }
  return OfflineDataset(std::vector<Problem>(problems.begin(), problems.end()), std::move(transitions),
                        std::move(meta));
}

std::vector<Problem> generate_problem_set(std::uint64_t seed, int count, const ProblemShape& shape) {
  std::vector<Problem> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(generate_problem(derive_seed(seed, 0x736574ULL, i), shape));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

ordered_json meta_to_json(const OfflineDataset& ds) {
  const DatasetMeta& m = ds.meta();
  ordered_json j;
  j["seed"] = m.seed;
  j["epsilon"] = m.policy.epsilon;
  j["stitch_mode"] = m.policy.stitch_mode;
  j["k"] = m.rollouts_per_problem;
  j["stitch_guarantee_held"] = m.stitch_guarantee_held;
  j["warnings"] = m.warnings;
  ordered_json problems = ordered_json::array();
  for (const Problem& p : ds.problems()) {
    const ProblemShape& s = p.shape();
    problems.push_back(ordered_json{{"id", p.id()},
                                    {"horizon", s.horizon},
                                    {"vocab", s.vocab_size},
                                    {"subvocab", s.subvocab},
                                    {"step_len", s.step_len},
                                    {"recovery_prob", s.recovery_prob},
                                    {"chain", p.correct_chain()}});
  }
  j["problems"] = std::move(problems);
  return j;
}

}  // namespace

void write_dataset(const OfflineDataset& ds, std::ostream& out) {
  out << kDatasetMagic << " v" << kDatasetVersion << ' ' << meta_to_json(ds).dump() << '\n';
  for (const Transition& t : ds.transitions()) {
    ordered_json j;
    j["pid"] = t.state.problem;
    j["prefix"] = t.state.prefix;
    j["act"] = t.action;
    j["r"] = t.reward.is_correct() ? 1 : 0;
    j["term"] = t.terminal;
    j["rid"] = t.rollout_id;
    j["k"] = t.step_index;
    out << j.dump() << '\n';
  }
}

void write_dataset(const OfflineDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot open " + path.string() + " for writing");
  }
  write_dataset(ds, out);
  if (!out) {
    throw Error("write failed for " + path.string());
  }
}

OfflineDataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) {
    throw FormatError("empty dataset file: missing header");
  }
  const std::string magic = kDatasetMagic;
  if (line.rfind(magic + " ", 0) != 0) {
    throw FormatError("not a verifierq dataset (bad header)");
  }
  const auto vpos = magic.size() + 1;
  const auto space = line.find(' ', vpos);
  const std::string version = line.substr(vpos, space == std::string::npos ? std::string::npos : space - vpos);
  if (version != "v" + std::to_string(kDatasetVersion)) {
    throw FormatError("unsupported dataset version '" + version + "'");
  }
  if (space == std::string::npos) {
    throw ParseError(1, "header has no metadata");
  }

  DatasetMeta meta;
  std::vector<Problem> problems;
  try {
    const auto j = ordered_json::parse(line.substr(space + 1));
    meta.seed = j.at("seed").get<std::uint64_t>();
    meta.policy.epsilon = j.at("epsilon").get<double>();
    meta.policy.stitch_mode = j.at("stitch_mode").get<bool>();
    meta.rollouts_per_problem = j.at("k").get<int>();
    meta.stitch_guarantee_held = j.at("stitch_guarantee_held").get<bool>();
    meta.warnings = j.at("warnings").get<std::vector<std::string>>();
    for (const auto& pj : j.at("problems")) {
      ProblemShape s{pj.at("horizon").get<int>(), pj.at("vocab").get<int>(), pj.at("subvocab").get<int>(),
                     pj.at("step_len").get<int>(), pj.at("recovery_prob").get<double>()};
      problems.emplace_back(pj.at("id").get<ProblemId>(), s, pj.at("chain").get<std::vector<ActionIndex>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(1, std::string("bad header metadata: ") + e.what());
  } catch (const ParameterError& e) {
    throw ParseError(1, std::string("bad problem in header: ") + e.what());
  }

  std::unordered_map<ProblemId, const Problem*> by_id;
  for (const Problem& p : problems) {
    by_id[p.id()] = &p;
  }

  std::vector<Transition> transitions;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    const auto fail = [&](const std::string& what) {
      return ParseError(lineno, what + " (last good line " + std::to_string(lineno - 1) + ")");
    };
    Transition t;
    try {
      const auto j = ordered_json::parse(line);
      t.state.problem = j.at("pid").get<ProblemId>();
      t.state.prefix = j.at("prefix").get<std::vector<ActionIndex>>();
      t.action = j.at("act").get<ActionIndex>();
      t.reward = StepReward::from_value(j.at("r").get<double>());
      t.terminal = j.at("term").get<bool>();
      t.rollout_id = j.at("rid").get<std::uint64_t>();
      t.step_index = j.at("k").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("malformed record: ") + e.what());
    } catch (const ParameterError& e) {
      throw fail(e.what());
    }
    auto it = by_id.find(t.state.problem);
    if (it == by_id.end()) {
      throw fail("record references unknown problem");
    }
    const Problem& p = *it->second;
    try {
      t.next_state = transition(p, t.state, t.action);
      if (step_reward(p, t.state, t.action) != t.reward) {
        throw fail("reward inconsistent with problem dynamics");
      }
    } catch (const ContractError& e) {
      throw fail(e.what());
    }
    if (t.terminal != is_terminal(p, t.next_state)) {
      throw fail("terminal flag inconsistent with horizon");
    }
    transitions.push_back(std::move(t));
  }
  return OfflineDataset(std::move(problems), std::move(transitions), std::move(meta));
}

OfflineDataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open " + path.string());
  }
  return read_dataset(in);
}

// ---------------------------------------------------------------------------
// Sampling

Batch sample_batch(const OfflineDataset& ds, int batch_size, Rng& rng, BatchMode mode) {
  if (batch_size < 1) {
    throw ContractError("batch_size must be >= 1");
  }
  if (ds.empty()) {
    throw ContractError("cannot sample from an empty dataset");
  }
  Batch b;
  if (mode == BatchMode::transitions) {
    b.indices.reserve(static_cast<std::size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) {
      b.indices.push_back(static_cast<std::size_t>(rng.index(ds.size())));
    }
    b.group_starts.push_back(0);
    return b;
  }
  for (int i = 0; i < batch_size; ++i) {
    const auto r = static_cast<std::size_t>(rng.index(ds.rollouts().size()));
    b.group_starts.push_back(b.indices.size());
    const auto& steps = ds.rollout_steps(r);
    b.indices.insert(b.indices.end(), steps.begin(), steps.end());
  }
  return b;
}

}  // namespace verifierq
