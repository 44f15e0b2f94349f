#include "verifierq/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "verifierq/checkpoint.hpp"
#include "verifierq/dataset.hpp"
#include "verifierq/error.hpp"
#include "verifierq/eval.hpp"
#include "verifierq/oracle.hpp"
#include "verifierq/trainer.hpp"

namespace verifierq::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

/// Window of the trailing mean in plot data.
constexpr std::size_t kPlotWindow = 20;

struct Common {
  std::string out_dir = ".";
  std::string config;
  bool emit_plot_data = false;

  fs::path resolve(const std::string& p) const { return fs::path(out_dir) / p; }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--out-dir", c.out_dir, "Directory for outputs; relative inputs resolve against it")
      ->capture_default_str();
  sub->add_option("--config", c.config, "key=value file; command-line flags win");
  sub->add_flag("--emit-plot-data", c.emit_plot_data, "Also write plot-ready data files");
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Inputs, outputs and configuration of one subcommand run. Written last so
/// it lists every file the run produced.
struct Manifest {
  std::string command;
  ordered_json config = ordered_json::object();
  std::optional<std::string> dataset;
  std::vector<std::string> checkpoints;
  std::vector<std::string> outputs;

  void write(const Common& c) const {
    ordered_json j;
    j["tool_version"] = kToolVersion;
    j["command"] = command;
    j["config_hash"] = hex(fnv1a(config.dump()));
    j["config"] = config;
    j["dataset"] = dataset ? ordered_json(*dataset) : ordered_json(nullptr);
    j["checkpoints"] = checkpoints;
    j["out_dir"] = c.out_dir;
    j["outputs"] = outputs;
    std::ofstream f(c.resolve("manifest-" + command + ".json"));
    if (!f) {
      throw Error("cannot write manifest in " + c.out_dir);
    }
    f << j.dump(2) << '\n';
  }
};

void write_file(const Common& c, Manifest& m, const std::string& name, const std::function<void(std::ostream&)>& fn) {
  const fs::path p = c.resolve(name);
  std::ofstream f(p, std::ios::binary);
  if (!f) {
    throw Error("cannot write " + p.string());
  }
  fn(f);
  f.flush();
  if (!f) {
    throw Error("write failed for " + p.string());
  }
  m.outputs.push_back(name);
}

BatchMode parse_batch_mode(const std::string& s) {
  if (s == "transitions") {
    return BatchMode::transitions;
  }
  if (s == "by_rollout") {
    return BatchMode::by_rollout;
  }
  throw ParameterError("unknown batch mode '" + s + "'");
}

const char* batch_mode_name(BatchMode m) { return m == BatchMode::transitions ? "transitions" : "by_rollout"; }

/// Flags exposing every TrainerConfig field.
struct TrainFlags {
  TrainerConfig cfg;
  std::string mode = to_string(TrainMode::verifierq);
  std::string sign_mode = to_string(SignMode::literal);
  std::string optimizer = to_string(OptimizerKind::sgd);
  std::string head = to_string(HeadMode::tabular);
  std::string batch_mode = batch_mode_name(BatchMode::transitions);
  CLI::Option* steps_opt = nullptr;

  void add(CLI::App* sub) {
    sub->add_option("--mode", mode, "verifierq, q_learning, iql or prm")
        ->check(CLI::IsMember({"verifierq", "q_learning", "iql", "prm"}))
        ->capture_default_str();
    sub->add_option("--gamma", cfg.gamma)->capture_default_str();
    sub->add_option("--alpha", cfg.alpha, "Weight of the conservative value term")->capture_default_str();
    sub->add_option("--alpha-soft", cfg.alpha_soft, "Polyak rate of the target head")->capture_default_str();
    sub->add_option("--batch", cfg.batch_size)->capture_default_str();
    sub->add_option("--lr", cfg.learning_rate, "0 picks 1e-2 for tabular, 1e-3 for mlp")->capture_default_str();
    sub->add_option("--tau1", cfg.tau1)->capture_default_str();
    sub->add_option("--tau2", cfg.tau2)->capture_default_str();
    steps_opt = sub->add_option("--steps", cfg.steps)->capture_default_str();
    sub->add_option("--seed", cfg.seed)->capture_default_str();
    sub->add_option("--sign-mode", sign_mode)
        ->check(CLI::IsMember({"literal", "both_positive"}))
        ->capture_default_str();
    sub->add_option("--optimizer", optimizer)->check(CLI::IsMember({"sgd", "adam"}))->capture_default_str();
    sub->add_option("--head", head)->check(CLI::IsMember({"tabular", "mlp"}))->capture_default_str();
    sub->add_option("--hidden1", cfg.mlp_shape.hidden1)->capture_default_str();
    sub->add_option("--hidden2", cfg.mlp_shape.hidden2)->capture_default_str();
    sub->add_option("--embed-dim", cfg.embed_dim)->capture_default_str();
    sub->add_option("--batch-mode", batch_mode)
        ->check(CLI::IsMember({"transitions", "by_rollout"}))
        ->capture_default_str();
    sub->add_option("--prm-pretrain-steps", cfg.prm_pretrain_steps, "-1 is one epoch")->capture_default_str();
    sub->add_option("--adam-beta1", cfg.adam_beta1)->capture_default_str();
    sub->add_option("--adam-beta2", cfg.adam_beta2)->capture_default_str();
    sub->add_option("--adam-eps", cfg.adam_eps)->capture_default_str();
    sub->add_flag("--freeze-theta", cfg.freeze_theta);
    sub->add_flag("--freeze-psi", cfg.freeze_psi);
    sub->add_flag("--record-time", cfg.record_time, "Wall time per step; logs stop being reproducible");
  }

  TrainerConfig build() const {
    TrainerConfig c = cfg;
    c.mode = parse_train_mode(mode);
    c.sign_mode = parse_sign_mode(sign_mode);
    c.optimizer = parse_optimizer(optimizer);
    c.head = parse_head_mode(head);
    c.batch_mode = parse_batch_mode(batch_mode);
    c.validate();
    return c;
  }
};

/// NAME=PATH, or PATH with the file stem as the name.
std::pair<std::string, std::string> split_named(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) {
    return {fs::path(spec).stem().string(), spec};
  }
  if (eq == 0 || eq + 1 == spec.size()) {
    throw ParameterError("expected NAME=PATH, got '" + spec + "'");
  }
  return {spec.substr(0, eq), spec.substr(eq + 1)};
}

QHead load_theta(const fs::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  if (!ck.has_head("theta")) {
    throw FormatError(path.string() + " has no theta head");
  }
  return QHead(ck.head("theta"));
}

OfflineDataset load_dataset(const Common& c, const std::string& name, Manifest& m) {
  m.dataset = name;
  return read_dataset(c.resolve(name));
}

std::vector<Problem> leading_problems(const OfflineDataset& ds, int limit) {
  const auto& ps = ds.problems();
  const std::size_t n = limit > 0 ? std::min<std::size_t>(ps.size(), static_cast<std::size_t>(limit)) : ps.size();
  return std::vector<Problem>(ps.begin(), ps.begin() + static_cast<std::ptrdiff_t>(n));
}

/// Comma-separated list; a repeated flag replaces the whole list.
template <class T>
std::vector<T> parse_list(const std::string& text, const char* flag) {
  std::vector<T> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::istringstream one(item);
    T v{};
    if (!(one >> v) || !(one >> std::ws).eof()) {
      throw ParameterError(std::string(flag) + ": cannot parse '" + item + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) {
    throw ParameterError(std::string(flag) + " is empty");
  }
  return out;
}

/// Pool seeds never coincide with corpus seeds for the same base seed.
std::uint64_t pool_seed(std::uint64_t seed) { return derive_seed(seed, 0x6576616cULL); }

void write_log_plot(std::ostream& out, const TrainLog& log) {
  out << "step,td,l_mu,l_pi,cql,total\n";
  const auto& r = log.records;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const std::size_t lo = i + 1 >= kPlotWindow ? i + 1 - kPlotWindow : 0;
    double td = 0, mu = 0, pi = 0, cql = 0, total = 0;
    for (std::size_t k = lo; k <= i; ++k) {
      td += r[k].td;
      mu += r[k].l_mu;
      pi += r[k].l_pi;
      cql += r[k].cql;
      total += r[k].total;
    }
    const double n = static_cast<double>(i + 1 - lo);
    out << r[i].step << ',' << format_double(td / n) << ',' << format_double(mu / n) << ',' << format_double(pi / n)
        << ',' << format_double(cql / n) << ',' << format_double(total / n) << '\n';
  }
}

// ---------------------------------------------------------------------------
// gen-data

struct GenData {
  Common common;
  std::uint64_t seed = 0;
  int problems = 50;
  int horizon = 5;
  int vocab = 6;
  int subvocab = 0;
  int step_len = 1;
  double recovery_prob = 0.0;
  double epsilon = 0.5;
  int k = 32;
  bool stitch = false;
  std::string out = "dataset.jsonl";

  void add(CLI::App* sub) {
    add_common(sub, common);
    sub->add_option("--seed", seed)->capture_default_str();
    sub->add_option("--problems", problems)->capture_default_str();
    sub->add_option("--horizon", horizon)->capture_default_str();
    sub->add_option("--vocab", vocab)->capture_default_str();
    sub->add_option("--subvocab", subvocab, "0 means equal to --vocab")->capture_default_str();
    sub->add_option("--step-len", step_len)->capture_default_str();
    sub->add_option("--recovery-prob", recovery_prob)->capture_default_str();
    sub->add_option("--epsilon", epsilon, "Per-step probability of a wrong step")->capture_default_str();
    sub->add_option("--k", k, "Rollouts per problem")->capture_default_str();
    sub->add_flag("--stitch", stitch, "No rollout fully correct, every correct step present");
    sub->add_option("--out", out)->capture_default_str();
  }

  int run(std::ostream& out_s, std::ostream& err) const {
    if (problems < 1) {
      throw ParameterError("--problems must be >= 1");
    }
    const ProblemShape shape{horizon, vocab, subvocab > 0 ? subvocab : vocab, step_len, recovery_prob};
    const auto ps = generate_problem_set(seed, problems, shape);
    const OfflineDataset ds = generate_corpus(ps, NoisePolicy{epsilon, stitch}, k, seed);
    fs::create_directories(common.out_dir);
    Manifest m;
    m.command = "gen-data";
    m.config = ordered_json{{"seed", seed},         {"problems", problems}, {"horizon", horizon},
                            {"vocab", vocab},       {"subvocab", shape.subvocab}, {"step_len", step_len},
                            {"recovery_prob", recovery_prob}, {"epsilon", epsilon}, {"k", k},
                            {"stitch", stitch}};
    write_file(common, m, out, [&](std::ostream& f) { write_dataset(ds, f); });
    m.dataset = out;
    m.write(common);
    out_s << "transitions " << ds.size() << '\n'
          << "rollouts " << ds.rollouts().size() << '\n'
          << "fully_correct_fraction " << format_double(ds.fully_correct_fraction()) << '\n';
    for (const auto& w : ds.meta().warnings) {
      err << "warning: " << w << '\n';
    }
    return kExitOk;
  }
};

// ---------------------------------------------------------------------------
// train

struct Train {
  Common common;
  TrainFlags flags;
  std::string data;
  std::string init;
  std::string resume;
  std::int64_t checkpoint_every = 0;
  std::string out = "model.ckpt";
  std::string log = "train_log.csv";

  void add(CLI::App* sub) {
    add_common(sub, common);
    flags.add(sub);
    sub->add_option("--data", data, "Dataset file")->required();
    sub->add_option("--init", init, "Checkpoint whose theta starts training (skips PRM pretraining)");
    sub->add_option("--resume", resume, "Trainer checkpoint to continue; only --steps is taken from flags")
        ->excludes("--init");
    sub->add_option("--checkpoint-every", checkpoint_every, "Also save every N steps; 0 disables")
        ->capture_default_str();
    sub->add_option("--out", out)->capture_default_str();
    sub->add_option("--log", log)->capture_default_str();
  }

  int run(std::ostream& out_s, std::ostream& err) const {
    Manifest m;
    m.command = "train";
    const OfflineDataset ds = load_dataset(common, data, m);
    std::optional<Trainer> t;
    if (!resume.empty()) {
      m.checkpoints.push_back(resume);
      t.emplace(Trainer::resume(ds, common.resolve(resume)));
      if (flags.steps_opt->count() > 0) {
        t->set_total_steps(flags.cfg.steps);
      }
    } else {
      const TrainerConfig cfg = flags.build();
      std::optional<QHead> theta;
      if (!init.empty()) {
        m.checkpoints.push_back(init);
        theta = load_theta(common.resolve(init));
      }
      t.emplace(ds, cfg, std::move(theta));
    }
    m.config = t->config().to_json();
    m.config["init"] = init;
    m.config["resume"] = resume;
    m.config["checkpoint_every"] = checkpoint_every;
    fs::create_directories(common.out_dir);

    int code = kExitOk;
    try {
      while (t->steps_done() < t->config().steps) {
        t->step();
        if (checkpoint_every > 0 && t->steps_done() % checkpoint_every == 0 && t->steps_done() < t->config().steps) {
          const std::string name = fs::path(out).stem().string() + ".step" + std::to_string(t->steps_done()) + ".ckpt";
          write_file(common, m, name, [&](std::ostream& f) { write_checkpoint(t->to_checkpoint(), f); });
          t->log().checkpoints.push_back(name);
        }
      }
      write_file(common, m, out, [&](std::ostream& f) { write_checkpoint(t->to_checkpoint(), f); });
      t->log().checkpoints.push_back(out);
    } catch (const DivergenceError& e) {
      err << "error: training halted: " << e.what() << '\n';
      code = kExitDivergence;
    }
    write_file(common, m, log, [&](std::ostream& f) { t->log().write_csv(f); });
    if (common.emit_plot_data) {
      write_file(common, m, fs::path(log).stem().string() + ".plot.csv",
                 [&](std::ostream& f) { write_log_plot(f, t->log()); });
    }
    m.write(common);
    if (code == kExitOk) {
      out_s << "steps " << t->steps_done() << '\n';
      if (!t->log().records.empty()) {
        const TrainRecord& r = t->log().records.back();
        out_s << "final_td " << format_double(r.td) << '\n' << "final_cql " << format_double(r.cql) << '\n';
      }
      out_s << "checkpoint " << out << '\n';
    }
    return code;
  }
};

// ---------------------------------------------------------------------------
// eval

struct EvalFlags {
  int pool = 64;
  int trials = 20;
  std::uint64_t seed = 0;
  std::optional<double> epsilon;
  int problems = 0;

  void add(CLI::App* sub) {
    sub->add_option("--pool", pool, "Candidates generated per problem")->capture_default_str();
    sub->add_option("--trials", trials, "Seeded subsamples per problem and N")->capture_default_str();
    sub->add_option("--eval-seed", seed, "Seed of pools and subsamples")->capture_default_str();
    sub->add_option("--epsilon", epsilon, "Pool generator noise; defaults to the dataset's");
    sub->add_option("--problems", problems, "Evaluate only the first N dataset problems; 0 is all")
        ->capture_default_str();
  }

  ordered_json to_json() const {
    return ordered_json{{"pool", pool},
                        {"trials", trials},
                        {"eval_seed", seed},
                        {"epsilon", epsilon ? ordered_json(*epsilon) : ordered_json(nullptr)},
                        {"problems", problems}};
  }

  std::vector<CandidatePool> pools(const OfflineDataset& ds, std::span<const Problem> ps) const {
    const NoisePolicy policy{epsilon.value_or(ds.meta().policy.epsilon), false};
    return generate_pools(ps, policy, pool, pool_seed(seed));
  }
};

struct Eval {
  Common common;
  EvalFlags ef;
  std::string data;
  std::vector<std::string> ckpts;
  std::string ns_text = "1,2,4,8,16,32,64";
  bool no_majority = false;
  bool oracle = false;

  void add(CLI::App* sub) {
    add_common(sub, common);
    ef.add(sub);
    sub->add_option("--data", data, "Dataset whose problems are evaluated")->required();
    sub->add_option("--ckpt", ckpts, "Verifier checkpoint as NAME=PATH; repeatable");
    sub->add_option("--ns", ns_text, "Comma-separated best-of-N sizes")->capture_default_str();
    sub->add_flag("--no-majority", no_majority, "Skip the majority-vote baseline");
    sub->add_flag("--oracle", oracle, "Add the ground-truth verifier");
  }

  int run(std::ostream& out_s, std::ostream&) const {
    Manifest m;
    m.command = "eval";
    const auto ns = parse_list<std::size_t>(ns_text, "--ns");
    const OfflineDataset ds = load_dataset(common, data, m);
    std::vector<std::unique_ptr<Verifier>> verifiers;
    for (const auto& spec : ckpts) {
      auto [name, path] = split_named(spec);
      m.checkpoints.push_back(path);
      verifiers.push_back(std::make_unique<QHeadVerifier>(name, load_theta(common.resolve(path))));
    }
    if (oracle) {
      verifiers.push_back(std::make_unique<OracleVerifier>());
    }
    if (verifiers.empty() && no_majority) {
      throw ParameterError("nothing to evaluate");
    }
    const auto ps = leading_problems(ds, ef.problems);
    const auto pools = ef.pools(ds, ps);
    std::vector<EvalCurve> curves;
    for (const auto& v : verifiers) {
      curves.push_back(accuracy_curve(*v, ps, pools, ns, ef.trials, ef.seed));
    }
    if (!no_majority) {
      curves.push_back(majority_vote_curve(pools, ns, ef.trials, ef.seed));
    }
    m.config = ef.to_json();
    m.config["ns"] = ns;
    m.config["ckpt"] = ckpts;
    m.config["majority"] = !no_majority;
    m.config["oracle"] = oracle;
    fs::create_directories(common.out_dir);
    for (const EvalCurve& c : curves) {
      write_file(common, m, "eval_" + c.method + ".csv",
                 [&](std::ostream& f) { write_curves_csv(f, std::span<const EvalCurve>(&c, 1)); });
    }
    write_file(common, m, "eval_comparison.csv", [&](std::ostream& f) { write_curves_csv(f, curves); });
    if (common.emit_plot_data) {
      write_file(common, m, "eval.plot.csv", [&](std::ostream& f) {
        f << 'N';
        for (const auto& c : curves) {
          f << ',' << c.method;
        }
        f << '\n';
        for (std::size_t j = 0; j < ns.size(); ++j) {
          f << ns[j];
          for (const auto& c : curves) {
            f << ',' << format_double(c.points[j].accuracy);
          }
          f << '\n';
        }
      });
    }
    m.write(common);
    write_curves_csv(out_s, curves);
    return kExitOk;
  }
};

// ---------------------------------------------------------------------------
// oracle-check

struct OracleCheck {
  Common common;
  int instances = 20;
  int max_horizon = 5;
  int max_vocab = 5;
  std::string gammas_text = "0.5,0.9,0.99";
  std::uint64_t seed = 0;
  double tol = 1e-12;
  int expectile_sets = 100;

  /// Ratios between residuals below this are dominated by rounding.
  static constexpr double kRatioFloor = 1e-6;
  static constexpr double kRatioSlack = 1e-9;

  void add(CLI::App* sub) {
    add_common(sub, common);
    sub->add_option("--instances", instances)->capture_default_str();
    sub->add_option("--max-horizon", max_horizon)->capture_default_str();
    sub->add_option("--max-vocab", max_vocab)->capture_default_str();
    sub->add_option("--gammas", gammas_text)->capture_default_str();
    sub->add_option("--seed", seed)->capture_default_str();
    sub->add_option("--tol", tol)->capture_default_str();
    sub->add_option("--expectile-sets", expectile_sets)->capture_default_str();
  }

  struct Row {
    std::string check;
    int instance = 0;
    std::optional<double> gamma;
    std::optional<double> ratio;
    std::optional<double> error;
    bool pass = false;
  };

  static std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

  std::vector<Row> rows() const {
    const auto gammas = parse_list<double>(gammas_text, "--gammas");
    if (max_horizon < 1 || max_vocab < 2 || instances < 0 || expectile_sets < 0) {
      throw ParameterError("oracle-check needs max-horizon >= 1, max-vocab >= 2 and non-negative counts");
    }
    std::vector<Row> out;
    for (int i = 0; i < instances; ++i) {
      Rng rng(derive_seed(seed, 0x6d6470ULL, i));
      const int h = 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(max_horizon)));
      const int v = 2 + static_cast<int>(rng.index(static_cast<std::uint64_t>(max_vocab - 1)));
      const double recovery = i % 2 == 0 ? 0.0 : 0.3;
      const Problem p = generate_problem(rng.next(), ProblemShape{h, v, v, 1, recovery});
      const FiniteMdp mdp = FiniteMdp::from_problem(p);
      for (double g : gammas) {
        const ExactQTable t = value_iteration_modified(mdp, g, tol);
        double worst = 0.0;
        for (std::size_t k = 1; k < t.residuals.size(); ++k) {
          if (t.residuals[k - 1] > kRatioFloor) {
            worst = std::max(worst, t.residuals[k] / t.residuals[k - 1]);
          }
        }
        out.push_back(Row{"contraction", i, g, worst, std::nullopt, worst <= 0.5 * g + kRatioSlack});
      }
    }
    for (double g : gammas) {
      const ExactQTable t = value_iteration_modified(FiniteMdp::self_loop(1.0), g, 1e-14);
      const double err = std::abs(t.at(0, 0) - 1.0 / (2.0 - g));
      out.push_back(Row{"self_loop", 0, g, std::nullopt, err, err <= 1e-9});
    }
    {
      const Problem p = generate_problem(derive_seed(seed, 0x7465726dULL), ProblemShape{1, 3, 3, 1, 0.0});
      const ExactQTable t = value_iteration_modified(p, 0.99, tol);
      const State root = root_state(p);
      double err = 0.0;
      for (ActionIndex a = 0; a < 3; ++a) {
        err = std::max(err, std::abs(t.at(p, root, a) - 0.5 * step_reward(p, root, a).value()));
      }
      out.push_back(Row{"terminal", 0, 0.99, std::nullopt, err, err == 0.0});
    }
    for (int i = 0; i < expectile_sets; ++i) {
      Rng rng(derive_seed(seed, 0x657870ULL, i));
      std::vector<double> xs(2 + rng.index(19));
      for (double& x : xs) {
        x = rng.uniform();
      }
      double prev = -1.0;
      bool monotone = true;
      for (int k = 1; k <= 99; ++k) {
        const double e = exact_expectile(xs, k / 100.0);
        monotone = monotone && e >= prev;
        prev = e;
      }
      out.push_back(Row{"expectile_monotone", i, std::nullopt, std::nullopt, std::nullopt, monotone});
      const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
      double mean = 0.0;
      for (double x : xs) {
        mean += x;
      }
      mean /= static_cast<double>(xs.size());
      const double e_hi = std::abs(exact_expectile(xs, 0.999) - *hi);
      const double e_lo = std::abs(exact_expectile(xs, 0.001) - *lo);
      const double e_mid = std::abs(exact_expectile(xs, 0.5) - mean);
      out.push_back(Row{"expectile_upper", i, std::nullopt, std::nullopt, e_hi, e_hi <= 0.02});
      out.push_back(Row{"expectile_lower", i, std::nullopt, std::nullopt, e_lo, e_lo <= 0.02});
      out.push_back(Row{"expectile_mean", i, std::nullopt, std::nullopt, e_mid, e_mid <= 1e-9});
    }
    return out;
  }

  int run(std::ostream& out_s, std::ostream& err) const {
    const auto rs = rows();
    Manifest m;
    m.command = "oracle-check";
    m.config = ordered_json{{"instances", instances}, {"max_horizon", max_horizon}, {"max_vocab", max_vocab},
                            {"gammas", parse_list<double>(gammas_text, "--gammas")},       {"seed", seed},               {"tol", tol},
                            {"expectile_sets", expectile_sets}};
    fs::create_directories(common.out_dir);
    write_file(common, m, "oracle_check.csv", [&](std::ostream& f) {
      f << "check,instance,gamma,residual_ratio,error,pass\n";
      for (const Row& r : rs) {
        f << r.check << ',' << r.instance << ',' << opt(r.gamma) << ',' << opt(r.ratio) << ',' << opt(r.error) << ','
          << (r.pass ? 1 : 0) << '\n';
      }
    });
    m.write(common);
    const auto failed = std::count_if(rs.begin(), rs.end(), [](const Row& r) { return !r.pass; });
    for (const Row& r : rs) {
      if (!r.pass) {
        err << "violation: " << r.check << " instance " << r.instance << '\n';
      }
    }
    out_s << "checks " << rs.size() << '\n' << "failed " << failed << '\n';
    return failed == 0 ? kExitOk : kExitViolation;
  }
};

// ---------------------------------------------------------------------------
// sweep

struct Sweep {
  Common common;
  TrainFlags flags;
  EvalFlags ef;
  std::string data;
  std::string grid_text = "0.1,0.3,0.5,0.7,0.9";
  std::string seeds_text = "0";
  std::size_t n = 64;

  void add(CLI::App* sub) {
    add_common(sub, common);
    flags.add(sub);
    ef.add(sub);
    sub->add_option("--data", data, "Training dataset; its problems are evaluated")->required();
    sub->add_option("--tau1-grid", grid_text)->capture_default_str();
    sub->add_option("--seeds", seeds_text, "Training seeds, comma-separated")->capture_default_str();
    sub->add_option("--n", n, "Best-of-N size reported")->capture_default_str();
  }

  int run(std::ostream& out_s, std::ostream& err) const {
    Manifest m;
    m.command = "sweep";
    const auto grid = parse_list<double>(grid_text, "--tau1-grid");
    const auto seeds = parse_list<std::uint64_t>(seeds_text, "--seeds");
    const OfflineDataset ds = load_dataset(common, data, m);
    TrainerConfig base = flags.build();
    if (base.mode != TrainMode::verifierq) {
      throw ParameterError("sweep trains in verifierq mode");
    }
    const auto ps = leading_problems(ds, ef.problems);
    const auto pools = ef.pools(ds, ps);
    const std::vector<std::size_t> ns{n};
    struct Run {
      double tau1;
      std::uint64_t seed;
      double accuracy;
    };
    std::vector<Run> runs;
    for (double tau1 : grid) {
      for (std::uint64_t s : seeds) {
        TrainerConfig cfg = base;
        cfg.tau1 = tau1;
        cfg.seed = s;
        cfg.validate();
        TrainResult r;
        try {
          r = train(ds, cfg);
        } catch (const DivergenceError& e) {
          err << "error: tau1 " << tau1 << " seed " << s << " halted: " << e.what() << '\n';
          return kExitDivergence;
        }
        const QHeadVerifier v("verifierq", r.theta);
        runs.push_back(Run{tau1, s, accuracy_curve(v, ps, pools, ns, ef.trials, ef.seed).points[0].accuracy});
      }
    }
    m.config = base.to_json();
    m.config["tau1_grid"] = grid;
    m.config["seeds"] = seeds;
    m.config["n"] = n;
    m.config["eval"] = ef.to_json();
    fs::create_directories(common.out_dir);
    write_file(common, m, "sweep_runs.csv", [&](std::ostream& f) {
      f << "tau1,tau2,seed,N,accuracy\n";
      for (const Run& r : runs) {
        f << format_double(r.tau1) << ',' << format_double(base.tau2) << ',' << r.seed << ',' << n << ','
          << format_double(r.accuracy) << '\n';
      }
    });
    std::ostringstream table;
    table << "tau1,tau2,N,accuracy,stderr,seeds\n";
    for (std::size_t g = 0; g < grid.size(); ++g) {
      double sum = 0.0;
      for (std::size_t k = 0; k < seeds.size(); ++k) {
        sum += runs[g * seeds.size() + k].accuracy;
      }
      const double count = static_cast<double>(seeds.size());
      const double mean = sum / count;
      double sq = 0.0;
      for (std::size_t k = 0; k < seeds.size(); ++k) {
        const double d = runs[g * seeds.size() + k].accuracy - mean;
        sq += d * d;
      }
      const double se = seeds.size() > 1 ? std::sqrt(sq / (count - 1.0) / count) : 0.0;
      table << format_double(grid[g]) << ',' << format_double(base.tau2) << ',' << n << ',' << format_double(mean)
            << ',' << format_double(se) << ',' << seeds.size() << '\n';
    }
    write_file(common, m, "sweep.csv", [&](std::ostream& f) { f << table.str(); });
    if (common.emit_plot_data) {
      write_file(common, m, "sweep.plot.csv", [&](std::ostream& f) { f << table.str(); });
    }
    m.write(common);
    out_s << table.str();
    return kExitOk;
  }
};

// ---------------------------------------------------------------------------
// probe

struct Probe {
  Common common;
  std::string data;
  std::string ckpt_a;
  std::string ckpt_b;
  double rate = 1.0;
  std::uint64_t seed = 0;
  int problems = 0;

  void add(CLI::App* sub) {
    add_common(sub, common);
    sub->add_option("--data", data, "Dataset whose problems are probed")->required();
    sub->add_option("--ckpt-a", ckpt_a, "First verifier as NAME=PATH")->required();
    sub->add_option("--ckpt-b", ckpt_b, "Second verifier as NAME=PATH")->required();
    sub->add_option("--rate", rate, "Probability that a problem is probed")->capture_default_str();
    sub->add_option("--seed", seed)->capture_default_str();
    sub->add_option("--problems", problems, "Probe only the first N problems; 0 is all")->capture_default_str();
  }

  int run(std::ostream& out_s, std::ostream&) const {
    Manifest m;
    m.command = "probe";
    const OfflineDataset ds = load_dataset(common, data, m);
    const auto [name_a, path_a] = split_named(ckpt_a);
    const auto [name_b, path_b] = split_named(ckpt_b);
    m.checkpoints = {path_a, path_b};
    const QHeadVerifier a(name_a, load_theta(common.resolve(path_a)));
    const QHeadVerifier b(name_b, load_theta(common.resolve(path_b)));
    const auto ps = leading_problems(ds, problems);
    const ProbeReport r = overestimation_probe(a, b, ps, rate, seed);
    m.config = ordered_json{{"ckpt_a", ckpt_a}, {"ckpt_b", ckpt_b}, {"rate", rate}, {"seed", seed},
                            {"problems", problems}};
    fs::create_directories(common.out_dir);
    write_file(common, m, "probe.csv", [&](std::ostream& f) { write_probe_csv(f, r); });
    std::ostringstream summary;
    summary << "verifier,original_mean,perturbed_mean,rows\n"
            << r.name_a << ',' << format_double(r.a_original_mean) << ',' << format_double(r.a_perturbed_mean) << ','
            << r.rows.size() << '\n'
            << r.name_b << ',' << format_double(r.b_original_mean) << ',' << format_double(r.b_perturbed_mean) << ','
            << r.rows.size() << '\n';
    write_file(common, m, "probe_summary.csv", [&](std::ostream& f) { f << summary.str(); });
    m.write(common);
    out_s << summary.str();
    return kExitOk;
  }
};

// ---------------------------------------------------------------------------
// argument plumbing

std::optional<std::string> flag_value(const std::vector<std::string>& args, const std::string& flag) {
  std::optional<std::string> found;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == flag && i + 1 < args.size()) {
      found = args[i + 1];
    } else if (args[i].rfind(flag + "=", 0) == 0) {
      found = args[i].substr(flag.size() + 1);
    }
  }
  return found;
}

/// Config entries become leading `--key=value` flags so explicit flags,
/// parsed later, take precedence. Keys may use '_' for '-'. Entries outside
/// a section or in the section named after the subcommand apply.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  const auto config = flag_value(args, "--config");
  if (!config || args.empty()) {
    return args;
  }
  const fs::path path = fs::path(flag_value(args, "--out-dir").value_or(".")) / *config;
  std::ifstream in(path);
  if (!in) {
    throw Error("cannot open config file " + path.string());
  }
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(in);
  } catch (const CLI::Error& e) {
    throw FormatError("bad config file " + path.string() + ": " + e.what());
  }
  std::vector<std::string> injected;
  for (const CLI::ConfigItem& item : items) {
    if (!item.parents.empty() && !(item.parents.size() == 1 && item.parents[0] == args[0])) {
      continue;
    }
    if (item.name == "++" || item.name == "--") {
      continue;  // section markers
    }
    std::string key = item.name;
    std::replace(key.begin(), key.end(), '_', '-');
    std::string value;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) {
      value += (i > 0 ? "," : "") + item.inputs[i];
    }
    injected.push_back("--" + key + "=" + value);
  }
  std::vector<std::string> out{args[0]};
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), args.begin() + 1, args.end());
  return out;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Offline-RL step verifier experiments on synthetic reasoning MDPs", "verifierq"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1, 1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  GenData gen;
  Train tr;
  Eval ev;
  OracleCheck oc;
  Sweep sw;
  Probe pr;
  CLI::App* s_gen = app.add_subcommand("gen-data", "Generate an offline dataset of noisy rollouts");
  CLI::App* s_train = app.add_subcommand("train", "Train a verifier or a baseline on a dataset");
  CLI::App* s_eval = app.add_subcommand("eval", "Best-of-N accuracy curves for verifiers and majority vote");
  CLI::App* s_oracle = app.add_subcommand("oracle-check", "Check contraction, fixed points and expectiles exactly");
  CLI::App* s_sweep = app.add_subcommand("sweep", "Train and evaluate over a grid of lower expectiles");
  CLI::App* s_probe = app.add_subcommand("probe", "Score perturbed steps under two verifiers");
  gen.add(s_gen);
  tr.add(s_train);
  ev.add(s_eval);
  oc.add(s_oracle);
  sw.add(s_sweep);
  pr.add(s_probe);
  // Repeatable options collect every occurrence.
  s_eval->get_option("--ckpt")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  try {
    std::vector<std::string> argv = expand_config(args);
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (s_gen->parsed()) {
      return gen.run(out, err);
    }
    if (s_train->parsed()) {
      return tr.run(out, err);
    }
    if (s_eval->parsed()) {
      return ev.run(out, err);
    }
    if (s_oracle->parsed()) {
      return oc.run(out, err);
    }
    if (s_sweep->parsed()) {
      return sw.run(out, err);
    }
    return pr.run(out, err);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}

}  // namespace verifierq::cli
