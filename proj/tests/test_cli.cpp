#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "verifierq/checkpoint.hpp"
#include "verifierq/cli.hpp"
#include "verifierq/dataset.hpp"

using verifierq::cli::run_cli;
namespace fs = std::filesystem;

#ifndef VERIFIERQ_GOLDEN_DIR
#error "VERIFIERQ_GOLDEN_DIR must point at tests/golden"
#endif

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = run_cli(args, out, err);
  return Run{code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "verifierq_test_cli" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

/// Compares against tests/golden/<name>; VERIFIERQ_UPDATE_GOLDEN=1 rewrites it.
void check_golden(const fs::path& produced, const std::string& name) {
  const fs::path golden = fs::path(VERIFIERQ_GOLDEN_DIR) / name;
  if (const char* u = std::getenv("VERIFIERQ_UPDATE_GOLDEN"); u && std::string(u) == "1") {
    fs::copy_file(produced, golden, fs::copy_options::overwrite_existing);
  }
  INFO("golden file " << name);
  REQUIRE(fs::exists(golden));
  CHECK(slurp(produced) == slurp(golden));
}

std::vector<std::string> small_data(const fs::path& dir, const std::string& out = "data.jsonl") {
  return {"gen-data", "--seed", "3", "--problems", "4", "--horizon", "3", "--vocab", "3", "--epsilon", "0.4",
          "--k", "8", "--out", out, "--out-dir", dir.string()};
}

std::vector<std::string> small_train(const fs::path& dir, const std::string& mode, const std::string& out,
                                     const std::string& steps = "40") {
  return {"train", "--data", "data.jsonl", "--mode", mode, "--steps", steps, "--batch", "8", "--lr", "2",
          "--out", out, "--log", out + ".csv", "--out-dir", dir.string()};
}

}  // namespace

TEST_CASE("gen-data summary and determinism") {
  const auto d = fresh_dir("gen");
  auto r = cli({"gen-data", "--seed", "1", "--problems", "50", "--horizon", "5", "--vocab", "6", "--epsilon", "0.5",
                "--k", "32", "--out-dir", d.string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("transitions 8000\n") != std::string::npos);
  CHECK(verifierq::read_dataset(d / "dataset.jsonl").size() == 8000);
  CHECK(fs::exists(d / "manifest-gen-data.json"));

  r = cli({"gen-data", "--epsilon", "0", "--problems", "3", "--k", "4", "--out", "clean.jsonl", "--out-dir",
           d.string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("fully_correct_fraction 1\n") != std::string::npos);

  const auto a = fresh_dir("gen_a");
  const auto b = fresh_dir("gen_b");
  CHECK(cli(small_data(a)).code == 0);
  CHECK(cli(small_data(b)).code == 0);
  CHECK(slurp(a / "data.jsonl") == slurp(b / "data.jsonl"));
  check_golden(a / "data.jsonl", "gen_data.jsonl");
}

TEST_CASE("usage and IO errors exit 2") {
  const auto d = fresh_dir("errors");
  REQUIRE(cli(small_data(d)).code == 0);
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"gen-data", "--problems", "0", "--out-dir", d.string()}).code == 2);
  CHECK(cli({"gen-data", "--epsilon", "2", "--out-dir", d.string()}).code == 2);
  auto bad_mode = small_train(d, "verifierq", "m.ckpt");
  bad_mode[4] = "sarsa";
  const auto r = cli(bad_mode);
  CHECK(r.code == 2);
  CHECK(r.err.find("sarsa") != std::string::npos);
  CHECK(cli({"train", "--data", "missing.jsonl", "--out-dir", d.string()}).code == 2);
  CHECK(cli({"eval", "--data", "data.jsonl", "--ckpt", "x=missing.ckpt", "--out-dir", d.string()}).code == 2);
  CHECK(cli({"train", "--out-dir", d.string()}).code == 2);
  CHECK(cli({"train", "--data", "data.jsonl", "--config", "nope.cfg", "--out-dir", d.string()}).code == 2);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("config file values yield to flags") {
  const auto d = fresh_dir("config");
  {
    std::ofstream f(d / "gen.cfg");
    f << "# small corpus\nseed = 3\nproblems = 4\nhorizon = 3\nvocab = 3\nepsilon = 0.4\nk = 8\nout = \"data.jsonl\"\n";
  }
  REQUIRE(cli({"gen-data", "--config", "gen.cfg", "--out-dir", d.string()}).code == 0);
  const auto ref = fresh_dir("config_ref");
  REQUIRE(cli(small_data(ref)).code == 0);
  CHECK(slurp(d / "data.jsonl") == slurp(ref / "data.jsonl"));

  REQUIRE(cli({"gen-data", "--config", "gen.cfg", "--k", "2", "--out", "k2.jsonl", "--out-dir", d.string()}).code ==
          0);
  CHECK(verifierq::read_dataset(d / "k2.jsonl").rollouts().size() == 8);

  {
    std::ofstream f(d / "bad.cfg");
    f << "no_such_key = 1\n";
  }
  CHECK(cli({"gen-data", "--config", "bad.cfg", "--out-dir", d.string()}).code == 2);
}

TEST_CASE("train: zero steps, two phases, divergence") {
  const auto d = fresh_dir("train");
  REQUIRE(cli(small_data(d)).code == 0);
  auto r = cli(small_train(d, "verifierq", "zero.ckpt", "0"));
  CHECK(r.code == 0);
  CHECK(fs::exists(d / "zero.ckpt"));
  CHECK(slurp(d / "zero.ckpt.csv") == "step,td,l_mu,l_pi,cql,total,theta_norm,psi_norm,ms\n");

  REQUIRE(cli(small_train(d, "prm", "prm.ckpt")).code == 0);
  auto two = small_train(d, "verifierq", "vq.ckpt");
  two.insert(two.end(), {"--init", "prm.ckpt", "--emit-plot-data"});
  CHECK(cli(two).code == 0);
  CHECK(fs::exists(d / "vq.ckpt.plot.csv"));
  check_golden(d / "vq.ckpt.csv", "train_log.csv");

  auto div = small_train(d, "verifierq", "div.ckpt");
  div[10] = "1e300";
  div.insert(div.end(), {"--prm-pretrain-steps", "0"});
  r = cli(div);
  CHECK(r.code == 3);
  CHECK(r.err.find("non-finite") != std::string::npos);
  CHECK(fs::exists(d / "div.ckpt.csv"));
}

TEST_CASE("train: resume and reruns are byte-identical") {
  const auto d = fresh_dir("resume");
  REQUIRE(cli(small_data(d)).code == 0);
  for (const std::string opt : {"sgd", "adam"}) {
    auto full = small_train(d, "verifierq", "full.ckpt", "60");
    full.insert(full.end(), {"--optimizer", opt});
    REQUIRE(cli(full).code == 0);
    const std::string full_bytes = slurp(d / "full.ckpt");
    REQUIRE(cli(full).code == 0);
    CHECK(slurp(d / "full.ckpt") == full_bytes);

    auto half = small_train(d, "verifierq", "half.ckpt", "25");
    half.insert(half.end(), {"--optimizer", opt});
    REQUIRE(cli(half).code == 0);
    REQUIRE(cli({"train", "--data", "data.jsonl", "--resume", "half.ckpt", "--steps", "60", "--out", "resumed.ckpt",
                 "--log", "resumed.csv", "--out-dir", d.string()})
                .code == 0);
    CHECK(slurp(d / "resumed.ckpt") == full_bytes);
    const std::string full_log = slurp(d / "full.ckpt.csv");
    const std::string tail = slurp(d / "resumed.csv");
    const auto header_end = tail.find('\n') + 1;
    CHECK(full_log.size() > tail.size());
    CHECK(full_log.compare(full_log.size() - (tail.size() - header_end), std::string::npos, tail, header_end,
                           std::string::npos) == 0);
  }
  CHECK(cli({"train", "--data", "data.jsonl", "--resume", "gone.ckpt", "--out-dir", d.string()}).code == 2);
}

TEST_CASE("eval writes one curve per method and a comparison") {
  const auto d = fresh_dir("eval");
  REQUIRE(cli(small_data(d)).code == 0);
  REQUIRE(cli(small_train(d, "prm", "prm.ckpt")).code == 0);
  REQUIRE(cli(small_train(d, "verifierq", "vq.ckpt")).code == 0);
  const std::vector<std::string> args{"eval", "--data", "data.jsonl", "--ckpt", "verifierq=vq.ckpt", "--ckpt",
                                      "prm=prm.ckpt", "--pool", "8", "--ns", "1,2,8", "--trials", "3",
                                      "--emit-plot-data", "--out-dir", d.string()};
  const auto r = cli(args);
  CHECK(r.code == 0);
  for (const char* f : {"eval_verifierq.csv", "eval_prm.csv", "eval_majority.csv", "eval_comparison.csv",
                        "eval.plot.csv", "manifest-eval.json"}) {
    CHECK(fs::exists(d / f));
  }
  const std::string cmp = slurp(d / "eval_comparison.csv");
  CHECK(cmp.rfind("method,N,accuracy,stderr\n", 0) == 0);
  CHECK(std::count(cmp.begin(), cmp.end(), '\n') == 1 + 3 * 3);
  CHECK(r.out == cmp);
  REQUIRE(cli(args).code == 0);
  CHECK(slurp(d / "eval_comparison.csv") == cmp);
  check_golden(d / "eval_comparison.csv", "eval_comparison.csv");
  CHECK(cli({"eval", "--data", "data.jsonl", "--pool", "8", "--ns", "16", "--out-dir", d.string()}).code == 2);
}

TEST_CASE("oracle-check passes and reports residual ratios") {
  const auto d = fresh_dir("oracle");
  const auto r = cli({"oracle-check", "--out-dir", d.string()});
  CHECK(r.code == 0);
  std::ifstream f(d / "oracle_check.csv");
  std::string line;
  std::getline(f, line);
  CHECK(line == "check,instance,gamma,residual_ratio,error,pass");
  int contraction = 0;
  while (std::getline(f, line)) {
    std::vector<std::string> cols;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) {
      cols.push_back(c);
    }
    CHECK(cols.back() == "1");
    if (cols[0] == "contraction" && std::stod(cols[2]) == 0.99) {
      ++contraction;
      CHECK(std::stod(cols[3]) <= 0.495 + 1e-9);
    }
  }
  CHECK(contraction == 20);
  check_golden(d / "oracle_check.csv", "oracle_check.csv");
}

TEST_CASE("sweep emits one row per grid value") {
  const auto d = fresh_dir("sweep");
  REQUIRE(cli(small_data(d)).code == 0);
  const auto r = cli({"sweep", "--data", "data.jsonl", "--steps", "20", "--batch", "8", "--lr", "2", "--pool", "8",
                      "--n", "8", "--trials", "1", "--seeds", "1,2", "--out-dir", d.string()});
  CHECK(r.code == 0);
  const std::string table = slurp(d / "sweep.csv");
  CHECK(std::count(table.begin(), table.end(), '\n') == 6);
  CHECK(table.find("0.10000000000000001,") != std::string::npos);
  const std::string runs = slurp(d / "sweep_runs.csv");
  CHECK(std::count(runs.begin(), runs.end(), '\n') == 11);
  check_golden(d / "sweep.csv", "sweep.csv");
  CHECK(cli({"sweep", "--data", "data.jsonl", "--mode", "prm", "--out-dir", d.string()}).code == 2);
}

TEST_CASE("probe compares two verifiers") {
  const auto d = fresh_dir("probe");
  REQUIRE(cli(small_data(d)).code == 0);
  REQUIRE(cli(small_train(d, "q_learning", "ql.ckpt")).code == 0);
  REQUIRE(cli(small_train(d, "verifierq", "vq.ckpt")).code == 0);
  const auto r = cli({"probe", "--data", "data.jsonl", "--ckpt-a", "vq=vq.ckpt", "--ckpt-b", "ql=ql.ckpt",
                      "--out-dir", d.string()});
  CHECK(r.code == 0);
  const std::string rows = slurp(d / "probe.csv");
  CHECK(rows.rfind("problem,position,original,perturbed,vq_original,vq_perturbed,ql_original,ql_perturbed\n", 0) ==
        0);
  CHECK(std::count(rows.begin(), rows.end(), '\n') == 5);
  CHECK(r.out.rfind("verifier,original_mean,perturbed_mean,rows\nvq,", 0) == 0);
  check_golden(d / "probe.csv", "probe.csv");
}
