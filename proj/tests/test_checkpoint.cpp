#include <doctest.h>

#include <bit>
#include <cmath>
#include <limits>
#include <sstream>

#include "test_support.hpp"
#include "verifierq/checkpoint.hpp"
#include "verifierq/error.hpp"

using namespace verifierq;
using verifierq::testing::randomize;

namespace {

Checkpoint sample_checkpoint() {
  const auto problems = generate_problem_set(1, 2, ProblemShape{3, 4, 4, 1, 0.0});
  const auto ds = generate_corpus(problems, NoisePolicy{0.5, false}, 4, 1);
  Rng rng(3);
  Checkpoint c;
  c.meta["step"] = 12;
  c.meta["rng"] = Rng(5).serialize();
  c.index = TabularIndex::from_dataset(ds);
  Approximator tq = Approximator::tabular(c.index, true);
  Approximator tv = Approximator::tabular(c.index, false);
  Approximator mq = Approximator::mlp(FeatureSpec{3, 4, 8, 77}, MlpShape{5, 3}, true, 9);
  randomize(tq.params(), rng, 3.0);
  randomize(tv.params(), rng, 3.0);
  randomize(mq.params(), rng, 1.0);
  tq.params().values[0] = 0.1;
  tq.params().values[1] = 1.0 / 3.0;
  tq.params().values[2] = -1e-300;
  tq.params().values[3] = 6.02214076e23;
  c.heads = {{"theta", tq}, {"psi", tv}, {"mlp", mq}};
  ParamSet extra = ParamSet::zeros(mq.params().layout);
  randomize(extra, rng, 1.0);
  c.params = {{"adam_m", extra}};
  return c;
}

std::string to_text(const Checkpoint& c) {
  std::ostringstream os;
  write_checkpoint(c, os);
  return os.str();
}

Checkpoint from_text(const std::string& s) {
  std::istringstream is(s);
  return read_checkpoint(is);
}

}  // namespace

TEST_CASE("format_double round-trips exactly") {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double x = std::bit_cast<double>(rng.next());
    if (!std::isfinite(x)) {
      continue;
    }
    CHECK(parse_double(format_double(x)) == x);
  }
  CHECK(parse_double(format_double(0.1)) == 0.1);
  CHECK(parse_double(format_double(std::numeric_limits<double>::denorm_min())) ==
        std::numeric_limits<double>::denorm_min());
  CHECK_THROWS_AS(parse_double("1.5x"), FormatError);
}

TEST_CASE("checkpoint round-trip is exact") {
  const Checkpoint c = sample_checkpoint();
  const std::string text = to_text(c);
  CHECK(text.rfind("#verifierq-ckpt v1\n", 0) == 0);
  const Checkpoint back = from_text(text);
  CHECK(back.meta == c.meta);
  REQUIRE(back.index);
  CHECK(*back.index == *c.index);
  for (const auto& [name, head] : c.heads) {
    REQUIRE(back.has_head(name));
    CHECK(back.head(name).params() == head.params());
    CHECK(back.head(name).same_structure(head));
  }
  CHECK(back.param("adam_m") == c.param("adam_m"));
  CHECK(to_text(back) == text);
  CHECK_FALSE(back.has_head("nope"));
  CHECK_THROWS_AS(back.head("nope"), FormatError);
}

TEST_CASE("damaged checkpoints are format errors") {
  const std::string text = to_text(sample_checkpoint());
  CHECK_THROWS_AS(from_text(""), FormatError);
  CHECK_THROWS_AS(from_text("#verifierq-ckpt v2\n"), FormatError);
  CHECK_THROWS_AS(from_text("#verifierq-dataset v1 {}\n"), FormatError);
  CHECK_THROWS_AS(from_text(text.substr(0, text.size() / 2)), FormatError);
  CHECK_THROWS_AS(from_text(text.substr(0, text.size() - 4)), FormatError);
  std::string bad = text;
  bad.replace(bad.find("\nhead "), 6, "\nhxad ");
  CHECK_THROWS_AS(from_text(bad), FormatError);
}

TEST_CASE("missing checkpoint file is an error") {
  CHECK_THROWS_AS(read_checkpoint(std::filesystem::path("/nonexistent/dir/ckpt.txt")), Error);
}
