#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "verifierq/mdp.hpp"

namespace verifierq {

class OfflineDataset;

struct Slice {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 1;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Slice&) const = default;
};

/// Named, contiguous slices that partition a flat parameter vector.
class Layout {
 public:
  void add(std::string name, std::size_t rows, std::size_t cols = 1);
  const std::vector<Slice>& slices() const { return slices_; }
  const Slice& slice(const std::string& name) const;
  std::size_t size() const { return size_; }
  bool operator==(const Layout&) const = default;

 private:
  std::vector<Slice> slices_;
  std::size_t size_ = 0;
};

struct ParamSet {
  Layout layout;
  std::vector<double> values;

  static ParamSet zeros(Layout layout);
  std::span<double> slice(const std::string& name);
  std::span<const double> slice(const std::string& name) const;
  bool all_finite() const;
  double norm() const;
  bool operator==(const ParamSet&) const = default;
};

/// Gradient with the layout of the ParamSet it differentiates.
using GradVector = ParamSet;

/// `target` moved toward `online` by `alpha_soft`: (1 - a) * target + a * online.
ParamSet polyak_update(const ParamSet& target, const ParamSet& online, double alpha_soft);

/// Prefix trie over the states seen in a dataset, one root per problem.
///
/// Node n stands for a state; the Q cell of (s, a) is the node of s + [a] and
/// the V cell of s is the node of s. Paths that were never inserted resolve
/// to kMissing and evaluate at zero logits.
class TabularIndex {
 public:
  static constexpr std::int32_t kMissing = -1;

  struct Node {
    ProblemId problem = 0;
    std::int32_t parent = kMissing;
    ActionIndex action = 0;
    bool operator==(const Node&) const = default;
  };

  explicit TabularIndex(int vocab_size);
  static std::shared_ptr<TabularIndex> from_dataset(const OfflineDataset& ds);
  static std::shared_ptr<TabularIndex> from_nodes(int vocab_size, const std::vector<Node>& nodes);

  int vocab_size() const { return vocab_; }
  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  std::int32_t root(ProblemId problem) const;
  std::int32_t child(std::int32_t node, ActionIndex a) const {
    return node == kMissing || a >= static_cast<ActionIndex>(vocab_)
               ? kMissing
               : children_[static_cast<std::size_t>(node) * static_cast<std::size_t>(vocab_) + a];
  }
  std::int32_t find(ProblemId problem, std::span<const ActionIndex> prefix) const;
  std::int32_t insert(ProblemId problem, std::span<const ActionIndex> prefix);

  bool operator==(const TabularIndex& o) const { return vocab_ == o.vocab_ && nodes_ == o.nodes_; }

 private:
  std::int32_t add_node(ProblemId problem, std::int32_t parent, ActionIndex action);

  int vocab_;
  std::vector<Node> nodes_;
  std::vector<std::int32_t> children_;
  std::vector<std::pair<ProblemId, std::int32_t>> roots_;  // sorted by problem id
};

/// Encoding of (problem, prefix[, action]) for the feed-forward head.
///
/// Blocks: fixed random problem embedding; position-tagged bag of prefix
/// steps (one-hot of (position, action) pairs); one-hot of the depth at which
/// the candidate step is taken; one-hot of the candidate action.
struct FeatureSpec {
  int horizon = 1;
  int vocab_size = 2;
  int embed_dim = 16;
  std::uint64_t embed_seed = 0x5eed;

  std::size_t input_size(bool with_action) const;
  void encode(ProblemId problem, std::span<const ActionIndex> prefix, const ActionIndex* action,
              std::span<double> out) const;
  bool operator==(const FeatureSpec&) const = default;
};

struct MlpShape {
  int hidden1 = 64;
  int hidden2 = 64;
  bool operator==(const MlpShape&) const = default;
};

enum class HeadMode { tabular, mlp };

inline constexpr ActionIndex kNoAction = ~ActionIndex{0};

/// What a head is evaluated on: a state, and the candidate step for Q heads.
struct HeadInput {
  ProblemId problem = 0;
  std::span<const ActionIndex> prefix;
  ActionIndex action = kNoAction;
};

/// Logit gaps beyond this magnitude saturate, which keeps the sigmoid
/// strictly inside (0, 1) in double precision.
inline constexpr double kGapLimit = 30.0;

double bounded_sigmoid(double gap);
/// Elementwise; bit-identical to the scalar overload. `out` may alias `gaps`.
void bounded_sigmoid(std::span<const double> gaps, std::span<double> out);
/// d bounded_sigmoid / d gap.
double bounded_sigmoid_slope(double gap);

/// Shared engine behind QHead and ValueNet: two output logits whose
/// difference goes through a sigmoid.
class Approximator {
 public:
  Approximator() = default;
  static Approximator tabular(std::shared_ptr<const TabularIndex> index, bool takes_action);
  static Approximator mlp(const FeatureSpec& features, const MlpShape& shape, bool takes_action,
                          std::uint64_t init_seed);

  HeadMode mode() const { return mode_; }
  bool takes_action() const { return takes_action_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  const std::shared_ptr<const TabularIndex>& index() const { return index_; }
  const FeatureSpec& features() const { return features_; }
  const MlpShape& shape() const { return shape_; }

  std::array<double, 2> logits(const HeadInput& in) const;
  double gap(const HeadInput& in) const {
    auto l = logits(in);
    return l[0] - l[1];
  }
  double value(const HeadInput& in) const { return bounded_sigmoid(gap(in)); }

  /// grad += dgap * d(logit+ - logit-)/d(params).
  void accumulate_gap_gradient(const HeadInput& in, double dgap, GradVector& grad) const;

  /// Tabular Q chain evaluation in one trie walk. Values match logits()
  /// step by step exactly.
  void chain_gaps_tabular(ProblemId problem, std::span<const ActionIndex> chain, std::span<double> out) const;

  /// Same structural configuration (mode, features, layout); parameters may differ.
  bool same_structure(const Approximator& o) const;

 private:
  void check_input(const HeadInput& in) const;
  std::int32_t cell(const HeadInput& in) const;

  HeadMode mode_ = HeadMode::tabular;
  bool takes_action_ = true;
  ParamSet params_;
  std::shared_ptr<const TabularIndex> index_;
  FeatureSpec features_;
  MlpShape shape_;
};

/// Q_theta(s, a) = sigmoid(logit+ - logit-).
class QHead {
 public:
  QHead() = default;
  explicit QHead(Approximator core);
  static QHead tabular(std::shared_ptr<const TabularIndex> index);
  static QHead mlp(const FeatureSpec& features, const MlpShape& shape = {}, std::uint64_t init_seed = 0);

  const Approximator& core() const { return core_; }
  Approximator& core() { return core_; }
  const ParamSet& params() const { return core_.params(); }
  ParamSet& params() { return core_.params(); }
  HeadMode mode() const { return core_.mode(); }

 private:
  Approximator core_;
};

/// V_psi(s) = sigmoid(logit+ - logit-); terminal states are 0 by convention.
class ValueNet {
 public:
  ValueNet() = default;
  explicit ValueNet(Approximator core);
  static ValueNet tabular(std::shared_ptr<const TabularIndex> index);
  static ValueNet mlp(const FeatureSpec& features, const MlpShape& shape = {}, std::uint64_t init_seed = 0);

  const Approximator& core() const { return core_; }
  Approximator& core() { return core_; }
  const ParamSet& params() const { return core_.params(); }
  ParamSet& params() { return core_.params(); }
  HeadMode mode() const { return core_.mode(); }

 private:
  Approximator core_;
};

double q_value(const QHead& q, const Problem& problem, const State& state, ActionIndex action);

/// Q of every step of `chain` from the root: element i is Q(s_i, chain[i]).
std::vector<double> q_values_chain(const QHead& q, const Problem& problem, std::span<const ActionIndex> chain);

double v_value(const ValueNet& v, const Problem& problem, const State& state);

/// Gradient of sum_i upstream[i] * head(inputs[i]) w.r.t. the head parameters.
GradVector backprop(const Approximator& head, std::span<const HeadInput> inputs, std::span<const double> upstream);
/// Same, with upstream gradients taken w.r.t. the logit gap instead of the value.
GradVector backprop_gap(const Approximator& head, std::span<const HeadInput> inputs,
                        std::span<const double> upstream_gap);

}  // namespace verifierq
