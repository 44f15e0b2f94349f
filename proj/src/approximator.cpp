#include "verifierq/approximator.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "verifierq/dataset.hpp"
#include "verifierq/error.hpp"
#include "verifierq/rng.hpp"

namespace verifierq {

// ---------------------------------------------------------------------------
// Layout / ParamSet

void Layout::add(std::string name, std::size_t rows, std::size_t cols) {
  slices_.push_back(Slice{std::move(name), size_, rows, cols});
  size_ += rows * cols;
}

const Slice& Layout::slice(const std::string& name) const {
  for (const Slice& s : slices_) {
    if (s.name == name) {
      return s;
    }
  }
  throw ContractError("layout has no slice named '" + name + "'");
}

ParamSet ParamSet::zeros(Layout layout) {
  ParamSet p;
  p.values.assign(layout.size(), 0.0);
  p.layout = std::move(layout);
  return p;
}

std::span<double> ParamSet::slice(const std::string& name) {
  const Slice& s = layout.slice(name);
  return std::span<double>(values).subspan(s.offset, s.size());
}

std::span<const double> ParamSet::slice(const std::string& name) const {
  const Slice& s = layout.slice(name);
  return std::span<const double>(values).subspan(s.offset, s.size());
}

bool ParamSet::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
}

double ParamSet::norm() const {
  double s = 0.0;
  for (double x : values) {
    s += x * x;
  }
  return std::sqrt(s);
}

ParamSet polyak_update(const ParamSet& target, const ParamSet& online, double alpha_soft) {
  if (!(target.layout == online.layout) || target.values.size() != online.values.size()) {
    throw ContractError("polyak_update: layout mismatch");
  }
  if (!(alpha_soft > 0.0 && alpha_soft <= 1.0)) {
    throw ContractError("polyak_update: alpha_soft must lie in (0, 1]");
  }
  ParamSet out = target;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] = (1.0 - alpha_soft) * target.values[i] + alpha_soft * online.values[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// TabularIndex

TabularIndex::TabularIndex(int vocab_size) : vocab_(vocab_size) {
  if (vocab_size < 2) {
    throw ParameterError("tabular index needs vocab_size >= 2");
  }
}

std::int32_t TabularIndex::add_node(ProblemId problem, std::int32_t parent, ActionIndex action) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(Node{problem, parent, action});
  children_.resize(children_.size() + static_cast<std::size_t>(vocab_), kMissing);
  if (parent == kMissing) {
    auto it = std::lower_bound(roots_.begin(), roots_.end(), std::make_pair(problem, std::int32_t{0}),
                               [](const auto& a, const auto& b) { return a.first < b.first; });
    roots_.insert(it, {problem, id});
  } else {
    children_[static_cast<std::size_t>(parent) * static_cast<std::size_t>(vocab_) + action] = id;
  }
  return id;
}

std::int32_t TabularIndex::root(ProblemId problem) const {
  auto it = std::lower_bound(roots_.begin(), roots_.end(), std::make_pair(problem, std::int32_t{0}),
                             [](const auto& a, const auto& b) { return a.first < b.first; });
  return it != roots_.end() && it->first == problem ? it->second : kMissing;
}

std::int32_t TabularIndex::find(ProblemId problem, std::span<const ActionIndex> prefix) const {
  std::int32_t node = root(problem);
  for (ActionIndex a : prefix) {
    node = child(node, a);
    if (node == kMissing) {
      break;
    }
  }
  return node;
}

std::int32_t TabularIndex::insert(ProblemId problem, std::span<const ActionIndex> prefix) {
  std::int32_t node = root(problem);
  if (node == kMissing) {
    node = add_node(problem, kMissing, 0);
  }
  for (ActionIndex a : prefix) {
    if (a >= static_cast<ActionIndex>(vocab_)) {
      throw ContractError("tabular index: action out of range");
    }
    std::int32_t next = child(node, a);
    if (next == kMissing) {
      next = add_node(problem, node, a);
    }
    node = next;
  }
  return node;
}

std::shared_ptr<TabularIndex> TabularIndex::from_dataset(const OfflineDataset& ds) {
  int vocab = 2;
  for (const Problem& p : ds.problems()) {
    vocab = std::max(vocab, p.vocab_size());
  }
  auto index = std::make_shared<TabularIndex>(vocab);
  for (const Problem& p : ds.problems()) {
    index->insert(p.id(), {});
  }
  for (const Transition& t : ds.transitions()) {
    index->insert(t.next_state.problem, t.next_state.prefix);
  }
  return index;
}

std::shared_ptr<TabularIndex> TabularIndex::from_nodes(int vocab_size, const std::vector<Node>& nodes) {
  auto index = std::make_shared<TabularIndex>(vocab_size);
  for (const Node& n : nodes) {
    if (n.parent != kMissing &&
        (n.parent < 0 || static_cast<std::size_t>(n.parent) >= index->nodes_.size() ||
         n.action >= static_cast<ActionIndex>(vocab_size))) {
      throw FormatError("tabular index: bad node record");
    }
    index->add_node(n.problem, n.parent, n.action);
  }
  return index;
}

// ---------------------------------------------------------------------------
// Features

std::size_t FeatureSpec::input_size(bool with_action) const {
  const auto m = static_cast<std::size_t>(horizon);
  const auto v = static_cast<std::size_t>(vocab_size);
  return static_cast<std::size_t>(embed_dim) + m * v + m + (with_action ? v : 0);
}

void FeatureSpec::encode(ProblemId problem, std::span<const ActionIndex> prefix, const ActionIndex* action,
                         std::span<double> out) const {
  std::fill(out.begin(), out.end(), 0.0);
  const auto e = static_cast<std::size_t>(embed_dim);
  const auto m = static_cast<std::size_t>(horizon);
  const auto v = static_cast<std::size_t>(vocab_size);
  for (std::size_t j = 0; j < e; ++j) {
    out[j] = 2.0 * unit_interval(derive_seed(embed_seed, problem, j)) - 1.0;
  }
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    out[e + i * v + prefix[i]] = 1.0;
  }
  out[e + m * v + prefix.size()] = 1.0;
  if (action != nullptr) {
    out[e + m * v + m + *action] = 1.0;
  }
}

// ---------------------------------------------------------------------------
// Sigmoid head

double bounded_sigmoid(double gap) {
  const double z = std::clamp(gap, -kGapLimit, kGapLimit);
  return 1.0 / (1.0 + std::exp(-z));
}

void bounded_sigmoid(std::span<const double> gaps, std::span<double> out) {
  const std::size_t n = std::min(gaps.size(), out.size());
  const double* in = gaps.data();
  double* o = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    o[i] = bounded_sigmoid(in[i]);
  }
}

double bounded_sigmoid_slope(double gap) {
  if (gap > kGapLimit || gap < -kGapLimit) {
    return 0.0;
  }
  const double q = bounded_sigmoid(gap);
  return q * (1.0 - q);
}

namespace {

using Eigen::Map;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct MlpWeights {
  Map<const MatrixXd> w1;
  Map<const VectorXd> b1;
  Map<const MatrixXd> w2;
  Map<const VectorXd> b2;
  Map<const MatrixXd> w3;
  Map<const VectorXd> b3;
};

struct MlpGrads {
  Map<MatrixXd> w1;
  Map<VectorXd> b1;
  Map<MatrixXd> w2;
  Map<VectorXd> b2;
  Map<MatrixXd> w3;
  Map<VectorXd> b3;
};

template <typename Ptr>
auto slice_ptr(Ptr base, const Layout& layout, const char* name) {
  return base + layout.slice(name).offset;
}

MlpWeights view(const ParamSet& p, std::size_t in, const MlpShape& s) {
  const auto h1 = static_cast<Eigen::Index>(s.hidden1);
  const auto h2 = static_cast<Eigen::Index>(s.hidden2);
  const double* base = p.values.data();
  const Layout& l = p.layout;
  return MlpWeights{Map<const MatrixXd>(slice_ptr(base, l, "w1"), h1, static_cast<Eigen::Index>(in)),
                    Map<const VectorXd>(slice_ptr(base, l, "b1"), h1),
                    Map<const MatrixXd>(slice_ptr(base, l, "w2"), h2, h1),
                    Map<const VectorXd>(slice_ptr(base, l, "b2"), h2),
                    Map<const MatrixXd>(slice_ptr(base, l, "w3"), 2, h2),
                    Map<const VectorXd>(slice_ptr(base, l, "b3"), 2)};
}

MlpGrads view_mut(ParamSet& p, std::size_t in, const MlpShape& s) {
  const auto h1 = static_cast<Eigen::Index>(s.hidden1);
  const auto h2 = static_cast<Eigen::Index>(s.hidden2);
  double* base = p.values.data();
  const Layout& l = p.layout;
  return MlpGrads{Map<MatrixXd>(slice_ptr(base, l, "w1"), h1, static_cast<Eigen::Index>(in)),
                  Map<VectorXd>(slice_ptr(base, l, "b1"), h1),
                  Map<MatrixXd>(slice_ptr(base, l, "w2"), h2, h1),
                  Map<VectorXd>(slice_ptr(base, l, "b2"), h2),
                  Map<MatrixXd>(slice_ptr(base, l, "w3"), 2, h2),
                  Map<VectorXd>(slice_ptr(base, l, "b3"), 2)};
}

struct Activations {
  VectorXd x;
  VectorXd h1;
  VectorXd h2;
  Eigen::Vector2d z;
};

void forward(const MlpWeights& w, Activations& act) {
  act.h1.noalias() = w.w1 * act.x;
  act.h1 = (act.h1 + w.b1).array().tanh().matrix();
  act.h2.noalias() = w.w2 * act.h1;
  act.h2 = (act.h2 + w.b2).array().tanh().matrix();
  act.z.noalias() = w.w3 * act.h2;
  act.z += w.b3;
}

Activations& scratch(std::size_t in, const MlpShape& s) {
  thread_local Activations act;
  act.x.resize(static_cast<Eigen::Index>(in));
  act.h1.resize(s.hidden1);
  act.h2.resize(s.hidden2);
  return act;
}

}  // namespace

Approximator Approximator::tabular(std::shared_ptr<const TabularIndex> index, bool takes_action) {
  if (!index) {
    throw ParameterError("tabular head needs an index");
  }
  Approximator a;
  a.mode_ = HeadMode::tabular;
  a.takes_action_ = takes_action;
  Layout layout;
  layout.add("cells", index->node_count(), 2);
  a.params_ = ParamSet::zeros(std::move(layout));
  a.features_.vocab_size = index->vocab_size();
  a.index_ = std::move(index);
  return a;
}

Approximator Approximator::mlp(const FeatureSpec& features, const MlpShape& shape, bool takes_action,
                               std::uint64_t init_seed) {
  if (features.horizon < 1 || features.vocab_size < 2 || features.embed_dim < 0 || shape.hidden1 < 1 ||
      shape.hidden2 < 1) {
    throw ParameterError("invalid mlp configuration");
  }
  Approximator a;
  a.mode_ = HeadMode::mlp;
  a.takes_action_ = takes_action;
  a.features_ = features;
  a.shape_ = shape;
  const std::size_t in = features.input_size(takes_action);
  const auto h1 = static_cast<std::size_t>(shape.hidden1);
  const auto h2 = static_cast<std::size_t>(shape.hidden2);
  Layout layout;
  layout.add("w1", h1, in);
  layout.add("b1", h1);
  layout.add("w2", h2, h1);
  layout.add("b2", h2);
  layout.add("w3", 2, h2);
  layout.add("b3", 2);
  a.params_ = ParamSet::zeros(std::move(layout));
  // Output layer starts at zero so every initial value is exactly 0.5.
  Rng rng(derive_seed(init_seed, 0x6d6c70ULL));
  const auto fill = [&](const char* name, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& w : a.params_.slice(name)) {
      w = bound * (2.0 * rng.uniform() - 1.0);
    }
  };
  fill("w1", in);
  fill("w2", h1);
  return a;
}

bool Approximator::same_structure(const Approximator& o) const {
  return mode_ == o.mode_ && takes_action_ == o.takes_action_ && params_.layout == o.params_.layout &&
         features_ == o.features_ && shape_ == o.shape_ &&
         (mode_ == HeadMode::mlp || index_ == o.index_ || (index_ && o.index_ && *index_ == *o.index_));
}

void Approximator::check_input(const HeadInput& in) const {
  if (takes_action_ != (in.action != kNoAction)) {
    throw ContractError(takes_action_ ? "Q head needs a candidate action" : "value head takes no action");
  }
  if (in.action != kNoAction && in.action >= static_cast<ActionIndex>(features_.vocab_size)) {
    throw ContractError("action index out of range for head");
  }
  if (mode_ == HeadMode::mlp && in.prefix.size() >= static_cast<std::size_t>(features_.horizon)) {
    throw ContractError("head evaluated on a terminal state");
  }
}

std::int32_t Approximator::cell(const HeadInput& in) const {
  const std::int32_t node = index_->find(in.problem, in.prefix);
  return takes_action_ ? index_->child(node, in.action) : node;
}

std::array<double, 2> Approximator::logits(const HeadInput& in) const {
  check_input(in);
  if (mode_ == HeadMode::tabular) {
    const std::int32_t c = cell(in);
    if (c == TabularIndex::kMissing) {
      return {0.0, 0.0};
    }
    const auto off = static_cast<std::size_t>(c) * 2;
    return {params_.values[off], params_.values[off + 1]};
  }
  const std::size_t n = features_.input_size(takes_action_);
  Activations& act = scratch(n, shape_);
  features_.encode(in.problem, in.prefix, takes_action_ ? &in.action : nullptr,
                   std::span<double>(act.x.data(), n));
  forward(view(params_, n, shape_), act);
  return {act.z[0], act.z[1]};
}

void Approximator::accumulate_gap_gradient(const HeadInput& in, double dgap, GradVector& grad) const {
  check_input(in);
  if (!(grad.layout == params_.layout)) {
    throw ContractError("gradient layout mismatch");
  }
  if (mode_ == HeadMode::tabular) {
    const std::int32_t c = cell(in);
    if (c != TabularIndex::kMissing) {
      const auto off = static_cast<std::size_t>(c) * 2;
      grad.values[off] += dgap;
      grad.values[off + 1] -= dgap;
    }
    return;
  }
  const std::size_t n = features_.input_size(takes_action_);
  Activations& act = scratch(n, shape_);
  features_.encode(in.problem, in.prefix, takes_action_ ? &in.action : nullptr,
                   std::span<double>(act.x.data(), n));
  const MlpWeights w = view(params_, n, shape_);
  forward(w, act);
  MlpGrads g = view_mut(grad, n, shape_);
  const Eigen::Vector2d dz(dgap, -dgap);
  g.w3.noalias() += dz * act.h2.transpose();
  g.b3 += dz;
  VectorXd da2 = (w.w3.transpose() * dz).array() * (1.0 - act.h2.array().square());
  g.w2.noalias() += da2 * act.h1.transpose();
  g.b2 += da2;
  VectorXd da1 = (w.w2.transpose() * da2).array() * (1.0 - act.h1.array().square());
  g.w1.noalias() += da1 * act.x.transpose();
  g.b1 += da1;
}

void Approximator::chain_gaps_tabular(ProblemId problem, std::span<const ActionIndex> chain,
                                      std::span<double> out) const {
  std::int32_t node = index_->root(problem);
  for (std::size_t i = 0; i < chain.size(); ++i) {
    if (chain[i] >= static_cast<ActionIndex>(features_.vocab_size)) {
      throw ContractError("action index out of range for head");
    }
    node = index_->child(node, chain[i]);
    if (node == TabularIndex::kMissing) {
      std::fill(out.begin() + static_cast<std::ptrdiff_t>(i), out.end(), 0.0);
      return;
    }
    const auto off = static_cast<std::size_t>(node) * 2;
    out[i] = params_.values[off] - params_.values[off + 1];
  }
}

// ---------------------------------------------------------------------------
// QHead / ValueNet

QHead::QHead(Approximator core) : core_(std::move(core)) {
  if (!core_.takes_action()) {
    throw ParameterError("QHead needs an action-conditioned approximator");
  }
}

QHead QHead::tabular(std::shared_ptr<const TabularIndex> index) {
  return QHead(Approximator::tabular(std::move(index), true));
}

QHead QHead::mlp(const FeatureSpec& features, const MlpShape& shape, std::uint64_t init_seed) {
  return QHead(Approximator::mlp(features, shape, true, init_seed));
}

ValueNet::ValueNet(Approximator core) : core_(std::move(core)) {
  if (core_.takes_action()) {
    throw ParameterError("ValueNet needs a state-only approximator");
  }
}

ValueNet ValueNet::tabular(std::shared_ptr<const TabularIndex> index) {
  return ValueNet(Approximator::tabular(std::move(index), false));
}

ValueNet ValueNet::mlp(const FeatureSpec& features, const MlpShape& shape, std::uint64_t init_seed) {
  return ValueNet(Approximator::mlp(features, shape, false, init_seed));
}

double q_value(const QHead& q, const Problem& problem, const State& state, ActionIndex action) {
  if (state.problem != problem.id()) {
    throw ContractError("state belongs to a different problem");
  }
  if (is_terminal(problem, state)) {
    throw ContractError("q_value on a terminal state");
  }
  return q.core().value(HeadInput{state.problem, state.prefix, action});
}

std::vector<double> q_values_chain(const QHead& q, const Problem& problem, std::span<const ActionIndex> chain) {
  if (chain.size() > static_cast<std::size_t>(problem.horizon())) {
    throw ContractError("chain longer than horizon");
  }
  std::vector<double> out(chain.size());
  if (q.mode() == HeadMode::tabular) {
    q.core().chain_gaps_tabular(problem.id(), chain, out);
    bounded_sigmoid(out, out);
    return out;
  }
  for (std::size_t i = 0; i < chain.size(); ++i) {
    out[i] = q.core().value(HeadInput{problem.id(), chain.first(i), chain[i]});
  }
  return out;
}

double v_value(const ValueNet& v, const Problem& problem, const State& state) {
  if (state.problem != problem.id()) {
    throw ContractError("state belongs to a different problem");
  }
  if (is_terminal(problem, state)) {
    return 0.0;
  }
  return v.core().value(HeadInput{state.problem, state.prefix, kNoAction});
}

GradVector backprop_gap(const Approximator& head, std::span<const HeadInput> inputs,
                        std::span<const double> upstream_gap) {
  if (inputs.size() != upstream_gap.size()) {
    throw ContractError("backprop: inputs and upstream gradients differ in length");
  }
  GradVector g = ParamSet::zeros(head.params().layout);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!std::isfinite(upstream_gap[i])) {
      throw ContractError("backprop: non-finite upstream gradient");
    }
    if (upstream_gap[i] != 0.0) {
      head.accumulate_gap_gradient(inputs[i], upstream_gap[i], g);
    }
  }
  return g;
}

GradVector backprop(const Approximator& head, std::span<const HeadInput> inputs, std::span<const double> upstream) {
  if (inputs.size() != upstream.size()) {
    throw ContractError("backprop: inputs and upstream gradients differ in length");
  }
  std::vector<double> dgap(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!std::isfinite(upstream[i])) {
      throw ContractError("backprop: non-finite upstream gradient");
    }
    dgap[i] = upstream[i] == 0.0 ? 0.0 : upstream[i] * bounded_sigmoid_slope(head.gap(inputs[i]));
  }
  return backprop_gap(head, inputs, dgap);
}

}  // namespace verifierq
