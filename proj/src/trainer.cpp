#include "verifierq/trainer.hpp"

#include <chrono>
#include <cmath>
#include <ostream>

#include "verifierq/error.hpp"

namespace verifierq {

using ordered_json = nlohmann::ordered_json;

namespace {

template <typename E>
struct Names {
  E value;
  const char* name;
};

constexpr Names<TrainMode> kModes[] = {{TrainMode::verifierq, "verifierq"},
                                       {TrainMode::q_learning, "q_learning"},
                                       {TrainMode::iql, "iql"},
                                       {TrainMode::prm, "prm"}};
constexpr Names<OptimizerKind> kOptimizers[] = {{OptimizerKind::sgd, "sgd"}, {OptimizerKind::adam, "adam"}};
constexpr Names<SignMode> kSignModes[] = {{SignMode::literal, "literal"}, {SignMode::both_positive, "both_positive"}};
constexpr Names<HeadMode> kHeads[] = {{HeadMode::tabular, "tabular"}, {HeadMode::mlp, "mlp"}};
constexpr Names<BatchMode> kBatchModes[] = {{BatchMode::transitions, "transitions"},
                                            {BatchMode::by_rollout, "by_rollout"}};

template <typename E, std::size_t N>
std::string name_of(const Names<E> (&table)[N], E v) {
  for (const auto& n : table) {
    if (n.value == v) {
      return n.name;
    }
  }
  throw ParameterError("unnamed enum value");
}

template <typename E, std::size_t N>
E parse_name(const Names<E> (&table)[N], const std::string& s, const char* what) {
  for (const auto& n : table) {
    if (s == n.name) {
      return n.value;
    }
  }
  throw ParameterError(std::string("unknown ") + what + " '" + s + "'");
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

}  // namespace

std::string to_string(TrainMode m) { return name_of(kModes, m); }
std::string to_string(OptimizerKind k) { return name_of(kOptimizers, k); }
std::string to_string(SignMode m) { return name_of(kSignModes, m); }
std::string to_string(HeadMode m) { return name_of(kHeads, m); }
TrainMode parse_train_mode(const std::string& s) { return parse_name(kModes, s, "mode"); }
OptimizerKind parse_optimizer(const std::string& s) { return parse_name(kOptimizers, s, "optimizer"); }
SignMode parse_sign_mode(const std::string& s) { return parse_name(kSignModes, s, "sign mode"); }
HeadMode parse_head_mode(const std::string& s) { return parse_name(kHeads, s, "head"); }

// ---------------------------------------------------------------------------
// Config

void TrainerConfig::validate() const {
  const auto require = [](bool ok, const char* what) {
    if (!ok) {
      throw ParameterError(what);
    }
  };
  require(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0, 1)");
  require(alpha >= 0.0 && std::isfinite(alpha), "alpha must be finite and >= 0");
  require(alpha_soft > 0.0 && alpha_soft <= 1.0, "alpha_soft must lie in (0, 1]");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(learning_rate >= 0.0 && std::isfinite(learning_rate), "learning_rate must be finite and >= 0");
  require(tau1 > 0.0 && tau1 < 1.0, "tau1 must lie in (0, 1)");
  require(tau2 > 0.0 && tau2 < 1.0, "tau2 must lie in (0, 1)");
  require(steps >= 0, "steps must be >= 0");
  require(prm_pretrain_steps >= -1, "prm_pretrain_steps must be >= -1");
  require(embed_dim >= 0, "embed_dim must be >= 0");
  require(mlp_shape.hidden1 >= 1 && mlp_shape.hidden2 >= 1, "hidden widths must be >= 1");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1 must lie in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2 must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be > 0");
}

double TrainerConfig::effective_learning_rate() const {
  if (learning_rate > 0.0) {
    return learning_rate;
  }
  return head == HeadMode::tabular ? 1e-2 : 1e-3;
}

ordered_json TrainerConfig::to_json() const {
  ordered_json j;
  j["gamma"] = gamma;
  j["alpha"] = alpha;
  j["alpha_soft"] = alpha_soft;
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["tau1"] = tau1;
  j["tau2"] = tau2;
  j["steps"] = steps;
  j["seed"] = seed;
  j["mode"] = to_string(mode);
  j["sign_mode"] = to_string(sign_mode);
  j["optimizer"] = to_string(optimizer);
  j["head"] = to_string(head);
  j["hidden1"] = mlp_shape.hidden1;
  j["hidden2"] = mlp_shape.hidden2;
  j["embed_dim"] = embed_dim;
  j["batch_mode"] = name_of(kBatchModes, batch_mode);
  j["prm_pretrain_steps"] = prm_pretrain_steps;
  j["adam_beta1"] = adam_beta1;
  j["adam_beta2"] = adam_beta2;
  j["adam_eps"] = adam_eps;
  j["freeze_theta"] = freeze_theta;
  j["freeze_psi"] = freeze_psi;
  j["record_time"] = record_time;
  return j;
}

TrainerConfig TrainerConfig::from_json(const ordered_json& j) {
  TrainerConfig c;
  try {
    c.gamma = j.at("gamma").get<double>();
    c.alpha = j.at("alpha").get<double>();
    c.alpha_soft = j.at("alpha_soft").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.tau1 = j.at("tau1").get<double>();
    c.tau2 = j.at("tau2").get<double>();
    c.steps = j.at("steps").get<std::int64_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.mode = parse_train_mode(j.at("mode").get<std::string>());
    c.sign_mode = parse_sign_mode(j.at("sign_mode").get<std::string>());
    c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
    c.head = parse_head_mode(j.at("head").get<std::string>());
    c.mlp_shape.hidden1 = j.at("hidden1").get<int>();
    c.mlp_shape.hidden2 = j.at("hidden2").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.batch_mode = parse_name(kBatchModes, j.at("batch_mode").get<std::string>(), "batch mode");
    c.prm_pretrain_steps = j.at("prm_pretrain_steps").get<std::int64_t>();
    c.adam_beta1 = j.at("adam_beta1").get<double>();
    c.adam_beta2 = j.at("adam_beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.freeze_theta = j.at("freeze_theta").get<bool>();
    c.freeze_psi = j.at("freeze_psi").get<bool>();
    c.record_time = j.at("record_time").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad trainer config: ") + e.what());
  }
  c.validate();
  return c;
}

void TrainLog::write_csv(std::ostream& out) const {
  out << "step,td,l_mu,l_pi,cql,total,theta_norm,psi_norm,ms\n";
  for (const TrainRecord& r : records) {
    out << r.step << ',' << format_double(r.td) << ',' << format_double(r.l_mu) << ',' << format_double(r.l_pi)
        << ',' << format_double(r.cql) << ',' << format_double(r.total) << ',' << format_double(r.theta_norm) << ','
        << format_double(r.psi_norm) << ',' << format_double(r.ms) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Optimizer

Optimizer::Optimizer(OptimizerKind kind, double lr, double beta1, double beta2, double eps, const Layout& layout)
    : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (kind_ == OptimizerKind::adam) {
    m_ = ParamSet::zeros(layout);
    v_ = ParamSet::zeros(layout);
  }
}

void Optimizer::apply(ParamSet& params, const GradVector& grad) {
  if (!(params.layout == grad.layout)) {
    throw ContractError("optimizer: gradient layout mismatch");
  }
  ++t_;
  if (kind_ == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.values.size(); ++i) {
      params.values[i] -= lr_ * grad.values[i];
    }
    return;
  }
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    const double g = grad.values[i];
    m_.values[i] = beta1_ * m_.values[i] + (1.0 - beta1_) * g;
    v_.values[i] = beta2_ * v_.values[i] + (1.0 - beta2_) * g * g;
    params.values[i] -= lr_ * (m_.values[i] / c1) / (std::sqrt(v_.values[i] / c2) + eps_);
  }
}

void Optimizer::restore(std::int64_t t, ParamSet m, ParamSet v) {
  t_ = t;
  if (kind_ == OptimizerKind::adam) {
    if (!(m.layout == m_.layout) || !(v.layout == v_.layout)) {
      throw FormatError("optimizer state layout mismatch");
    }
    m_ = std::move(m);
    v_ = std::move(v);
  }
}

// ---------------------------------------------------------------------------
// Networks

Networks initial_networks(const OfflineDataset& ds, const TrainerConfig& cfg) {
  if (ds.problems().empty()) {
    throw ContractError("dataset has no problems");
  }
  if (cfg.head == HeadMode::tabular) {
    std::shared_ptr<const TabularIndex> index = TabularIndex::from_dataset(ds);
    QHead q = QHead::tabular(index);
    return Networks{q, q, ValueNet::tabular(index)};
  }
  FeatureSpec f;
  f.horizon = 1;
  f.vocab_size = 2;
  for (const Problem& p : ds.problems()) {
    f.horizon = std::max(f.horizon, p.horizon());
    f.vocab_size = std::max(f.vocab_size, p.vocab_size());
  }
  f.embed_dim = cfg.embed_dim;
  QHead q = QHead::mlp(f, cfg.mlp_shape, derive_seed(cfg.seed, 0x7468ULL));
  return Networks{q, q, ValueNet::mlp(f, cfg.mlp_shape, derive_seed(cfg.seed, 0x7073ULL))};
}

std::uint64_t dataset_fingerprint(const OfflineDataset& ds) {
  std::uint64_t h = derive_seed(ds.size(), ds.problems().size());
  for (const Problem& p : ds.problems()) {
    h = hash_combine(h, p.id());
  }
  for (const Transition& t : ds.transitions()) {
    h = hash_combine(h, t.state.problem);
    h = hash_combine(h, t.state.prefix.size());
    for (ActionIndex a : t.state.prefix) {
      h = hash_combine(h, a);
    }
    h = hash_combine(h, t.action);
    h = hash_combine(h, t.rollout_id);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const OfflineDataset& ds, TrainerConfig cfg, std::optional<QHead> init_theta)
    : ds_(&ds), cfg_(std::move(cfg)), rng_(derive_seed(cfg_.seed, 0x747261696eULL)) {
  cfg_.validate();
  if (ds.empty()) {
    throw ContractError("cannot train on an empty dataset");
  }
  nets_ = initial_networks(ds, cfg_);
  if (init_theta) {
    if (!init_theta->core().same_structure(nets_.theta.core())) {
      throw ContractError("initial theta does not match the configured head for this dataset");
    }
    nets_.theta = *init_theta;
    nets_.theta_hat = *init_theta;
  }
  // Pretraining is part of initialization; an explicit theta replaces it.
  pretrained_ = init_theta.has_value() || cfg_.mode == TrainMode::prm || cfg_.prm_pretrain_steps == 0;
  const double lr = cfg_.effective_learning_rate();
  opt_theta_ = Optimizer(cfg_.optimizer, lr, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps, nets_.theta.params().layout);
  opt_psi_ = Optimizer(cfg_.optimizer, lr, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps, nets_.psi.params().layout);
}

std::vector<const Transition*> Trainer::draw_batch() {
  const Batch b = sample_batch(*ds_, cfg_.batch_size, rng_, cfg_.batch_mode);
  std::vector<const Transition*> out;
  out.reserve(b.indices.size());
  for (std::size_t i : b.indices) {
    out.push_back(&ds_->transitions()[i]);
  }
  return out;
}

void Trainer::pretrain() {
  const std::int64_t units = cfg_.batch_mode == BatchMode::transitions
                                 ? static_cast<std::int64_t>(ds_->size())
                                 : static_cast<std::int64_t>(ds_->rollouts().size());
  const std::int64_t n = cfg_.prm_pretrain_steps < 0 ? ceil_div(units, cfg_.batch_size) : cfg_.prm_pretrain_steps;
  Optimizer opt(cfg_.optimizer, cfg_.effective_learning_rate(), cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps,
                nets_.theta.params().layout);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto batch = draw_batch();
    const auto bce = bce_loss(batch, nets_.theta);
    if (!std::isfinite(bce.value)) {
      throw DivergenceError(0, "prm_pretrain_loss");
    }
    opt.apply(nets_.theta.params(), bce.grad);
    if (!nets_.theta.params().all_finite()) {
      throw DivergenceError(0, "theta");
    }
  }
  nets_.theta_hat = nets_.theta;
}

void Trainer::apply_theta(const GradVector& g) {
  if (!g.all_finite()) {
    throw DivergenceError(step_, "grads_theta");
  }
  if (!cfg_.freeze_theta) {
    opt_theta_.apply(nets_.theta.params(), g);
    if (!nets_.theta.params().all_finite()) {
      throw DivergenceError(step_, "theta");
    }
  }
}

void Trainer::apply_psi(const GradVector& g) {
  if (!g.all_finite()) {
    throw DivergenceError(step_, "grads_psi");
  }
  if (!cfg_.freeze_psi) {
    opt_psi_.apply(nets_.psi.params(), g);
    if (!nets_.psi.params().all_finite()) {
      throw DivergenceError(step_, "psi");
    }
  }
}

void Trainer::check_finite(const TrainRecord& r) const {
  const std::pair<const char*, double> terms[] = {
      {"td_loss", r.td}, {"l_mu", r.l_mu}, {"l_pi", r.l_pi}, {"cql_loss", r.cql}, {"total", r.total}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) {
      throw DivergenceError(step_, name);
    }
  }
}

TrainRecord Trainer::update_verifierq(const std::vector<const Transition*>& batch) {
  const ExpectileConfig ecfg{cfg_.tau1, cfg_.tau2};
  const LossReport rep =
      combined_loss(batch, nets_.theta, nets_.theta_hat, nets_.psi, cfg_.gamma, ecfg, cfg_.alpha, cfg_.sign_mode);
  TrainRecord r{step_, rep.td_loss, rep.l_mu, rep.l_pi, rep.cql_loss, rep.total};
  check_finite(r);
  apply_theta(rep.grads_theta);
  apply_psi(rep.grads_psi);
  return r;
}

TrainRecord Trainer::update_q_learning(const std::vector<const Transition*>& batch,
                                       const std::vector<std::size_t>& idx) {
  std::vector<double> y(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Transition& t = *batch[i];
    double next = 0.0;
    if (!t.terminal) {
      const auto j = ds_->next_in_rollout(idx[i]);
      if (j < 0) {
        throw ContractError("q_learning needs the logged next action of every non-terminal transition");
      }
      const ActionIndex a_next = ds_->transitions()[static_cast<std::size_t>(j)].action;
      next = nets_.theta_hat.core().value(HeadInput{t.next_state.problem, t.next_state.prefix, a_next});
    }
    y[i] = 0.5 * (t.reward.value() + cfg_.gamma * next);
  }
  const auto td = regression_loss(batch, nets_.theta, y);
  TrainRecord r{step_, td.value, 0.0, 0.0, 0.0, td.value};
  check_finite(r);
  apply_theta(td.grad);
  return r;
}

TrainRecord Trainer::update_iql(const std::vector<const Transition*>& batch) {
  const auto td = td_loss(batch, nets_.theta, nets_.psi, cfg_.gamma);
  const auto lv = iql_value_loss(batch, nets_.theta, nets_.psi, cfg_.tau2);
  TrainRecord r{step_, td.value, 0.0, 0.0, lv.value, td.value + lv.value};
  check_finite(r);
  apply_theta(td.grad);
  apply_psi(lv.grad);
  return r;
}

TrainRecord Trainer::update_prm(const std::vector<const Transition*>& batch) {
  const auto bce = bce_loss(batch, nets_.theta);
  TrainRecord r{step_, bce.value, 0.0, 0.0, 0.0, bce.value};
  check_finite(r);
  apply_theta(bce.grad);
  return r;
}

const TrainRecord& Trainer::step() {
  if (!pretrained_) {
    pretrain();
    pretrained_ = true;
  }
  const auto t0 = std::chrono::steady_clock::now();
  ++step_;
  const Batch b = sample_batch(*ds_, cfg_.batch_size, rng_, cfg_.batch_mode);
  std::vector<const Transition*> batch;
  batch.reserve(b.indices.size());
  for (std::size_t i : b.indices) {
    batch.push_back(&ds_->transitions()[i]);
  }
  TrainRecord r;
  switch (cfg_.mode) {
    case TrainMode::verifierq:
      r = update_verifierq(batch);
      break;
    case TrainMode::q_learning:
      r = update_q_learning(batch, b.indices);
      break;
    case TrainMode::iql:
      r = update_iql(batch);
      break;
    case TrainMode::prm:
      r = update_prm(batch);
      break;
  }
  nets_.theta_hat.params() = polyak_update(nets_.theta_hat.params(), nets_.theta.params(), cfg_.alpha_soft);
  r.theta_norm = nets_.theta.params().norm();
  r.psi_norm = nets_.psi.params().norm();
  if (!std::isfinite(r.theta_norm)) {
    throw DivergenceError(step_, "theta_norm");
  }
  if (!std::isfinite(r.psi_norm)) {
    throw DivergenceError(step_, "psi_norm");
  }
  if (cfg_.record_time) {
    r.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  log_.records.push_back(r);
  return log_.records.back();
}

void Trainer::run() {
  while (step_ < cfg_.steps) {
    step();
  }
}

void Trainer::set_total_steps(std::int64_t steps) {
  if (steps < step_) {
    throw ParameterError("total steps " + std::to_string(steps) + " below the " + std::to_string(step_) +
                         " already taken");
  }
  cfg_.steps = steps;
}

Checkpoint Trainer::to_checkpoint() const {
  Checkpoint c;
  c.meta["kind"] = "trainer";
  c.meta["config"] = cfg_.to_json();
  c.meta["step"] = step_;
  c.meta["pretrained"] = pretrained_;
  c.meta["rng"] = rng_.serialize();
  c.meta["dataset"] = dataset_fingerprint(*ds_);
  c.meta["opt_theta_t"] = opt_theta_.t();
  c.meta["opt_psi_t"] = opt_psi_.t();
  c.index = nets_.theta.core().index();
  c.heads = {{"theta", nets_.theta.core()}, {"theta_hat", nets_.theta_hat.core()}, {"psi", nets_.psi.core()}};
  if (cfg_.optimizer == OptimizerKind::adam) {
    c.params = {{"opt_theta_m", opt_theta_.m()},
                {"opt_theta_v", opt_theta_.v()},
                {"opt_psi_m", opt_psi_.m()},
                {"opt_psi_v", opt_psi_.v()}};
  }
  return c;
}

void Trainer::save(const std::filesystem::path& path) {
  write_checkpoint(to_checkpoint(), path);
  log_.checkpoints.push_back(path.string());
}

Trainer Trainer::resume(const OfflineDataset& ds, const std::filesystem::path& path) {
  return resume(ds, read_checkpoint(path));
}

Trainer Trainer::resume(const OfflineDataset& ds, const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("kind") || ckpt.meta.at("kind") != "trainer") {
    throw FormatError("checkpoint does not hold trainer state");
  }
  try {
    if (ckpt.meta.at("dataset").get<std::uint64_t>() != dataset_fingerprint(ds)) {
      throw ContractError("checkpoint was trained on a different dataset");
    }
    Trainer t(ds, TrainerConfig::from_json(ckpt.meta.at("config")));
    const auto load = [&](const char* name, const Approximator& like) {
      const Approximator& h = ckpt.head(name);
      if (!h.same_structure(like)) {
        throw FormatError(std::string("checkpoint head '") + name + "' does not match the dataset");
      }
      return h;
    };
    t.nets_.theta = QHead(load("theta", t.nets_.theta.core()));
    t.nets_.theta_hat = QHead(load("theta_hat", t.nets_.theta_hat.core()));
    t.nets_.psi = ValueNet(load("psi", t.nets_.psi.core()));
    t.step_ = ckpt.meta.at("step").get<std::int64_t>();
    t.pretrained_ = ckpt.meta.at("pretrained").get<bool>();
    t.rng_ = Rng::deserialize(ckpt.meta.at("rng").get<std::string>());
    const auto th_t = ckpt.meta.at("opt_theta_t").get<std::int64_t>();
    const auto ps_t = ckpt.meta.at("opt_psi_t").get<std::int64_t>();
    if (t.cfg_.optimizer == OptimizerKind::adam) {
      t.opt_theta_.restore(th_t, ckpt.param("opt_theta_m"), ckpt.param("opt_theta_v"));
      t.opt_psi_.restore(ps_t, ckpt.param("opt_psi_m"), ckpt.param("opt_psi_v"));
    } else {
      t.opt_theta_.restore(th_t, {}, {});
      t.opt_psi_.restore(ps_t, {}, {});
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad trainer checkpoint: ") + e.what());
  }
}

TrainResult train(const OfflineDataset& ds, const TrainerConfig& cfg, std::optional<QHead> init_theta) {
  Trainer t(ds, cfg, std::move(init_theta));
  t.run();
  return TrainResult{t.theta(), t.theta_hat(), t.psi(), t.log()};
}

QHead train_baseline(const OfflineDataset& ds, const TrainerConfig& cfg) {
  if (cfg.mode == TrainMode::verifierq) {
    throw ContractError("train_baseline: mode must be q_learning, iql or prm");
  }
  return train(ds, cfg).theta;
}

}  // namespace verifierq
