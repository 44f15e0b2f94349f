#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "verifierq/approximator.hpp"
#include "verifierq/checkpoint.hpp"
#include "verifierq/dataset.hpp"
#include "verifierq/losses.hpp"
#include "verifierq/rng.hpp"

namespace verifierq {

enum class TrainMode { verifierq, q_learning, iql, prm };
enum class OptimizerKind { sgd, adam };

std::string to_string(TrainMode m);
std::string to_string(OptimizerKind k);
std::string to_string(SignMode m);
std::string to_string(HeadMode m);
TrainMode parse_train_mode(const std::string& s);
OptimizerKind parse_optimizer(const std::string& s);
SignMode parse_sign_mode(const std::string& s);
HeadMode parse_head_mode(const std::string& s);

struct TrainerConfig {
  double gamma = 0.99;
  double alpha = 1.0;
  double alpha_soft = 0.01;
  int batch_size = 64;
  /// 0 selects the per-head default (1e-2 tabular, 1e-3 mlp).
  double learning_rate = 0.0;
  double tau1 = 0.3;
  double tau2 = 0.9;
  std::int64_t steps = 1000;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::verifierq;
  SignMode sign_mode = SignMode::literal;
  OptimizerKind optimizer = OptimizerKind::sgd;
  HeadMode head = HeadMode::tabular;
  MlpShape mlp_shape;
  int embed_dim = 16;
  BatchMode batch_mode = BatchMode::transitions;
  /// Supervised steps on theta before the main loop; -1 is one epoch,
  /// ceil(|D| / batch_size). Ignored in prm mode and when theta is given.
  std::int64_t prm_pretrain_steps = -1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool freeze_theta = false;
  bool freeze_psi = false;
  /// Wall time per step in the log; off keeps logs byte-reproducible.
  bool record_time = false;

  /// Throws ParameterError on an invalid combination.
  void validate() const;
  double effective_learning_rate() const;
  nlohmann::ordered_json to_json() const;
  static TrainerConfig from_json(const nlohmann::ordered_json& j);
};

struct TrainRecord {
  std::int64_t step = 0;
  double td = 0.0;
  double l_mu = 0.0;
  double l_pi = 0.0;
  double cql = 0.0;
  double total = 0.0;
  double theta_norm = 0.0;
  double psi_norm = 0.0;
  double ms = 0.0;

  bool operator==(const TrainRecord&) const = default;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  std::vector<std::string> checkpoints;

  /// Columns step,td,l_mu,l_pi,cql,total,theta_norm,psi_norm,ms.
  void write_csv(std::ostream& out) const;
  bool operator==(const TrainLog&) const = default;
};

/// Adaptive-moment or plain gradient descent over one ParamSet.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerKind kind, double lr, double beta1, double beta2, double eps, const Layout& layout);

  void apply(ParamSet& params, const GradVector& grad);

  OptimizerKind kind() const { return kind_; }
  std::int64_t t() const { return t_; }
  const ParamSet& m() const { return m_; }
  const ParamSet& v() const { return v_; }
  void restore(std::int64_t t, ParamSet m, ParamSet v);

 private:
  OptimizerKind kind_ = OptimizerKind::sgd;
  double lr_ = 0.0;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::int64_t t_ = 0;
  ParamSet m_;
  ParamSet v_;
};

/// Initial networks for a dataset: empty trie cells or fresh mlp weights.
struct Networks {
  QHead theta;
  QHead theta_hat;
  ValueNet psi;
};
Networks initial_networks(const OfflineDataset& ds, const TrainerConfig& cfg);

/// Order-sensitive hash of every transition.
std::uint64_t dataset_fingerprint(const OfflineDataset& ds);

/// One training run over a fixed dataset. The dataset must outlive the trainer.
class Trainer {
 public:
  /// `init_theta`, when given, replaces the initial theta and skips PRM pretraining.
  Trainer(const OfflineDataset& ds, TrainerConfig cfg, std::optional<QHead> init_theta = std::nullopt);

  /// Runs pretraining on first use, then one update of the configured mode.
  /// Throws DivergenceError on the first non-finite loss, gradient or parameter.
  const TrainRecord& step();
  /// Steps until `cfg.steps` total steps have been taken.
  void run();
  /// Moves the stopping point of run(); must not be below steps_done().
  void set_total_steps(std::int64_t steps);

  std::int64_t steps_done() const { return step_; }
  const TrainerConfig& config() const { return cfg_; }
  const QHead& theta() const { return nets_.theta; }
  const QHead& theta_hat() const { return nets_.theta_hat; }
  const ValueNet& psi() const { return nets_.psi; }
  const TrainLog& log() const { return log_; }
  TrainLog& log() { return log_; }
  const Rng& rng() const { return rng_; }
  bool pretrained() const { return pretrained_; }

  Checkpoint to_checkpoint() const;
  void save(const std::filesystem::path& path);
  /// Restores a trainer saved by save(); the dataset must be the one it was trained on.
  static Trainer resume(const OfflineDataset& ds, const std::filesystem::path& path);
  static Trainer resume(const OfflineDataset& ds, const Checkpoint& ckpt);

 private:
  void pretrain();
  std::vector<const Transition*> draw_batch();
  TrainRecord update_verifierq(const std::vector<const Transition*>& batch);
  TrainRecord update_q_learning(const std::vector<const Transition*>& batch, const std::vector<std::size_t>& idx);
  TrainRecord update_iql(const std::vector<const Transition*>& batch);
  TrainRecord update_prm(const std::vector<const Transition*>& batch);
  void apply_theta(const GradVector& g);
  void apply_psi(const GradVector& g);
  void check_finite(const TrainRecord& r) const;

  const OfflineDataset* ds_;
  TrainerConfig cfg_;
  Networks nets_;
  Optimizer opt_theta_;
  Optimizer opt_psi_;
  Rng rng_;
  std::int64_t step_ = 0;
  bool pretrained_ = false;
  TrainLog log_;
};

struct TrainResult {
  QHead theta;
  QHead theta_hat;
  ValueNet psi;
  TrainLog log;
};

TrainResult train(const OfflineDataset& ds, const TrainerConfig& cfg, std::optional<QHead> init_theta = std::nullopt);

/// Baseline verifiers: cfg.mode must be q_learning, iql or prm.
QHead train_baseline(const OfflineDataset& ds, const TrainerConfig& cfg);

}  // namespace verifierq
