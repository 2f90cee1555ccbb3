#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <vector>

#include "qkt/data.hpp"
#include "qkt/kv_config.hpp"
#include "qkt/model.hpp"

namespace qkt::training {

// last_quiz: each training student's last quiz is the target, earlier
// quizzes the history. rolling: every quiz after the first is a target,
// predicted from the quizzes before it.
enum class TargetPolicy { last_quiz, rolling };

struct TrainConfig {
  std::size_t batch_size = 32;
  double lr0 = 1e-3;
  double decay_factor = 0.5;
  std::size_t decay_every_epochs = 3;
  std::size_t epochs = 30;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 1;
  TargetPolicy target_policy = TargetPolicy::last_quiz;
  // Share of the training students held out for checkpoint selection.
  double validation_fraction = 0.1;
  // Keep the parameters of the epoch with the best validation AUC.
  bool select_best = true;
  std::size_t threads = 1;

  void validate() const;
  KeyValues to_key_values() const;
  static TrainConfig from_key_values(const KeyValues& kv);
  bool operator==(const TrainConfig&) const = default;
};

// lr0 * decay_factor ^ floor(epoch / decay_every_epochs)
double lr_schedule(std::size_t epoch, const TrainConfig& config);

// -sum(a log y + (1 - a) log(1 - y)) + lambda * sum of squared parameters.
ad::Var loss(ad::Var predictions, std::span<const double> labels, std::span<const ad::Var> params, double lambda);

struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  static OptimizerState zeros_like(const model::ModelParams& params);
  bool operator==(const OptimizerState&) const = default;
};

// One Adam update with bias correction. Throws ContractError on shape mismatch.
void adam_step(model::ModelParams& params, const model::GradientSet& grads, OptimizerState& state, double lr,
               const TrainConfig& config);

// Deterministic split of the training students into (fit, validation),
// both sorted.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_validation(std::span<const std::size_t> students,
                                                                              double fraction, std::uint64_t seed);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // per target, including the L2 term
  double val_auc = std::numeric_limits<double>::quiet_NaN();
  double val_rmse = std::numeric_limits<double>::quiet_NaN();
  double val_r2 = std::numeric_limits<double>::quiet_NaN();

  bool operator==(const EpochLog&) const = default;
};

inline constexpr const char* kEpochLogHeader = "epoch,lr,train_loss,val_auc,val_rmse,val_r2";
void write_epoch_log_header(std::ostream& out);
void write_epoch_log_row(std::ostream& out, const EpochLog& row);

// Everything needed to continue training exactly where it stopped.
struct TrainState {
  model::ModelParams params;
  OptimizerState optimizer;
  std::size_t next_epoch = 0;
  model::ModelParams best_params;
  double best_auc = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  bool has_best = false;
  std::vector<EpochLog> log;
};

void write_train_state(std::ostream& out, const model::ModelConfig& config, const TrainState& state);
TrainState read_train_state(std::istream& in, const model::ModelConfig& config);
void save_train_state(const std::filesystem::path& path, const model::ModelConfig& config, const TrainState& state);
TrainState load_train_state(const std::filesystem::path& path, const model::ModelConfig& config);

struct TrainData {
  std::span<const data::PaddedSequence> corpus;
  std::vector<std::size_t> fit;         // students the loss is computed on
  std::vector<std::size_t> validation;  // may be empty
  const data::QMatrix* qmatrix = nullptr;
};

struct TrainResult {
  model::ModelParams params;  // selected parameters
  TrainState state;           // final state, resumable
};

using EpochCallback = std::function<void(const EpochLog&, const TrainState&)>;

// Runs epochs state.next_epoch .. config.epochs-1. Without `resume` the
// parameters are initialised from the model config. Throws NumericError with
// a description of the batch when the loss or a gradient is not finite.
TrainResult train(const model::ModelConfig& model_config, const TrainConfig& config, const TrainData& data,
                  const TrainState* resume = nullptr, const EpochCallback& on_epoch = {});

// Sum of the data loss of one student under the configured target policy,
// accumulated into grads. Returns the loss value and the target count.
std::pair<double, std::size_t> student_loss(const model::ModelConfig& model_config, TargetPolicy policy,
                                            const model::ModelParams& params, const data::PaddedSequence& sequence,
                                            const data::QMatrix& qmatrix, model::GradientSet& grads);

}  // namespace qkt::training
