#include "qkt/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

#include "binary_io.hpp"
#include "qkt/error.hpp"
#include "qkt/metrics.hpp"
#include "qkt/random.hpp"

namespace qkt::training {

using model::GradientSet;
using model::ModelConfig;
using model::ModelParams;

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw ConfigError("lr0 must be a positive finite value");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("decay_factor must lie in (0, 1]");
  if (decay_every_epochs == 0) throw ConfigError("decay_every_epochs must be at least 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be positive");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction must lie in [0, 1)");
  }
  if (threads == 0) throw ConfigError("threads must be at least 1");
}

KeyValues TrainConfig::to_key_values() const {
  return {
      {"batch_size", std::to_string(batch_size)},
      {"lr0", format_double(lr0)},
      {"decay_factor", format_double(decay_factor)},
      {"decay_every_epochs", std::to_string(decay_every_epochs)},
      {"epochs", std::to_string(epochs)},
      {"adam_beta1", format_double(adam_beta1)},
      {"adam_beta2", format_double(adam_beta2)},
      {"adam_epsilon", format_double(adam_epsilon)},
      {"seed", std::to_string(seed)},
      {"target_policy", target_policy == TargetPolicy::last_quiz ? "last_quiz" : "rolling"},
      {"validation_fraction", format_double(validation_fraction)},
      {"select_best", select_best ? "true" : "false"},
      {"threads", std::to_string(threads)},
  };
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) {
  TrainConfig c;
  const KeyValues known = c.to_key_values();
  for (const auto& [key, value] : kv) {
    if (!known.contains(key)) throw ConfigError("unknown training config key '" + key + "'");
  }
  if (kv.contains("batch_size")) c.batch_size = get_uint(kv, "batch_size");
  if (kv.contains("lr0")) c.lr0 = get_double(kv, "lr0");
  if (kv.contains("decay_factor")) c.decay_factor = get_double(kv, "decay_factor");
  if (kv.contains("decay_every_epochs")) c.decay_every_epochs = get_uint(kv, "decay_every_epochs");
  if (kv.contains("epochs")) c.epochs = get_uint(kv, "epochs");
  if (kv.contains("adam_beta1")) c.adam_beta1 = get_double(kv, "adam_beta1");
  if (kv.contains("adam_beta2")) c.adam_beta2 = get_double(kv, "adam_beta2");
  if (kv.contains("adam_epsilon")) c.adam_epsilon = get_double(kv, "adam_epsilon");
  if (kv.contains("seed")) c.seed = get_uint(kv, "seed");
  if (kv.contains("target_policy")) {
    const std::string& v = get_string(kv, "target_policy");
    if (v == "last_quiz") c.target_policy = TargetPolicy::last_quiz;
    else if (v == "rolling") c.target_policy = TargetPolicy::rolling;
    else throw ConfigError("target_policy must be 'last_quiz' or 'rolling', got '" + v + "'");
  }
  if (kv.contains("validation_fraction")) c.validation_fraction = get_double(kv, "validation_fraction");
  if (kv.contains("select_best")) c.select_best = get_bool(kv, "select_best");
  if (kv.contains("threads")) c.threads = get_uint(kv, "threads");
  return c;
}

double lr_schedule(std::size_t epoch, const TrainConfig& config) {
  return config.lr0 * std::pow(config.decay_factor, static_cast<double>(epoch / config.decay_every_epochs));
}

// ---------------------------------------------------------------------------
// Loss and optimizer

ad::Var loss(ad::Var predictions, std::span<const double> labels, std::span<const ad::Var> params, double lambda) {
  ad::Var total = ad::binary_cross_entropy(predictions, labels);
  if (lambda == 0.0 || params.empty()) return total;
  ad::Var squares = ad::sum_squares(params.front());
  for (std::size_t i = 1; i < params.size(); ++i) squares = ad::add(squares, ad::sum_squares(params[i]));
  return ad::add(total, ad::affine(squares, lambda, 0.0));
}

OptimizerState OptimizerState::zeros_like(const ModelParams& params) {
  OptimizerState s;
  for (const auto& e : params.entries()) {
    s.m.emplace_back(e.tensor.numel(), 0.0);
    s.v.emplace_back(e.tensor.numel(), 0.0);
  }
  return s;
}

void adam_step(ModelParams& params, const GradientSet& grads, OptimizerState& state, double lr,
               const TrainConfig& config) {
  auto& entries = params.entries();
  if (grads.buffers.size() != entries.size() || state.m.size() != entries.size() || state.v.size() != entries.size()) {
    throw ContractError("adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::size_t n = entries[i].tensor.numel();
    if (grads.buffers[i].size() != n || state.m[i].size() != n || state.v[i].size() != n) {
      throw ContractError("adam_step: shape mismatch for '" + entries[i].name + "'");
    }
  }
  ++state.step;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto values = entries[i].tensor.values();
    const auto& g = grads.buffers[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      values[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config.adam_epsilon);
    }
  }
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_validation(std::span<const std::size_t> students,
                                                                              double fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(students.begin(), students.end());
  std::size_t held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(order.size())));
  if (fraction > 0.0 && order.size() >= 2) held = std::clamp<std::size_t>(held, 1, order.size() - 1);
  else held = 0;
  Rng rng(derive_seed(seed, 0x76616c));
  rng.shuffle(std::span(order));
  std::vector<std::size_t> validation(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> fit(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(fit.begin(), fit.end());
  std::sort(validation.begin(), validation.end());
  return {fit, validation};
}

// ---------------------------------------------------------------------------
// Epoch log

void write_epoch_log_header(std::ostream& out) { out << kEpochLogHeader << '\n'; }

void write_epoch_log_row(std::ostream& out, const EpochLog& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.lr, r.train_loss, r.val_auc,
                r.val_rmse, r.val_r2);
  out << buf;
}

// ---------------------------------------------------------------------------
// Resumable state

namespace {

constexpr char kStateMagic[8] = {'Q', 'K', 'T', 'S', 'T', 'A', 'T', '1'};

void put_values(std::ostream& out, std::span<const double> values) {
  for (double v : values) io::put<double>(out, v);
}

void take_values(std::istream& in, std::span<double> values) {
  for (double& v : values) v = io::take<double>(in, "state values");
}

}  // namespace

void write_train_state(std::ostream& out, const ModelConfig& config, const TrainState& s) {
  out.write(kStateMagic, sizeof(kStateMagic));
  model::write_checkpoint(out, config, s.params);
  for (const auto& m : s.optimizer.m) put_values(out, m);
  for (const auto& v : s.optimizer.v) put_values(out, v);
  io::put<std::uint64_t>(out, s.optimizer.step);
  io::put<std::uint64_t>(out, s.next_epoch);
  io::put<std::uint8_t>(out, s.has_best ? 1 : 0);
  io::put<double>(out, s.best_auc);
  io::put<std::uint64_t>(out, s.best_epoch);
  if (s.has_best) {
    for (const auto& e : s.best_params.entries()) put_values(out, e.tensor.values());
  }
  io::put<std::uint64_t>(out, s.log.size());
  for (const auto& r : s.log) {
    io::put<std::uint64_t>(out, r.epoch);
    for (double v : {r.lr, r.train_loss, r.val_auc, r.val_rmse, r.val_r2}) io::put<double>(out, v);
  }
  if (!out) throw Error("training state: write failed");
}

TrainState read_train_state(std::istream& in, const ModelConfig& config) {
  char magic[sizeof(kStateMagic)];
  if (!in.read(magic, sizeof(magic)) || !std::equal(magic, magic + sizeof(magic), kStateMagic)) {
    throw DataError("not a QKT training state (bad magic)");
  }
  model::Checkpoint ck = model::read_checkpoint(in);
  model::check_compatible(ck.config, config);
  TrainState s;
  s.params = std::move(ck.params);
  s.optimizer = OptimizerState::zeros_like(s.params);
  for (auto& m : s.optimizer.m) take_values(in, m);
  for (auto& v : s.optimizer.v) take_values(in, v);
  s.optimizer.step = io::take<std::uint64_t>(in, "step");
  s.next_epoch = io::take<std::uint64_t>(in, "epoch");
  s.has_best = io::take<std::uint8_t>(in, "best flag") != 0;
  s.best_auc = io::take<double>(in, "best auc");
  s.best_epoch = io::take<std::uint64_t>(in, "best epoch");
  if (s.has_best) {
    s.best_params = s.params;
    for (auto& e : s.best_params.entries()) take_values(in, e.tensor.values());
  }
  const auto rows = io::take<std::uint64_t>(in, "log length");
  if (rows > (1u << 24)) throw DataError("training state: implausible log length");
  for (std::uint64_t i = 0; i < rows; ++i) {
    EpochLog r;
    r.epoch = io::take<std::uint64_t>(in, "log");
    r.lr = io::take<double>(in, "log");
    r.train_loss = io::take<double>(in, "log");
    r.val_auc = io::take<double>(in, "log");
    r.val_rmse = io::take<double>(in, "log");
    r.val_r2 = io::take<double>(in, "log");
    s.log.push_back(r);
  }
  return s;
}

void save_train_state(const std::filesystem::path& path, const ModelConfig& config, const TrainState& state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  write_train_state(out, config, state);
}

TrainState load_train_state(const std::filesystem::path& path, const ModelConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open training state '" + path.string() + "'");
  return read_train_state(in, config);
}

// ---------------------------------------------------------------------------
// Training loop

std::pair<double, std::size_t> student_loss(const ModelConfig& model_config, TargetPolicy policy,
                                            const ModelParams& params, const data::PaddedSequence& seq,
                                            const data::QMatrix& qmatrix, GradientSet& grads) {
  const std::size_t quizzes = seq.real_quizzes();
  if (quizzes < 2) throw ContractError("student '" + seq.student_id + "' has fewer than 2 quizzes");
  std::vector<model::PrefixTarget> prefixes;
  std::vector<std::vector<double>> labels;
  const std::size_t first = policy == TargetPolicy::rolling ? 1 : quizzes - 1;
  for (std::size_t t = first; t < quizzes; ++t) {
    model::PrefixTarget p{t, {}};
    std::vector<double> y;
    for (std::size_t l = 0; l < seq.quiz_length; ++l) {
      const std::size_t s = seq.slot(t, l);
      if (!seq.slot_mask[s]) continue;
      p.exercises.push_back(seq.exercises[s]);
      y.push_back(seq.answers[s]);
    }
    prefixes.push_back(std::move(p));
    labels.push_back(std::move(y));
  }

  ad::Tape tape;
  model::Network net(tape, model_config, params, grads);
  const auto predictions = net.forward_prefixes(seq, prefixes, qmatrix);
  ad::Var total = ad::binary_cross_entropy(predictions[0], labels[0]);
  std::size_t targets = labels[0].size();
  for (std::size_t i = 1; i < predictions.size(); ++i) {
    total = ad::add(total, ad::binary_cross_entropy(predictions[i], labels[i]));
    targets += labels[i].size();
  }
  const double value = total.value()[0];
  if (!std::isfinite(value)) return {value, targets};
  tape.backward(total);
  return {value, targets};
}

namespace {

[[noreturn]] void numeric_failure(const std::string& what, std::size_t epoch, std::size_t batch,
                                  std::span<const std::size_t> students, std::span<const double> losses,
                                  const TrainData& data, const ModelParams& params) {
  std::ostringstream msg;
  msg << what << " at epoch " << epoch << ", batch " << batch << "\n  students:";
  for (std::size_t i = 0; i < students.size(); ++i) {
    msg << ' ' << data.corpus[students[i]].student_id;
    if (i < losses.size()) msg << " (loss " << losses[i] << ')';
  }
  msg << "\n  parameter norms:";
  for (const auto& e : params.entries()) {
    double s = 0.0;
    for (double v : e.tensor.values()) s += v * v;
    msg << ' ' << e.name << '=' << std::sqrt(s);
  }
  throw NumericError(msg.str());
}

}  // namespace

TrainResult train(const ModelConfig& model_config, const TrainConfig& config, const TrainData& data,
                  const TrainState* resume, const EpochCallback& on_epoch) {
  model_config.validate();
  config.validate();
  if (data.qmatrix == nullptr) throw ContractError("train: no Q-matrix");
  if (data.fit.empty()) throw ContractError("train: no training students");

  TrainState state;
  if (resume != nullptr) {
    state = *resume;
  } else {
    state.params = ModelParams::initialize(model_config);
    state.optimizer = OptimizerState::zeros_like(state.params);
  }
  const std::size_t threads = std::min(config.threads, config.batch_size);
  std::vector<GradientSet> partial(threads, GradientSet::zeros_like(state.params));

  for (std::size_t epoch = state.next_epoch; epoch < config.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, config);
    std::vector<std::size_t> order = data.fit;
    Rng rng(derive_seed(config.seed, epoch));
    rng.shuffle(std::span(order));

    double epoch_loss = 0.0;
    std::size_t epoch_targets = 0;
    for (std::size_t begin = 0, batch = 0; begin < order.size(); begin += config.batch_size, ++batch) {
      const std::span<const std::size_t> students(order.data() + begin,
                                                  std::min(config.batch_size, order.size() - begin));
      std::vector<double> losses(students.size());
      std::vector<std::size_t> counts(students.size());
      const std::size_t workers = std::min(threads, students.size());
      const std::size_t chunk = (students.size() + workers - 1) / workers;
      std::vector<std::string> numeric(workers);
      std::vector<std::exception_ptr> errors(workers);
      auto work = [&](std::size_t w) {
        try {
          partial[w].zero();
          for (std::size_t i = w * chunk; i < std::min(students.size(), (w + 1) * chunk); ++i) {
            std::tie(losses[i], counts[i]) = student_loss(model_config, config.target_policy, state.params,
                                                          data.corpus[students[i]], *data.qmatrix, partial[w]);
          }
        } catch (const NumericError& e) {
          numeric[w] = e.what();
        } catch (...) {
          errors[w] = std::current_exception();
        }
      };
      if (workers == 1) {
        work(0);
      } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
        for (auto& t : pool) t.join();
      }
      for (std::size_t w = 0; w < workers; ++w) {
        if (errors[w]) std::rethrow_exception(errors[w]);
        if (!numeric[w].empty()) {
          numeric_failure("numeric failure (" + numeric[w] + ")", epoch, batch, students, {}, data, state.params);
        }
      }
      GradientSet& grads = partial[0];
      for (std::size_t w = 1; w < workers; ++w) grads.add(partial[w]);

      double batch_loss = 0.0;
      for (std::size_t i = 0; i < students.size(); ++i) {
        batch_loss += losses[i];
        epoch_targets += counts[i];
      }
      if (!std::isfinite(batch_loss)) {
        numeric_failure("non-finite loss", epoch, batch, students, losses, data, state.params);
      }
      // L2 term, once per batch.
      const double lambda = model_config.lambda_reg;
      if (lambda != 0.0) {
        batch_loss += lambda * state.params.sum_squares();
        for (std::size_t p = 0; p < grads.buffers.size(); ++p) {
          const auto values = state.params.entries()[p].tensor.values();
          for (std::size_t k = 0; k < values.size(); ++k) grads.buffers[p][k] += 2.0 * lambda * values[k];
        }
      }
      if (!grads.all_finite()) {
        numeric_failure("non-finite gradient", epoch, batch, students, losses, data, state.params);
      }
      epoch_loss += batch_loss;
      adam_step(state.params, grads, state.optimizer, lr, config);
    }

    EpochLog row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = epoch_loss / static_cast<double>(std::max<std::size_t>(1, epoch_targets));
    if (!data.validation.empty()) {
      const auto scored = metrics::score_last_quiz(model_config, state.params, data.corpus, data.validation,
                                                   *data.qmatrix, config.threads);
      row.val_rmse = metrics::rmse(scored.scores, scored.labels);
      try {
        row.val_auc = metrics::auc(scored.scores, scored.labels);
        row.val_r2 = metrics::r_squared(scored.scores, scored.labels);
      } catch (const NumericError&) {
        // Single-class validation labels or constant predictions: left undefined.
      }
    }
    if (row.val_auc > state.best_auc) {
      state.best_auc = row.val_auc;
      state.best_epoch = epoch;
      state.best_params = state.params;
      state.has_best = true;
    }
    state.log.push_back(row);
    state.next_epoch = epoch + 1;
    if (on_epoch) on_epoch(row, state);
  }

  TrainResult result;
  result.params = config.select_best && state.has_best ? state.best_params : state.params;
  result.state = std::move(state);
  return result;
}

}  // namespace qkt::training
