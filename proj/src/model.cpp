#include "qkt/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "qkt/error.hpp"
#include "qkt/random.hpp"
#include "binary_io.hpp"

namespace qkt::model {

using ad::Shape;
using io::put;
using io::take;
using io::take_string;

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  if (dim == 0) throw ConfigError("dim must be at least 1");
  if (num_exercises == 0) throw ConfigError("num_exercises must be at least 1");
  if (num_kcs == 0) throw ConfigError("num_kcs must be at least 1");
  if (quiz_length == 0) throw ConfigError("quiz_length must be at least 1");
  if (quiz_count < 2) throw ConfigError("quiz_count must be at least 2");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be a finite value >= 0");
  if (!(lambda_reg >= 0.0) || !std::isfinite(lambda_reg)) {
    throw ConfigError("lambda_reg must be a finite value >= 0");
  }
  if (!use_sub && !use_com) throw ConfigError("use_sub and use_com cannot both be disabled");
}

KeyValues ModelConfig::to_key_values() const {
  auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
  return {
      {"dim", std::to_string(dim)},
      {"num_exercises", std::to_string(num_exercises)},
      {"num_kcs", std::to_string(num_kcs)},
      {"quiz_length", std::to_string(quiz_length)},
      {"quiz_count", std::to_string(quiz_count)},
      {"gamma", format_double(gamma)},
      {"use_ki", flag(use_ki)},
      {"use_sub", flag(use_sub)},
      {"use_com", flag(use_com)},
      {"use_ra", flag(use_ra)},
      {"lambda_reg", format_double(lambda_reg)},
      {"seed", std::to_string(seed)},
      {"gate_bias", gate_bias == GateBias::inside ? "inside" : "outside"},
      {"candidate", candidate == Candidate::reset_after ? "reset_after" : "reset_before"},
  };
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  ModelConfig c;
  const KeyValues known = c.to_key_values();
  for (const auto& [key, value] : kv) {
    if (!known.contains(key)) throw ConfigError("unknown model config key '" + key + "'");
  }
  if (kv.contains("dim")) c.dim = get_uint(kv, "dim");
  if (kv.contains("num_exercises")) c.num_exercises = get_uint(kv, "num_exercises");
  if (kv.contains("num_kcs")) c.num_kcs = get_uint(kv, "num_kcs");
  if (kv.contains("quiz_length")) c.quiz_length = get_uint(kv, "quiz_length");
  if (kv.contains("quiz_count")) c.quiz_count = get_uint(kv, "quiz_count");
  if (kv.contains("gamma")) c.gamma = get_double(kv, "gamma");
  if (kv.contains("use_ki")) c.use_ki = get_bool(kv, "use_ki");
  if (kv.contains("use_sub")) c.use_sub = get_bool(kv, "use_sub");
  if (kv.contains("use_com")) c.use_com = get_bool(kv, "use_com");
  if (kv.contains("use_ra")) c.use_ra = get_bool(kv, "use_ra");
  if (kv.contains("lambda_reg")) c.lambda_reg = get_double(kv, "lambda_reg");
  if (kv.contains("seed")) c.seed = get_uint(kv, "seed");
  if (kv.contains("gate_bias")) {
    const std::string& v = get_string(kv, "gate_bias");
    if (v == "inside") c.gate_bias = GateBias::inside;
    else if (v == "outside") c.gate_bias = GateBias::outside;
    else throw ConfigError("gate_bias must be 'inside' or 'outside', got '" + v + "'");
  }
  if (kv.contains("candidate")) {
    const std::string& v = get_string(kv, "candidate");
    if (v == "reset_after") c.candidate = Candidate::reset_after;
    else if (v == "reset_before") c.candidate = Candidate::reset_before;
    else throw ConfigError("candidate must be 'reset_after' or 'reset_before', got '" + v + "'");
  }
  return c;
}

void check_compatible(const ModelConfig& ckpt, const ModelConfig& req) {
  auto differs = [](const char* field, const std::string& a, const std::string& b) {
    throw ConfigError(std::string("checkpoint incompatible: ") + field + " is " + a + " in the checkpoint but " + b +
                      " was requested");
  };
  const KeyValues a = ckpt.to_key_values();
  const KeyValues b = req.to_key_values();
  for (const char* key : {"dim", "num_exercises", "num_kcs", "use_ki", "use_sub", "use_com", "use_ra", "gamma",
                          "gate_bias", "candidate"}) {
    if (a.at(key) != b.at(key)) differs(key, a.at(key), b.at(key));
  }
}

// ---------------------------------------------------------------------------
// Parameters

std::vector<std::pair<std::string, Shape>> ModelParams::layout(const ModelConfig& c) {
  const std::size_t d = c.dim;
  std::vector<std::pair<std::string, Shape>> out{
      {"exercise_embedding", {c.num_exercises, d}},
      {"kc_embedding", {c.num_kcs, d}},
      {"W1", {d, d}},
      {"b1", {d}},
      {"W_right", {d, d}},
      {"b_right", {d}},
      {"W_wrong", {d, d}},
      {"b_wrong", {d}},
  };
  if (c.use_ki) {
    out.push_back({"W2", {2 * d, d}});
    out.push_back({"b2", {d}});
  }
  if (c.use_sub) {
    for (const char* k : {"3", "4", "5"}) {
      out.push_back({std::string("W") + k, {2 * d, d}});
      out.push_back({std::string("b") + k, {d}});
    }
  }
  if (c.use_com) {
    out.push_back({"W_query", {d, d}});
    out.push_back({"W_key", {d, d}});
    out.push_back({"W_value", {d, d}});
  }
  out.push_back({"W6", {d, d}});
  out.push_back({"b6", {d}});
  out.push_back({"W7", {3 * d, d}});
  out.push_back({"b7", {d}});
  out.push_back({"W8", {d, 1}});
  out.push_back({"b8", {1}});
  return out;
}

ModelParams ModelParams::initialize(const ModelConfig& config) {
  config.validate();
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.dim));
  Rng rng(config.seed);
  ModelParams params;
  for (auto& [name, shape] : layout(config)) {
    std::vector<double> values(ad::shape_numel(shape));
    for (double& v : values) v = rng.uniform(-bound, bound);
    params.add(name, Tensor(shape, std::move(values)));
  }
  return params;
}

void ModelParams::add(std::string name, Tensor tensor) {
  if (contains(name)) throw ContractError("duplicate parameter '" + name + "'");
  entries_.push_back({std::move(name), std::move(tensor)});
}

const Tensor* ModelParams::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

std::size_t ModelParams::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  throw ContractError("no parameter named '" + name + "'");
}

Tensor& ModelParams::at(const std::string& name) { return entries_[index_of(name)].tensor; }
const Tensor& ModelParams::at(const std::string& name) const { return entries_[index_of(name)].tensor; }

std::size_t ModelParams::num_values() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

double ModelParams::sum_squares() const {
  double s = 0.0;
  for (const auto& e : entries_) {
    for (double v : e.tensor.values()) s += v * v;
  }
  return s;
}

bool ModelParams::operator==(const ModelParams& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.tensor.shape() != b.tensor.shape()) return false;
    if (!std::ranges::equal(a.tensor.values(), b.tensor.values())) return false;
  }
  return true;
}

GradientSet GradientSet::zeros_like(const ModelParams& params) {
  GradientSet g;
  for (const auto& e : params.entries()) g.buffers.emplace_back(e.tensor.numel(), 0.0);
  return g;
}

void GradientSet::zero() {
  for (auto& b : buffers) std::fill(b.begin(), b.end(), 0.0);
}

void GradientSet::add(const GradientSet& other) {
  if (other.buffers.size() != buffers.size()) throw ContractError("GradientSet::add: parameter count differs");
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    if (other.buffers[i].size() != buffers[i].size()) throw ContractError("GradientSet::add: buffer size differs");
    for (std::size_t k = 0; k < buffers[i].size(); ++k) buffers[i][k] += other.buffers[i][k];
  }
}

bool GradientSet::all_finite() const {
  for (const auto& b : buffers) {
    for (double v : b) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Network

Network::Network(Tape& tape, const ModelConfig& config, const ModelParams* params, GradientSet* grads,
                 ModelParams* own)
    : tape_(&tape), config_(&config), params_(params), grads_(grads), own_(own), bound_(params->size()) {
  config.validate();
  if (grads_ != nullptr && grads_->buffers.size() != params_->size()) {
    throw ContractError("gradient set does not match the parameters");
  }
}

Network::Network(Tape& tape, const ModelConfig& config, const ModelParams& params)
    : Network(tape, config, &params, nullptr, nullptr) {}

Network::Network(Tape& tape, const ModelConfig& config, const ModelParams& params, GradientSet& grads)
    : Network(tape, config, &params, &grads, nullptr) {}

Network Network::with_own_gradients(Tape& tape, const ModelConfig& config, ModelParams& params) {
  for (auto& e : params.entries()) e.tensor.set_requires_grad(true);
  return Network(tape, config, &params, nullptr, &params);
}

Var Network::param(const std::string& name) {
  const std::size_t idx = params_->index_of(name);
  if (!bound_[idx]) {
    if (own_ != nullptr) {
      bound_[idx] = tape_->leaf(own_->entries()[idx].tensor);
    } else if (grads_ != nullptr) {
      bound_[idx] = tape_->leaf(params_->entries()[idx].tensor, grads_->buffers[idx]);
    } else {
      bound_[idx] = tape_->constant_ref(params_->entries()[idx].tensor);
    }
  }
  return *bound_[idx];
}

namespace {

Var linear(Var x, Var w, Var b) { return ad::add_row(ad::matmul(x, w), b); }

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

std::size_t count_set(std::span<const std::uint8_t> mask) {
  return static_cast<std::size_t>(std::ranges::count_if(mask, [](std::uint8_t m) { return m != 0; }));
}

}  // namespace

Var Network::embed_exercises(std::span<const std::size_t> exercises, const data::QMatrix& qmatrix) {
  if (exercises.empty()) throw ContractError("embed_exercises: no exercises");
  std::vector<std::size_t> flat;
  bool single = true;
  for (std::size_t e : exercises) {
    if (e >= config_->num_exercises || e >= qmatrix.num_exercises()) {
      throw ContractError("embed_exercises: exercise " + std::to_string(e) + " out of range");
    }
    const auto& kcs = qmatrix.kcs_of(e);
    if (kcs.empty()) throw ContractError("embed_exercises: exercise " + std::to_string(e) + " has no KC");
    single = single && kcs.size() == 1;
    for (std::size_t k : kcs) {
      if (k >= config_->num_kcs) throw ContractError("embed_exercises: KC " + std::to_string(k) + " out of range");
      flat.push_back(k);
    }
  }
  Var e = ad::gather_rows(param("exercise_embedding"), exercises);
  Var kc_rows = ad::gather_rows(param("kc_embedding"), flat);
  Var kbar = kc_rows;
  if (!single) {
    // Averaging matrix: row n holds 1/c over the c KCs of exercise n.
    const std::size_t n = exercises.size(), m = flat.size();
    std::vector<double> avg(n * m, 0.0);
    std::size_t col = 0;
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t c = qmatrix.kcs_of(exercises[r]).size();
      for (std::size_t i = 0; i < c; ++i) avg[r * m + col + i] = 1.0 / static_cast<double>(c);
      col += c;
    }
    kbar = ad::matmul(tape_->constant(Tensor({n, m}, std::move(avg))), kc_rows);
  }
  return ad::relu(linear(ad::add(e, kbar), param("W1"), param("b1")));
}

Var Network::encode_interactions(Var exercise_vectors, std::span<const std::uint8_t> answers) {
  const std::size_t n = exercise_vectors.value().rows();
  if (answers.size() != n) throw DimensionError("encode_interactions: answer count does not match rows");
  std::vector<std::size_t> right, wrong;
  for (std::size_t r = 0; r < n; ++r) {
    if (answers[r] > 1) throw ContractError("encode_interactions: answer must be 0 or 1");
    (answers[r] ? right : wrong).push_back(r);
  }
  if (wrong.empty()) return linear(exercise_vectors, param("W_right"), param("b_right"));
  if (right.empty()) return linear(exercise_vectors, param("W_wrong"), param("b_wrong"));
  Var r = linear(ad::gather_rows(exercise_vectors, right), param("W_right"), param("b_right"));
  Var w = linear(ad::gather_rows(exercise_vectors, wrong), param("W_wrong"), param("b_wrong"));
  // Undo the right/wrong grouping.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < right.size(); ++i) order[right[i]] = i;
  for (std::size_t i = 0; i < wrong.size(); ++i) order[wrong[i]] = right.size() + i;
  return ad::gather_rows(ad::concat(r, w, 0), order);
}

Var Network::adjacent_gate_combine(Var previous, Var current, Var* gates) {
  Var pre = ad::matmul(ad::concat(previous, current, 1), param("W2"));
  Var gate = config_->gate_bias == GateBias::inside ? ad::sigmoid(ad::add_row(pre, param("b2")))
                                                    : ad::add_row(ad::sigmoid(pre), param("b2"));
  if (gates != nullptr) *gates = gate;
  return ad::add(ad::mul(gate, current), ad::mul(ad::affine(gate, -1.0, 1.0), previous));
}

Var Network::quiz_pool(Var combined, std::span<const std::uint8_t> mask) {
  if (count_set(mask) == 0) throw ContractError("quiz_pool: empty quiz");
  return ad::masked_mean(combined, mask);
}

std::vector<GruStep> Network::substitution_path(Var quizzes, std::span<const std::uint8_t> mask) {
  const std::size_t n = quizzes.value().rows(), d = config_->dim;
  if (mask.size() != n) throw DimensionError("substitution_path: mask does not match quiz rows");
  if (count_set(mask) == 0) throw ContractError("substitution_path: no real quiz");
  Var W3 = param("W3"), W4 = param("W4"), W5 = param("W5");
  Var b3 = param("b3"), b4 = param("b4"), b5 = param("b5");
  Var state = tape_->constant(Tensor::zeros({1, d}));
  std::vector<GruStep> steps;
  for (std::size_t j = 0; j < n; ++j) {
    if (!mask[j]) continue;
    const std::size_t row[] = {j};
    Var q = ad::gather_rows(quizzes, row);
    Var in = ad::concat(state, q, 1);
    GruStep step;
    step.reset = ad::sigmoid(linear(in, W3, b3));
    step.update = ad::sigmoid(linear(in, W4, b4));
    if (config_->candidate == Candidate::reset_after) {
      step.candidate = ad::tanh(ad::add_row(ad::mul(step.reset, ad::matmul(in, W5)), b5));
    } else {
      step.candidate = ad::tanh(linear(ad::concat(ad::mul(step.reset, state), q, 1), W5, b5));
    }
    step.state = ad::add(ad::mul(ad::affine(step.update, -1.0, 1.0), state), ad::mul(step.update, step.candidate));
    state = step.state;
    steps.push_back(step);
  }
  return steps;
}

std::vector<double> recency_offsets(std::span<const std::uint8_t> mask, double gamma) {
  const std::size_t real = count_set(mask);
  std::vector<double> out(mask.size(), 0.0);
  if (real == 0) return out;
  auto softmax = [real](auto logit) {
    std::vector<double> p(real);
    double top = logit(1);
    for (std::size_t r = 1; r <= real; ++r) top = std::max(top, logit(r));
    double norm = 0.0;
    for (std::size_t r = 1; r <= real; ++r) norm += p[r - 1] = std::exp(logit(r) - top);
    for (double& v : p) v /= norm;
    return p;
  };
  const auto later = softmax([gamma](std::size_t r) { return gamma * static_cast<double>(r); });
  const auto earlier = softmax([gamma, real](std::size_t r) { return gamma * static_cast<double>(real - r); });
  std::size_t rank = 0;
  for (std::size_t j = 0; j < mask.size(); ++j) {
    if (!mask[j]) continue;
    out[j] = later[rank] - earlier[rank];
    ++rank;
  }
  return out;
}

Attention Network::recency_attention(Var quizzes, std::span<const std::uint8_t> mask) {
  const std::size_t n = quizzes.value().rows();
  if (mask.size() != n) throw DimensionError("recency_attention: mask does not match quiz rows");
  if (count_set(mask) == 0) throw ContractError("recency_attention: no real quiz");
  Var query = ad::matmul(quizzes, param("W_query"));
  Var key = ad::matmul(quizzes, param("W_key"));
  Var value = ad::matmul(quizzes, param("W_value"));
  Mask columns(n * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) columns[j * n + k] = mask[k];
  }
  Var weights = ad::softmax_rows(ad::matmul(query, ad::transpose(key)), columns);
  if (config_->use_ra) {
    weights = ad::add_row(weights, tape_->constant(Tensor({n}, recency_offsets(mask, config_->gamma))));
  }
  return {weights, ad::matmul(weights, value)};
}

Var Network::complementarity_pool(Var contextualized, std::span<const std::uint8_t> mask) {
  if (count_set(mask) == 0) throw ContractError("complementarity_pool: no real quiz");
  return ad::masked_mean(contextualized, mask);
}

Var Network::integrate_state(std::optional<Var> substitution, std::optional<Var> complementarity) {
  if (!substitution && !complementarity) throw ConfigError("integrate_state: both branches are disabled");
  Var sum = substitution && complementarity ? ad::add(*substitution, *complementarity)
                                            : (substitution ? *substitution : *complementarity);
  return linear(sum, param("W6"), param("b6"));
}

Var Network::predict(Var state, Var target_vectors) {
  const std::size_t t = target_vectors.value().rows();
  if (state.value().numel() != config_->dim) throw DimensionError("predict: state must have d entries");
  const std::vector<std::size_t> repeat(t, 0);
  Var h = ad::gather_rows(state, repeat);
  Var features = ad::concat(ad::concat(ad::mul(target_vectors, h), target_vectors, 1), h, 1);
  Var hidden = linear(features, param("W7"), param("b7"));
  return ad::sigmoid(linear(hidden, param("W8"), param("b8")));
}

std::vector<Var> Network::forward_prefixes(const data::PaddedSequence& seq, std::span<const PrefixTarget> targets,
                                           const data::QMatrix& qmatrix, ForwardTrace* trace) {
  if (targets.empty()) throw ContractError("forward: no targets");
  std::size_t span_quizzes = 0;
  for (const auto& t : targets) {
    if (t.history_quizzes == 0) throw ContractError("forward: empty history");
    if (t.exercises.empty()) throw ContractError("forward: no target exercises");
    span_quizzes = std::max(span_quizzes, t.history_quizzes);
  }
  if (span_quizzes > seq.quiz_count) throw ContractError("forward: history longer than the sequence");

  // Real history slots in quiz order, followed by every target exercise.
  std::vector<std::size_t> exercises;
  std::vector<std::uint8_t> answers;
  std::vector<std::size_t> quiz_begin{0};
  for (std::size_t j = 0; j < span_quizzes; ++j) {
    if (!seq.quiz_mask[j]) throw ContractError("forward: history quiz " + std::to_string(j) + " is padding");
    for (std::size_t l = 0; l < seq.quiz_length; ++l) {
      const std::size_t s = seq.slot(j, l);
      if (!seq.slot_mask[s]) continue;
      exercises.push_back(seq.exercises[s]);
      answers.push_back(seq.answers[s]);
    }
    if (exercises.size() == quiz_begin.back()) {
      throw ContractError("forward: history quiz " + std::to_string(j) + " has no interactions");
    }
    quiz_begin.push_back(exercises.size());
  }
  const std::size_t n_hist = exercises.size();
  for (const auto& t : targets) exercises.insert(exercises.end(), t.exercises.begin(), t.exercises.end());

  Var all_vectors = embed_exercises(exercises, qmatrix);
  const auto hist_rows = iota(n_hist);
  Var hist_vectors = ad::gather_rows(all_vectors, hist_rows);
  Var interactions = encode_interactions(hist_vectors, answers);

  // Adjacent gating over every in-quiz (predecessor, successor) pair at once.
  Var combined = interactions;
  Var gates;
  if (config_->use_ki) {
    std::vector<std::size_t> prev, cur, order(n_hist);
    for (std::size_t j = 0; j < span_quizzes; ++j) {
      order[quiz_begin[j]] = quiz_begin[j];
      for (std::size_t r = quiz_begin[j] + 1; r < quiz_begin[j + 1]; ++r) {
        order[r] = n_hist + prev.size();
        prev.push_back(r - 1);
        cur.push_back(r);
      }
    }
    if (!prev.empty()) {
      Var x = adjacent_gate_combine(ad::gather_rows(interactions, prev), ad::gather_rows(interactions, cur), &gates);
      combined = ad::gather_rows(ad::concat(interactions, x, 0), order);
    }
  }

  std::vector<Var> pooled;
  for (std::size_t j = 0; j < span_quizzes; ++j) {
    const auto rows = std::vector<std::size_t>(hist_rows.begin() + static_cast<std::ptrdiff_t>(quiz_begin[j]),
                                               hist_rows.begin() + static_cast<std::ptrdiff_t>(quiz_begin[j + 1]));
    const Mask all(rows.size(), 1);
    pooled.push_back(quiz_pool(ad::gather_rows(combined, rows), all));
  }
  Var quizzes = ad::stack_rows(pooled);

  std::vector<GruStep> gru;
  if (config_->use_sub) gru = substitution_path(quizzes, Mask(span_quizzes, 1));

  std::vector<Var> out;
  std::size_t target_row = n_hist;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const std::size_t t = targets[i].history_quizzes;
    std::optional<Var> sub, com;
    std::optional<Attention> attention;
    if (config_->use_sub) sub = gru[t - 1].state;
    if (config_->use_com) {
      const Mask real(t, 1);
      Var prefix = t == span_quizzes ? quizzes : ad::gather_rows(quizzes, iota(t));
      attention = recency_attention(prefix, real);
      com = complementarity_pool(attention->contextualized, real);
    }
    Var state = integrate_state(sub, com);
    const auto rows = iota(targets[i].exercises.size());
    std::vector<std::size_t> shifted(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) shifted[k] = target_row + k;
    target_row += rows.size();
    Var target_vectors = ad::gather_rows(all_vectors, shifted);
    Var y = predict(state, target_vectors);
    out.push_back(y);

    if (trace != nullptr && i + 1 == targets.size()) {
      trace->exercise_vectors = hist_vectors;
      trace->interaction_vectors = interactions;
      trace->gates = gates;
      trace->combined = combined;
      trace->quiz_vectors = quizzes;
      trace->gru.assign(gru.begin(), gru.begin() + static_cast<std::ptrdiff_t>(config_->use_sub ? t : 0));
      trace->attention = attention;
      trace->complementarity = com.value_or(Var());
      trace->state = state;
      trace->target_vectors = target_vectors;
      trace->predictions = y;
    }
  }
  return out;
}

Var Network::forward(const data::PaddedSequence& history, std::span<const std::size_t> targets,
                     const data::QMatrix& qmatrix, ForwardTrace* trace) {
  const PrefixTarget target{history.real_quizzes(), {targets.begin(), targets.end()}};
  return forward_prefixes(history, std::span(&target, 1), qmatrix, trace).front();
}

std::vector<double> predict_targets(const ModelConfig& config, const ModelParams& params,
                                    const data::PaddedSequence& history, std::span<const std::size_t> targets,
                                    const data::QMatrix& qmatrix) {
  Tape tape;
  Network net(tape, config, params);
  Var y = net.forward(history, targets, qmatrix);
  const auto v = y.value().values();
  return {v.begin(), v.end()};
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'Q', 'K', 'T', 'C', 'K', 'P', 'T', '1'};

}  // namespace

void write_checkpoint(std::ostream& out, const ModelConfig& config, const ModelParams& params) {
  out.write(kMagic, sizeof(kMagic));
  std::ostringstream text;
  write_key_values(text, config.to_key_values());
  const std::string cfg = text.str();
  put<std::uint64_t>(out, cfg.size());
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.tensor.shape().size()));
    for (std::size_t dim : e.tensor.shape()) put<std::uint64_t>(out, dim);
    for (double v : e.tensor.values()) put<double>(out, v);
  }
  if (!out) throw Error("checkpoint: write failed");
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  write_checkpoint(out, config, params);
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || !std::equal(magic, magic + sizeof(magic), kMagic)) {
    throw DataError("not a QKT checkpoint (bad magic)");
  }
  std::istringstream text(take_string(in, take<std::uint64_t>(in, "config length"), "config"));
  Checkpoint ck;
  ck.config = ModelConfig::from_key_values(parse_key_values(text));
  ck.config.validate();

  const auto expected = ModelParams::layout(ck.config);
  const auto count = take<std::uint32_t>(in, "tensor count");
  if (count != expected.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(count) + " tensors but its config requires " +
                      std::to_string(expected.size()));
  }
  for (const auto& [want_name, want_shape] : expected) {
    const std::string name = take_string(in, take<std::uint32_t>(in, "name length"), "tensor name");
    const auto rank = take<std::uint32_t>(in, "rank");
    if (rank == 0 || rank > 2) throw DataError("checkpoint: tensor '" + name + "' has unsupported rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(take<std::uint64_t>(in, "dimension"));
    if (name != want_name || shape != want_shape) {
      throw ConfigError("checkpoint tensor '" + name + "' " + ad::shape_string(shape) + " does not match expected '" +
                        want_name + "' " + ad::shape_string(want_shape));
    }
    std::vector<double> values(ad::shape_numel(shape));
    for (double& v : values) v = take<double>(in, "values");
    ck.params.add(name, Tensor(shape, std::move(values)));
  }
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  return read_checkpoint(in);
}

}  // namespace qkt::model
