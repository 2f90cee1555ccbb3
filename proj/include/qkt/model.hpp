#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qkt/autodiff.hpp"
#include "qkt/data.hpp"
#include "qkt/kv_config.hpp"
#include "qkt/tensor.hpp"

namespace qkt::model {

using ad::Mask;
using ad::Tape;
using ad::Tensor;
using ad::Var;

// Where the adjacent-gate bias sits. `inside` is sigma(W2'(a;b) + b2), the
// standard gate; `outside` is the literal sigma(W2'(a;b)) + b2, kept for study.
enum class GateBias { inside, outside };

// `reset_after`: tanh(r * W5'(sub;q) + b5), reset applied after the joint
// projection. `reset_before`: tanh(W5'(r*sub; q) + b5).
enum class Candidate { reset_after, reset_before };

struct ModelConfig {
  std::size_t dim = 128;
  std::size_t num_exercises = 0;
  std::size_t num_kcs = 0;
  std::size_t quiz_length = 30;
  std::size_t quiz_count = 30;
  double gamma = 1e-5;
  bool use_ki = true;
  bool use_sub = true;
  bool use_com = true;
  bool use_ra = true;
  double lambda_reg = 1e-5;
  std::uint64_t seed = 1;
  GateBias gate_bias = GateBias::inside;
  Candidate candidate = Candidate::reset_after;

  // Throws ConfigError.
  void validate() const;
  KeyValues to_key_values() const;
  static ModelConfig from_key_values(const KeyValues& kv);
  bool operator==(const ModelConfig&) const = default;
};

// Named learnable tensors in a fixed order. Tensors of an ablated branch are
// not created at all.
class ModelParams {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  // Uniform on [-1/sqrt(d), 1/sqrt(d)], drawn tensor by tensor in order.
  static ModelParams initialize(const ModelConfig& config);
  // Names and shapes the given config requires, in canonical order.
  static std::vector<std::pair<std::string, ad::Shape>> layout(const ModelConfig& config);

  void add(std::string name, Tensor tensor);
  bool contains(const std::string& name) const { return find(name) != nullptr; }
  const Tensor* find(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t num_values() const;
  double sum_squares() const;

  bool operator==(const ModelParams&) const;

 private:
  std::vector<Entry> entries_;
};

// One flat gradient buffer per parameter entry, parallel to ModelParams.
struct GradientSet {
  std::vector<std::vector<double>> buffers;

  static GradientSet zeros_like(const ModelParams& params);
  void zero();
  void add(const GradientSet& other);
  bool all_finite() const;
};

struct GruStep {
  Var reset;
  Var update;
  Var candidate;
  Var state;
};

struct Attention {
  Var weights;         // combined attention [n x n]
  Var contextualized;  // z [n x d]
};

// Everything the forward pass produced for the last (or only) prediction.
struct ForwardTrace {
  Var exercise_vectors;     // history interactions, [N x d]
  Var interaction_vectors;  // i, [N x d]
  Var gates;                // adjacent gates, one row per in-quiz successor; invalid without pairs
  Var combined;             // x, [N x d] in quiz order
  Var quiz_vectors;         // q, [J_eff x d]
  std::vector<GruStep> gru;
  std::optional<Attention> attention;
  Var complementarity;
  Var state;                // h
  Var target_vectors;
  Var predictions;          // [T x 1]
};

// Exercises to score after the first `history_quizzes` real quizzes.
struct PrefixTarget {
  std::size_t history_quizzes = 0;
  std::vector<std::size_t> exercises;
};

// The QKT network bound to one tape. Parameters become tape leaves on first
// use, so a branch that is never evaluated never touches its parameters.
class Network {
 public:
  // Inference: parameters enter as constants.
  Network(Tape& tape, const ModelConfig& config, const ModelParams& params);
  // Training: gradients are accumulated into `grads`.
  Network(Tape& tape, const ModelConfig& config, const ModelParams& params, GradientSet& grads);
  // Gradients go to each tensor's own grad buffer (for finite-difference checks).
  static Network with_own_gradients(Tape& tape, const ModelConfig& config, ModelParams& params);

  Tape& tape() const noexcept { return *tape_; }
  const ModelConfig& config() const noexcept { return *config_; }
  Var param(const std::string& name);

  // relu(W1'(e + mean of the exercise's KC embeddings) + b1), one row per id.
  Var embed_exercises(std::span<const std::size_t> exercises, const data::QMatrix& qmatrix);
  // Right layer for answer 1, wrong layer for answer 0; rows stay in order.
  Var encode_interactions(Var exercise_vectors, std::span<const std::uint8_t> answers);
  // Row-wise gate of each predecessor/successor pair; returns x, optionally the gates.
  Var adjacent_gate_combine(Var previous, Var current, Var* gates = nullptr);
  // Masked mean of the interaction rows of one quiz.
  Var quiz_pool(Var combined, std::span<const std::uint8_t> mask);
  // GRU over the unmasked quiz rows; returns one step per real quiz.
  std::vector<GruStep> substitution_path(Var quizzes, std::span<const std::uint8_t> mask);
  Attention recency_attention(Var quizzes, std::span<const std::uint8_t> mask);
  Var complementarity_pool(Var contextualized, std::span<const std::uint8_t> mask);
  // W6'(sub + com) + b6; an absent branch counts as zero.
  Var integrate_state(std::optional<Var> substitution, std::optional<Var> complementarity);
  // sigma(W8'(W7'(e*h ; e ; h) + b7) + b8) for every row of target_vectors.
  Var predict(Var state, Var target_vectors);

  // Predictions for the last quiz's targets given the (already blanked)
  // history. Only unmasked slots are read.
  Var forward(const data::PaddedSequence& history, std::span<const std::size_t> targets,
              const data::QMatrix& qmatrix, ForwardTrace* trace = nullptr);
  // Shares the per-quiz work across several history prefixes of one
  // sequence; prefix t reads only quizzes 0..t-1. One prediction Var per target.
  std::vector<Var> forward_prefixes(const data::PaddedSequence& sequence, std::span<const PrefixTarget> targets,
                                    const data::QMatrix& qmatrix, ForwardTrace* trace = nullptr);

 private:
  Network(Tape& tape, const ModelConfig& config, const ModelParams* params, GradientSet* grads,
          ModelParams* own);

  Tape* tape_;
  const ModelConfig* config_;
  const ModelParams* params_;
  GradientSet* grads_;
  ModelParams* own_;
  std::vector<std::optional<Var>> bound_;
};

// Probabilities for every target; convenience wrapper over a fresh tape.
std::vector<double> predict_targets(const ModelConfig& config, const ModelParams& params,
                                    const data::PaddedSequence& history, std::span<const std::size_t> targets,
                                    const data::QMatrix& qmatrix);

// Recency adjustment beta1 - beta2 for each of n positions; zero on masked
// positions, real positions numbered 1..n_real.
std::vector<double> recency_offsets(std::span<const std::uint8_t> mask, double gamma);

// Checkpoint container:
//   "QKTCKPT1"                       8-byte magic
//   u64 length + bytes               config as `key = value` text
//   u32 tensor count
//   per tensor: u32 name length + name, u32 rank, u64 dims[rank], f64 values
// Integers and doubles are little-endian.
struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

void write_checkpoint(std::ostream& out, const ModelConfig& config, const ModelParams& params);
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params);
Checkpoint read_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Throws ConfigError naming the first structural field that differs.
void check_compatible(const ModelConfig& checkpoint, const ModelConfig& requested);

}  // namespace qkt::model
