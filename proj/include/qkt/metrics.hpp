#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "qkt/data.hpp"
#include "qkt/model.hpp"

namespace qkt::metrics {

// Probability that a random positive outscores a random negative, ties
// counted one half (midrank Mann-Whitney). Labels are 0/1. Throws
// NumericError unless both classes are present.
double auc(std::span<const double> scores, std::span<const double> labels);
double rmse(std::span<const double> predictions, std::span<const double> labels);
// Squared Pearson correlation. Throws NumericError if either side is constant.
double r_squared(std::span<const double> predictions, std::span<const double> labels);

struct Metrics {
  double auc = 0.0;
  double rmse = 0.0;
  double r2 = 0.0;
  std::size_t n_targets = 0;
};

Metrics compute_metrics(std::span<const double> scores, std::span<const double> labels);

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n - 1); 0 for a single value
};

Summary summarize(std::span<const double> values);

struct EvalResult {
  std::vector<Metrics> folds;
  Summary auc;
  Summary rmse;
  Summary r2;
  std::size_t n_targets = 0;  // pooled over folds
};

EvalResult aggregate(std::vector<Metrics> folds);

// Pooled last-quiz targets of a set of students.
struct Scored {
  std::vector<double> scores;
  std::vector<double> labels;
};

// Forward on each student's history (all quizzes but the last) and score
// every interaction of the last quiz. Students are processed in parallel
// when threads > 1; the pooled order is always the order of `students`.
Scored score_last_quiz(const model::ModelConfig& config, const model::ModelParams& params,
                       std::span<const data::PaddedSequence> corpus, std::span<const std::size_t> students,
                       const data::QMatrix& qmatrix, std::size_t threads = 1);

Metrics evaluate(const model::ModelConfig& config, const model::ModelParams& params,
                 std::span<const data::PaddedSequence> corpus, std::span<const std::size_t> students,
                 const data::QMatrix& qmatrix, std::size_t threads = 1);

struct NamedResult {
  std::string name;
  EvalResult result;
};

// `fold,auc,rmse,r2,n_targets`, one row per fold.
void write_fold_csv(std::ostream& out, const EvalResult& result);
// `model,auc_mean,auc_std,rmse_mean,rmse_std,r2_mean,r2_std,n_targets`.
void write_results_csv(std::ostream& out, std::span<const NamedResult> rows);
// Aligned plain-text table, metrics x100 as mean ± std.
void write_results_table(std::ostream& out, std::span<const NamedResult> rows);

}  // namespace qkt::metrics
