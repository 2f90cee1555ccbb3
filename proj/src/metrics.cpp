#include "qkt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <ostream>
#include <thread>

#include "qkt/error.hpp"

namespace qkt::metrics {

namespace {

void check_inputs(const char* what, std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError(std::string(what) + ": length mismatch");
  if (a.empty()) throw NumericError(std::string(what) + ": no values");
}

}  // namespace

double auc(std::span<const double> scores, std::span<const double> labels) {
  check_inputs("auc", scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of midranks of the positives.
  double rank_sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] != 0.0) {
        rank_sum += midrank;
        ++positives;
      }
    }
    i = j;
  }
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) throw NumericError("auc: undefined for single-class labels");
  const double np = static_cast<double>(positives);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(negatives));
}

double rmse(std::span<const double> predictions, std::span<const double> labels) {
  check_inputs("rmse", predictions, labels);
  double s = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double e = predictions[i] - labels[i];
    s += e * e;
  }
  return std::sqrt(s / static_cast<double>(predictions.size()));
}

double r_squared(std::span<const double> predictions, std::span<const double> labels) {
  check_inputs("r_squared", predictions, labels);
  const double n = static_cast<double>(predictions.size());
  const double mp = std::accumulate(predictions.begin(), predictions.end(), 0.0) / n;
  const double ml = std::accumulate(labels.begin(), labels.end(), 0.0) / n;
  double cov = 0.0, vp = 0.0, vl = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double a = predictions[i] - mp, b = labels[i] - ml;
    cov += a * b;
    vp += a * a;
    vl += b * b;
  }
  if (vp == 0.0 || vl == 0.0) throw NumericError("r_squared: undefined for zero variance");
  return (cov * cov) / (vp * vl);
}

Metrics compute_metrics(std::span<const double> scores, std::span<const double> labels) {
  return {auc(scores, labels), rmse(scores, labels), r_squared(scores, labels), scores.size()};
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw NumericError("summarize: no values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

EvalResult aggregate(std::vector<Metrics> folds) {
  EvalResult r;
  std::vector<double> a, e, q;
  for (const auto& f : folds) {
    a.push_back(f.auc);
    e.push_back(f.rmse);
    q.push_back(f.r2);
    r.n_targets += f.n_targets;
  }
  r.auc = summarize(a);
  r.rmse = summarize(e);
  r.r2 = summarize(q);
  r.folds = std::move(folds);
  return r;
}

Scored score_last_quiz(const model::ModelConfig& config, const model::ModelParams& params,
                       std::span<const data::PaddedSequence> corpus, std::span<const std::size_t> students,
                       const data::QMatrix& qmatrix, std::size_t threads) {
  std::vector<Scored> per_student(students.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto split = data::make_target_split(corpus[students[i]]);
      std::vector<std::size_t> exercises;
      for (const auto& t : split.targets) {
        exercises.push_back(t.exercise);
        per_student[i].labels.push_back(t.answer);
      }
      per_student[i].scores = model::predict_targets(config, params, split.history, exercises, qmatrix);
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, students.size()));
  if (threads == 1) {
    work(0, students.size());
  } else {
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    const std::size_t chunk = (students.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          work(std::min(students.size(), t * chunk), std::min(students.size(), (t + 1) * chunk));
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  Scored out;
  for (auto& s : per_student) {
    out.scores.insert(out.scores.end(), s.scores.begin(), s.scores.end());
    out.labels.insert(out.labels.end(), s.labels.begin(), s.labels.end());
  }
  return out;
}

Metrics evaluate(const model::ModelConfig& config, const model::ModelParams& params,
                 std::span<const data::PaddedSequence> corpus, std::span<const std::size_t> students,
                 const data::QMatrix& qmatrix, std::size_t threads) {
  const Scored s = score_last_quiz(config, params, corpus, students, qmatrix, threads);
  return compute_metrics(s.scores, s.labels);
}

void write_fold_csv(std::ostream& out, const EvalResult& result) {
  out << "fold,auc,rmse,r2,n_targets\n";
  char buf[160];
  for (std::size_t i = 0; i < result.folds.size(); ++i) {
    const auto& f = result.folds[i];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%zu\n", i, f.auc, f.rmse, f.r2, f.n_targets);
    out << buf;
  }
}

void write_results_csv(std::ostream& out, std::span<const NamedResult> rows) {
  out << "model,auc_mean,auc_std,rmse_mean,rmse_std,r2_mean,r2_std,n_targets\n";
  char buf[256];
  for (const auto& r : rows) {
    const auto& e = r.result;
    std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu\n", e.auc.mean, e.auc.stddev,
                  e.rmse.mean, e.rmse.stddev, e.r2.mean, e.r2.stddev, e.n_targets);
    out << r.name << buf;
  }
}

void write_results_table(std::ostream& out, std::span<const NamedResult> rows) {
  std::size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  auto cell = [](const Summary& s) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%6.2f ± %4.2f", 100.0 * s.mean, 100.0 * s.stddev);
    return std::string(buf);
  };
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(s.size(), w), ' ');
    return s;
  };
  out << pad("Model", width) << "  " << pad("AUC", 13) << "  " << pad("RMSE", 13) << "  " << "r²" << '\n';
  for (const auto& r : rows) {
    out << pad(r.name, width) << "  " << cell(r.result.auc) << "  " << cell(r.result.rmse) << "  "
        << cell(r.result.r2) << '\n';
  }
}

}  // namespace qkt::metrics
