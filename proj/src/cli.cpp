#include "qkt/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "qkt/data.hpp"
#include "qkt/error.hpp"
#include "qkt/kv_config.hpp"
#include "qkt/metrics.hpp"
#include "qkt/model.hpp"
#include "qkt/random.hpp"
#include "qkt/synthetic.hpp"
#include "qkt/training.hpp"

namespace qkt::cli {

namespace fs = std::filesystem;

std::filesystem::path default_output_root() {
  const char* env = std::getenv("QKT_OUTPUT_ROOT");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("qkt_runs");
}

namespace {

// A subcommand whose options are all `--key value` pairs mirroring config
// keys. Values stay strings until the typed configs parse them.
class Command {
 public:
  Command(CLI::App& app, const std::string& name, const std::string& description)
      : sub_(app.add_subcommand(name, description)) {
    sub_->add_option("--config", config_file_, "key = value file; command-line flags override it");
  }

  void key(const std::string& key, const std::string& fallback, const std::string& help) {
    defaults_[key] = fallback;
    options_[key] = sub_->add_option("--" + key, values_[key], help)->default_str(fallback);
  }

  bool parsed() const { return sub_->parsed(); }
  bool given(const std::string& key) const { return options_.at(key)->count() > 0; }
  const std::string& name() const { return sub_->get_name(); }

  KeyValues resolved() const {
    KeyValues kv;
    for (const auto& [key, fallback] : defaults_) kv[key] = given(key) ? values_.at(key) : fallback;
    return kv;
  }

 private:
  CLI::App* sub_;
  std::string config_file_;
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> defaults_;
  std::map<std::string, CLI::Option*> options_;
};

const std::map<std::string, std::string>& help_text() {
  static const std::map<std::string, std::string> h{
      {"interactions", "interaction CSV (student_id,exercise_id,quiz_id,timestamp,correct)"},
      {"qmatrix", "Q-matrix CSV (exercise_id,kc_id)"},
      {"out", "output directory"},
      {"gap_threshold_seconds", "quiz split gap when the log has no quiz ids"},
      {"seed", "seed for initialisation, folds and shuffling"},
      {"folds", "number of cross-validation folds"},
      {"fold", "run a single fold (0-based); empty runs all"},
      {"resume", "continue folds from their saved training state"},
      {"dim", "embedding dimension d"},
      {"quiz_length", "L cap: interactions kept per quiz (first ones)"},
      {"quiz_count", "J cap: quizzes kept per student (last ones)"},
      {"gamma", "recency scale"},
      {"use_ki", "intra-quiz adjacent gate"},
      {"use_sub", "inter-quiz substitution path"},
      {"use_com", "inter-quiz complementarity path"},
      {"use_ra", "recency-aware attention"},
      {"lambda_reg", "L2 coefficient"},
      {"gate_bias", "inside | outside the adjacent-gate sigmoid"},
      {"candidate", "reset_after | reset_before GRU candidate"},
      {"batch_size", "students per mini-batch"},
      {"lr0", "initial learning rate"},
      {"decay_factor", "learning-rate decay factor"},
      {"decay_every_epochs", "epochs between decays"},
      {"epochs", "training epochs"},
      {"adam_beta1", "Adam beta1"},
      {"adam_beta2", "Adam beta2"},
      {"adam_epsilon", "Adam epsilon"},
      {"target_policy", "last_quiz | rolling training targets"},
      {"validation_fraction", "share of training students used for checkpoint selection"},
      {"select_best", "keep the epoch with the best validation AUC"},
      {"threads", "worker threads"},
      {"checkpoint", "model checkpoint to evaluate"},
      {"scores", "CSV of score,label pairs to evaluate instead of a model"},
      {"students", "number of students"},
      {"kcs", "number of knowledge concepts"},
      {"exercises_per_kc", "exercises per knowledge concept"},
      {"quizzes_per_student", "quizzes per student"},
      {"p_learn", "probability of learning a KC after a quiz"},
      {"p_guess", "probability of a correct answer without mastery"},
      {"p_slip", "probability of a wrong answer with mastery"},
      {"p_init", "probability a KC starts mastered"},
  };
  return h;
}

const std::vector<std::string> kModelKeys{"dim",    "quiz_length", "quiz_count", "gamma",     "use_ki",
                                          "use_sub", "use_com",    "use_ra",     "lambda_reg", "gate_bias",
                                          "candidate"};
const std::vector<std::string> kTrainKeys{"batch_size", "lr0",          "decay_factor",  "decay_every_epochs",
                                          "epochs",     "adam_beta1",   "adam_beta2",    "adam_epsilon",
                                          "target_policy", "validation_fraction", "select_best", "threads"};

void add_keys(Command& cmd, const std::vector<std::string>& keys, const KeyValues& defaults) {
  for (const auto& k : keys) cmd.key(k, defaults.at(k), help_text().at(k));
}

void add_data_keys(Command& cmd) {
  cmd.key("interactions", "", help_text().at("interactions"));
  cmd.key("qmatrix", "", help_text().at("qmatrix"));
  cmd.key("gap_threshold_seconds", "3600", help_text().at("gap_threshold_seconds"));
}

KeyValues pick(const KeyValues& kv, const std::vector<std::string>& keys) {
  KeyValues out;
  for (const auto& k : keys) {
    if (kv.contains(k)) out[k] = kv.at(k);
  }
  return out;
}

const std::string& require(const KeyValues& kv, const std::string& key) {
  const std::string& v = get_string(kv, key);
  if (v.empty()) throw ConfigError("--" + key + " is required");
  return v;
}

fs::path output_dir(const KeyValues& kv, const std::string& command) {
  const std::string& out = kv.at("out");
  return out.empty() ? default_output_root() / command : fs::path(out);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write '" + path.string() + "'");
  f << text;
}

void echo_config(const fs::path& dir, KeyValues kv) {
  fs::create_directories(dir);
  kv["out"] = dir.string();
  std::ostringstream s;
  write_key_values(s, kv);
  write_text(dir / "effective_config.txt", s.str());
}

struct Corpus {
  data::QMatrix qmatrix;
  data::PreparedCorpus prepared;
  std::vector<data::StudentSequence> sequences;
};

Corpus load_corpus(const KeyValues& kv, const data::ProtocolCaps& caps, std::ostream& err) {
  Corpus c;
  c.qmatrix = data::read_qmatrix(require(kv, "qmatrix"));
  auto log = data::read_interaction_log(require(kv, "interactions"), c.qmatrix);
  constexpr std::size_t kShown = 5;
  for (std::size_t i = 0; i < log.warnings.size() && i < kShown; ++i) err << "warning: " << log.warnings[i] << '\n';
  if (log.warnings.size() > kShown) err << "warning: " << log.warnings.size() - kShown << " more warnings\n";
  data::SegmentOptions seg;
  seg.gap_threshold_seconds = static_cast<std::int64_t>(get_uint(kv, "gap_threshold_seconds"));
  c.sequences = data::segment_into_quizzes(log.interactions, seg);
  c.prepared = data::apply_protocol(c.sequences, caps);
  return c;
}

// Parsed before any data is read so flag errors surface first.
model::ModelConfig model_config(const KeyValues& kv) {
  KeyValues m = pick(kv, kModelKeys);
  m["seed"] = kv.at("seed");
  return model::ModelConfig::from_key_values(m);
}

model::ModelConfig sized(model::ModelConfig c, const data::QMatrix& q) {
  c.num_exercises = q.num_exercises();
  c.num_kcs = q.num_kcs();
  c.validate();
  return c;
}

training::TrainConfig train_config(const KeyValues& kv) {
  KeyValues t = pick(kv, kTrainKeys);
  t["seed"] = kv.at("seed");
  auto c = training::TrainConfig::from_key_values(t);
  c.validate();
  return c;
}

std::vector<std::size_t> selected_folds(const KeyValues& kv, std::size_t k) {
  const std::string& f = kv.at("fold");
  if (f.empty()) {
    std::vector<std::size_t> all(k);
    for (std::size_t i = 0; i < k; ++i) all[i] = i;
    return all;
  }
  const std::size_t one = get_uint(kv, "fold");
  if (one >= k) throw ConfigError("--fold " + f + " is out of range for " + std::to_string(k) + " folds");
  return {one};
}

std::vector<data::Fold> make_folds(const KeyValues& kv, std::size_t students) {
  return data::split_folds(students, get_uint(kv, "folds"), get_uint(kv, "seed"));
}

void write_log(const fs::path& path, const std::vector<training::EpochLog>& log) {
  std::ostringstream s;
  training::write_epoch_log_header(s);
  for (const auto& row : log) training::write_epoch_log_row(s, row);
  write_text(path, s.str());
}

void write_results(const fs::path& dir, const std::vector<metrics::NamedResult>& rows) {
  std::ostringstream csv, table;
  metrics::write_results_csv(csv, rows);
  metrics::write_results_table(table, rows);
  write_text(dir / "results.csv", csv.str());
  write_text(dir / "results.txt", table.str());
}

// Cross-validated training of one model variant into `dir`.
metrics::EvalResult cross_validate(const KeyValues& kv, const model::ModelConfig& mc, const training::TrainConfig& tc,
                                   const Corpus& corpus, const fs::path& dir, std::ostream& out) {
  const auto& padded = corpus.prepared.padded;
  const auto folds = make_folds(kv, padded.size());
  const bool resume = get_bool(kv, "resume");
  std::vector<metrics::Metrics> results;
  for (std::size_t f : selected_folds(kv, folds.size())) {
    const fs::path fold_dir = dir / ("fold_" + std::to_string(f));
    fs::create_directories(fold_dir);
    auto [fit, validation] = training::split_validation(folds[f].train, tc.validation_fraction,
                                                        derive_seed(tc.seed, 1000 + f));
    const training::TrainData td{padded, fit, validation, &corpus.qmatrix};

    std::optional<training::TrainState> state;
    if (resume && fs::exists(fold_dir / "state.qkt")) state = training::load_train_state(fold_dir / "state.qkt", mc);
    const auto result = training::train(mc, tc, td, state ? &*state : nullptr,
                                        [&](const training::EpochLog& row, const training::TrainState& s) {
                                          training::save_train_state(fold_dir / "state.qkt", mc, s);
                                          write_log(fold_dir / "epoch_log.csv", s.log);
                                          char buf[160];
                                          std::snprintf(buf, sizeof(buf),
                                                        "fold %zu epoch %zu lr %.3g loss %.5f val_auc %.4f\n", f,
                                                        row.epoch, row.lr, row.train_loss, row.val_auc);
                                          out << buf << std::flush;
                                        });
    write_log(fold_dir / "epoch_log.csv", result.state.log);
    model::save_checkpoint(fold_dir / "checkpoint.qkt", mc, result.params);
    const auto m = metrics::evaluate(mc, result.params, padded, folds[f].test, corpus.qmatrix, tc.threads);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "fold %zu test auc %.4f rmse %.4f r2 %.4f (%zu targets)\n", f, m.auc, m.rmse,
                  m.r2, m.n_targets);
    out << buf;
    results.push_back(m);
  }
  auto agg = metrics::aggregate(results);
  std::ostringstream folds_csv;
  metrics::write_fold_csv(folds_csv, agg);
  write_text(dir / "folds.csv", folds_csv.str());
  return agg;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_stats(const KeyValues& kv, std::ostream& out, std::ostream& err) {
  const fs::path dir = output_dir(kv, "stats");
  echo_config(dir, kv);
  const auto q = data::read_qmatrix(require(kv, "qmatrix"));
  auto log = data::read_interaction_log(require(kv, "interactions"), q);
  for (const auto& w : log.warnings) err << "warning: " << w << '\n';
  data::SegmentOptions seg;
  seg.gap_threshold_seconds = static_cast<std::int64_t>(get_uint(kv, "gap_threshold_seconds"));
  const auto seqs = data::segment_into_quizzes(log.interactions, seg);
  const auto stats = data::corpus_stats(seqs, q);
  std::ostringstream report;
  data::write_stats_report(report, stats);
  out << report.str();
  write_text(dir / "stats.txt", report.str());
  std::ostringstream lengths, numbers;
  data::write_histogram_csv(lengths, stats.quiz_length_histogram);
  data::write_histogram_csv(numbers, stats.quiz_number_histogram);
  write_text(dir / "quiz_length_histogram.csv", lengths.str());
  write_text(dir / "quiz_number_histogram.csv", numbers.str());
  return kExitOk;
}

int cmd_synth(const KeyValues& kv, std::ostream& out) {
  const fs::path dir = output_dir(kv, "synth");
  echo_config(dir, kv);
  data::SyntheticSpec spec;
  spec.students = get_uint(kv, "students");
  spec.kcs = get_uint(kv, "kcs");
  spec.exercises_per_kc = get_uint(kv, "exercises_per_kc");
  spec.quizzes_per_student = get_uint(kv, "quizzes_per_student");
  spec.quiz_length = get_uint(kv, "quiz_length");
  spec.p_learn = get_double(kv, "p_learn");
  spec.p_guess = get_double(kv, "p_guess");
  spec.p_slip = get_double(kv, "p_slip");
  spec.p_init = get_double(kv, "p_init");
  spec.seed = get_uint(kv, "seed");
  const auto corpus = data::generate_synthetic(spec);
  std::ostringstream inter, qm, mastery;
  data::write_interaction_log(inter, corpus.interactions, corpus.qmatrix);
  data::write_qmatrix(qm, corpus.qmatrix);
  data::write_mastery_csv(mastery, corpus.mastery, corpus.qmatrix);
  write_text(dir / "interactions.csv", inter.str());
  write_text(dir / "qmatrix.csv", qm.str());
  write_text(dir / "mastery.csv", mastery.str());
  out << "wrote " << corpus.interactions.size() << " interactions for " << spec.students << " students to "
      << dir.string() << '\n';
  return kExitOk;
}

int cmd_train(const KeyValues& kv, std::ostream& out, std::ostream& err) {
  const fs::path dir = output_dir(kv, "train");
  echo_config(dir, kv);
  const data::ProtocolCaps caps{get_uint(kv, "quiz_length"), get_uint(kv, "quiz_count")};
  const auto unsized = model_config(kv);
  const auto tc = train_config(kv);
  const Corpus corpus = load_corpus(kv, caps, err);
  const auto mc = sized(unsized, corpus.qmatrix);
  out << corpus.prepared.padded.size() << " students after preprocessing (" << corpus.prepared.removed_students
      << " removed with fewer than 2 quizzes)\n";
  const auto result = cross_validate(kv, mc, tc, corpus, dir, out);
  const std::vector<metrics::NamedResult> rows{{"QKT", result}};
  write_results(dir, rows);
  metrics::write_results_table(out, rows);
  return kExitOk;
}

int cmd_ablate(const KeyValues& kv, std::ostream& out, std::ostream& err) {
  const fs::path dir = output_dir(kv, "ablate");
  echo_config(dir, kv);
  const data::ProtocolCaps caps{get_uint(kv, "quiz_length"), get_uint(kv, "quiz_count")};
  const auto unsized = model_config(kv);
  const auto tc = train_config(kv);
  const Corpus corpus = load_corpus(kv, caps, err);
  const auto base = sized(unsized, corpus.qmatrix);

  struct Variant {
    std::string name, slug;
    bool ki, sub, com, ra;
  };
  const std::vector<Variant> variants{
      {"QKT", "full", true, true, true, true},
      {"QKT w/o KI", "no_ki", false, true, true, true},
      {"QKT w/o SUB", "no_sub", true, false, true, true},
      {"QKT w/o COM", "no_com", true, true, false, true},
      {"QKT w/o RA", "no_ra", true, true, true, false},
  };
  std::vector<metrics::NamedResult> rows;
  for (const auto& v : variants) {
    auto mc = base;
    mc.use_ki = v.ki;
    mc.use_sub = v.sub;
    mc.use_com = v.com;
    mc.use_ra = v.ra;
    out << "== " << v.name << '\n';
    rows.push_back({v.name, cross_validate(kv, mc, tc, corpus, dir / v.slug, out)});
  }

  auto mark = [](bool b) { return b ? "✓" : "✗"; };
  std::ostringstream csv, table;
  csv << "model,ki,sub,com,ra,auc_mean,auc_std,rmse_mean,rmse_std,r2_mean,r2_std,n_targets\n";
  table << "Model         KI  SUB COM RA   AUC            RMSE           r²\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& v = variants[i];
    const auto& r = rows[i].result;
    char buf[320];
    std::snprintf(buf, sizeof(buf), ",%d,%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu\n", v.ki, v.sub, v.com,
                  v.ra, r.auc.mean, r.auc.stddev, r.rmse.mean, r.rmse.stddev, r.r2.mean, r.r2.stddev, r.n_targets);
    csv << v.name << buf;
    std::snprintf(buf, sizeof(buf), "%-13s %s   %s   %s   %s    %6.2f ± %4.2f  %6.2f ± %4.2f  %6.2f ± %4.2f\n",
                  v.name.c_str(), mark(v.ki), mark(v.sub), mark(v.com), mark(v.ra), 100 * r.auc.mean,
                  100 * r.auc.stddev, 100 * r.rmse.mean, 100 * r.rmse.stddev, 100 * r.r2.mean, 100 * r.r2.stddev);
    table << buf;
  }
  bool full_best = true;
  for (std::size_t i = 1; i < rows.size(); ++i) full_best = full_best && rows[0].result.auc.mean > rows[i].result.auc.mean;
  table << "full QKT has the highest AUC: " << (full_best ? "yes" : "no") << '\n';
  write_text(dir / "ablation.csv", csv.str());
  write_text(dir / "ablation.txt", table.str());
  out << table.str();
  return kExitOk;
}

int cmd_eval(const Command& cmd, const KeyValues& kv, std::ostream& out, std::ostream& err) {
  const fs::path dir = output_dir(kv, "eval");
  echo_config(dir, kv);
  metrics::Metrics m;
  if (!kv.at("scores").empty()) {
    std::ifstream in(kv.at("scores"));
    if (!in) throw DataError("cannot open scores file '" + kv.at("scores") + "'");
    std::string line;
    std::getline(in, line);
    if (line != "score,label") throw DataError("expected header 'score,label'", 1);
    std::vector<double> scores, labels;
    for (std::size_t n = 2; std::getline(in, line); ++n) {
      if (line.empty()) continue;
      const auto comma = line.find(',');
      try {
        if (comma == std::string::npos) throw std::invalid_argument("comma");
        scores.push_back(std::stod(line.substr(0, comma)));
        labels.push_back(std::stod(line.substr(comma + 1)));
      } catch (const std::logic_error&) {
        throw DataError("expected 'score,label'", n);
      }
    }
    m = metrics::compute_metrics(scores, labels);
  } else {
    const auto ck = model::load_checkpoint(require(kv, "checkpoint"));
    KeyValues requested = ck.config.to_key_values();
    for (const auto& k : kModelKeys) {
      if (cmd.given(k)) requested[k] = kv.at(k);
    }
    auto mc = model::ModelConfig::from_key_values(requested);
    model::check_compatible(ck.config, mc);
    const Corpus corpus = load_corpus(kv, {mc.quiz_length, mc.quiz_count}, err);
    if (corpus.qmatrix.num_exercises() != mc.num_exercises || corpus.qmatrix.num_kcs() != mc.num_kcs) {
      throw ConfigError("checkpoint incompatible: it was trained on " + std::to_string(mc.num_exercises) +
                        " exercises / " + std::to_string(mc.num_kcs) + " KCs, the Q-matrix has " +
                        std::to_string(corpus.qmatrix.num_exercises()) + " / " +
                        std::to_string(corpus.qmatrix.num_kcs()));
    }
    std::vector<std::size_t> students;
    if (kv.at("fold").empty()) {
      for (std::size_t i = 0; i < corpus.prepared.padded.size(); ++i) students.push_back(i);
    } else {
      const auto folds = make_folds(kv, corpus.prepared.padded.size());
      students = folds.at(selected_folds(kv, folds.size()).front()).test;
    }
    m = metrics::evaluate(mc, ck.params, corpus.prepared.padded, students, corpus.qmatrix,
                          get_uint(kv, "threads"));
  }
  const std::vector<metrics::NamedResult> rows{{"QKT", metrics::aggregate({m})}};
  write_results(dir, rows);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "auc %.17g\nrmse %.17g\nr2 %.17g\nn_targets %zu\n", m.auc, m.rmse, m.r2,
                m.n_targets);
  out << buf;
  return kExitOk;
}

// Splices `--config FILE` contents in right after the subcommand name.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> out = args;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string file;
    if (args[i] == "--config" && i + 1 < args.size()) file = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) file = args[i].substr(9);
    else continue;
    std::vector<std::string> injected;
    for (const auto& [key, value] : read_key_values(file)) {
      injected.push_back("--" + key);
      injected.push_back(value);
    }
    const auto sub = std::find_if(out.begin(), out.end(), [](const std::string& a) { return a.rfind("-", 0) != 0; });
    const auto at = sub == out.end() ? out.begin() : sub + 1;
    out.insert(at, injected.begin(), injected.end());
    break;
  }
  return out;
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app("Quiz-based knowledge tracing", "qkt");
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  const KeyValues model_defaults = model::ModelConfig{}.to_key_values();
  const KeyValues train_defaults = training::TrainConfig{}.to_key_values();

  Command stats(app, "stats", "corpus statistics and quiz histograms");
  add_data_keys(stats);
  stats.key("out", "", help_text().at("out"));

  Command train(app, "train", "cross-validated training");
  Command ablate(app, "ablate", "full model and the four ablations");
  for (Command* c : {&train, &ablate}) {
    add_data_keys(*c);
    add_keys(*c, kModelKeys, model_defaults);
    add_keys(*c, kTrainKeys, train_defaults);
    c->key("seed", "1", help_text().at("seed"));
    c->key("folds", "5", help_text().at("folds"));
    c->key("fold", "", help_text().at("fold"));
    c->key("resume", "false", help_text().at("resume"));
    c->key("out", "", help_text().at("out"));
  }

  Command eval(app, "eval", "evaluate a checkpoint on last-quiz targets");
  add_data_keys(eval);
  add_keys(eval, kModelKeys, model_defaults);
  for (const char* k : {"checkpoint", "scores", "fold", "out"}) eval.key(k, "", help_text().at(k));
  eval.key("seed", "1", help_text().at("seed"));
  eval.key("folds", "5", help_text().at("folds"));
  eval.key("threads", "1", help_text().at("threads"));

  Command synth(app, "synth", "generate a synthetic corpus");
  const data::SyntheticSpec spec;
  synth.key("students", std::to_string(spec.students), help_text().at("students"));
  synth.key("kcs", std::to_string(spec.kcs), help_text().at("kcs"));
  synth.key("exercises_per_kc", std::to_string(spec.exercises_per_kc), help_text().at("exercises_per_kc"));
  synth.key("quizzes_per_student", std::to_string(spec.quizzes_per_student), help_text().at("quizzes_per_student"));
  synth.key("quiz_length", std::to_string(spec.quiz_length), "interactions per quiz");
  synth.key("p_learn", format_double(spec.p_learn), help_text().at("p_learn"));
  synth.key("p_guess", format_double(spec.p_guess), help_text().at("p_guess"));
  synth.key("p_slip", format_double(spec.p_slip), help_text().at("p_slip"));
  synth.key("p_init", format_double(spec.p_init), help_text().at("p_init"));
  synth.key("seed", std::to_string(spec.seed), help_text().at("seed"));
  synth.key("out", "", help_text().at("out"));

  try {
    std::vector<std::string> args = expand_config(raw_args);
    std::reverse(args.begin(), args.end());  // CLI11 consumes a reversed vector
    try {
      app.parse(args);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      return code == 0 ? kExitOk : kExitUsage;
    }
    if (stats.parsed()) return cmd_stats(stats.resolved(), out, err);
    if (train.parsed()) return cmd_train(train.resolved(), out, err);
    if (ablate.parsed()) return cmd_ablate(ablate.resolved(), out, err);
    if (eval.parsed()) return cmd_eval(eval, eval.resolved(), out, err);
    if (synth.parsed()) return cmd_synth(synth.resolved(), out);
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}

}  // namespace qkt::cli
