#include "qkt/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <set>
#include <unordered_map>

#include "qkt/error.hpp"
#include "qkt/random.hpp"

namespace qkt::data {

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string current;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  fields.push_back(std::move(current));
  return fields;
}

bool next_line(std::istream& in, std::string& line) {
  if (!std::getline(in, line)) return false;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return true;
}

void expect_header(std::istream& in, const std::string& expected) {
  std::string line;
  if (!next_line(in, line)) throw DataError("missing header, expected '" + expected + "'", 1);
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto got = split_fields(line);
  const auto want = split_fields(expected);
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (i >= want.size() || got[i] != want[i]) {
      throw DataError("unknown column '" + got[i] + "', expected header '" + expected + "'", 1);
    }
  }
  if (got.size() != want.size()) throw DataError("missing columns, expected header '" + expected + "'", 1);
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return in;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary / QMatrix

std::size_t Vocabulary::add(const std::string& name) {
  auto [it, inserted] = index_.try_emplace(name, names_.size());
  if (inserted) names_.push_back(name);
  return it->second;
}

std::optional<std::size_t> Vocabulary::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void QMatrix::relate(const std::string& exercise, const std::string& kc) {
  const std::size_t e = exercises_.add(exercise);
  const std::size_t k = kcs_.add(kc);
  if (kcs_of_.size() <= e) kcs_of_.resize(e + 1);
  auto& list = kcs_of_[e];
  auto pos = std::lower_bound(list.begin(), list.end(), k);
  if (pos == list.end() || *pos != k) list.insert(pos, k);
}

bool QMatrix::related(std::size_t exercise, std::size_t kc) const {
  const auto& list = kcs_of_.at(exercise);
  return std::binary_search(list.begin(), list.end(), kc);
}

std::size_t QMatrix::num_relations() const noexcept {
  std::size_t n = 0;
  for (const auto& list : kcs_of_) n += list.size();
  return n;
}

QMatrix parse_qmatrix(std::istream& in) {
  expect_header(in, kQMatrixHeader);
  QMatrix q;
  std::string line;
  std::size_t line_no = 1;
  while (next_line(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != 2) {
      throw DataError("expected 2 fields, got " + std::to_string(fields.size()), line_no);
    }
    if (fields[0].empty() || fields[1].empty()) throw DataError("empty exercise_id or kc_id", line_no);
    q.relate(fields[0], fields[1]);
  }
  return q;
}

QMatrix read_qmatrix(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_qmatrix(in);
}

void write_qmatrix(std::ostream& out, const QMatrix& qmatrix) {
  out << kQMatrixHeader << '\n';
  for (std::size_t e = 0; e < qmatrix.num_exercises(); ++e) {
    for (std::size_t k : qmatrix.kcs_of(e)) {
      out << qmatrix.exercises().name(e) << ',' << qmatrix.kcs().name(k) << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Interaction log

ParsedLog parse_interaction_log(std::istream& in, const QMatrix& qmatrix) {
  ParsedLog log;
  // A zero-byte log is an empty corpus, not a schema error.
  if (in.peek() == std::char_traits<char>::eof()) {
    log.warnings.push_back("interaction log is empty");
    return log;
  }
  expect_header(in, kInteractionHeader);
  std::string line;
  std::size_t line_no = 1;
  std::size_t row = 0;
  while (next_line(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 5) throw DataError("expected 5 fields, got " + std::to_string(f.size()), line_no);
    if (f[0].empty()) throw DataError("empty student_id", line_no);

    std::int64_t timestamp = 0;
    const auto& ts = f[3];
    auto [ptr, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), timestamp);
    if (ec != std::errc() || ptr != ts.data() + ts.size() || ts.empty()) {
      throw DataError("timestamp '" + ts + "' is not an integer", line_no);
    }
    if (f[4] != "0" && f[4] != "1") throw DataError("correct must be 0 or 1, got '" + f[4] + "'", line_no);

    const std::size_t this_row = row++;
    const auto exercise = qmatrix.exercises().find(f[1]);
    if (!exercise) {
      ++log.dropped_unmapped;
      log.warnings.push_back("line " + std::to_string(line_no) + ": exercise '" + f[1] +
                             "' has no KC in the Q-matrix; row dropped");
      continue;
    }
    Interaction it;
    it.student_id = f[0];
    it.exercise = *exercise;
    it.answer = f[4] == "1" ? 1 : 0;
    it.quiz_id = f[2];
    it.order_key = timestamp;
    it.source_row = this_row;
    log.interactions.push_back(std::move(it));
  }
  return log;
}

ParsedLog read_interaction_log(const std::filesystem::path& path, const QMatrix& qmatrix) {
  auto in = open_input(path);
  return parse_interaction_log(in, qmatrix);
}

void write_interaction_log(std::ostream& out, std::span<const Interaction> interactions, const QMatrix& qmatrix) {
  out << kInteractionHeader << '\n';
  for (const auto& it : interactions) {
    out << it.student_id << ',' << qmatrix.exercises().name(it.exercise) << ',' << it.quiz_id << ','
        << it.order_key << ',' << static_cast<int>(it.answer) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Segmentation

std::size_t StudentSequence::num_interactions() const {
  std::size_t n = 0;
  for (const auto& q : quizzes) n += q.interactions.size();
  return n;
}

std::vector<StudentSequence> segment_into_quizzes(std::span<const Interaction> interactions,
                                                  const SegmentOptions& options) {
  std::size_t with_id = 0;
  for (const auto& it : interactions) with_id += !it.quiz_id.empty();
  if (with_id != 0 && with_id != interactions.size()) {
    throw DataError("quiz_id is present on some rows and missing on others");
  }
  const bool by_quiz_id = with_id != 0;

  // Group per student in file order.
  std::vector<std::vector<Interaction>> groups;
  std::unordered_map<std::string, std::size_t> group_of;
  for (const auto& it : interactions) {
    auto [pos, inserted] = group_of.try_emplace(it.student_id, groups.size());
    if (inserted) groups.emplace_back();
    groups[pos->second].push_back(it);
  }

  std::vector<StudentSequence> out;
  out.reserve(groups.size());
  for (auto& group : groups) {
    std::stable_sort(group.begin(), group.end(),
                     [](const Interaction& a, const Interaction& b) { return a.order_key < b.order_key; });
    StudentSequence seq;
    seq.student_id = group.front().student_id;
    for (std::size_t i = 0; i < group.size(); ++i) {
      bool start = i == 0;
      if (!start) {
        const Interaction& prev = seq.quizzes.back().interactions.back();
        start = by_quiz_id ? group[i].quiz_id != prev.quiz_id
                           : group[i].order_key - prev.order_key > options.gap_threshold_seconds;
      }
      if (start) {
        Quiz q;
        q.quiz_id = by_quiz_id ? group[i].quiz_id : "auto" + std::to_string(seq.quizzes.size());
        seq.quizzes.push_back(std::move(q));
      }
      seq.quizzes.back().interactions.push_back(std::move(group[i]));
    }
    out.push_back(std::move(seq));
  }

  std::stable_sort(out.begin(), out.end(), [](const StudentSequence& a, const StudentSequence& b) {
    const auto& x = a.quizzes.front().interactions.front();
    const auto& y = b.quizzes.front().interactions.front();
    if (x.order_key != y.order_key) return x.order_key < y.order_key;
    return x.source_row < y.source_row;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Protocol

std::size_t PaddedSequence::real_quizzes() const {
  std::size_t n = 0;
  for (auto m : quiz_mask) n += m != 0;
  return n;
}

std::size_t PaddedSequence::real_length(std::size_t quiz) const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < quiz_length; ++l) n += slot_mask[slot(quiz, l)] != 0;
  return n;
}

PaddedSequence pad_sequence(const StudentSequence& sequence, const ProtocolCaps& caps) {
  if (sequence.quizzes.size() > caps.quiz_count) throw ContractError("sequence exceeds the quiz cap; apply the protocol first");
  PaddedSequence p;
  p.student_id = sequence.student_id;
  p.quiz_count = caps.quiz_count;
  p.quiz_length = caps.quiz_length;
  const std::size_t n = caps.quiz_count * caps.quiz_length;
  p.exercises.assign(n, 0);
  p.answers.assign(n, 0);
  p.slot_mask.assign(n, 0);
  p.quiz_mask.assign(caps.quiz_count, 0);
  p.source_rows.assign(n, -1);
  for (std::size_t j = 0; j < sequence.quizzes.size(); ++j) {
    const auto& quiz = sequence.quizzes[j].interactions;
    if (quiz.size() > caps.quiz_length) throw ContractError("quiz exceeds the length cap; apply the protocol first");
    if (quiz.empty()) throw ContractError("empty quiz");
    p.quiz_mask[j] = 1;
    for (std::size_t l = 0; l < quiz.size(); ++l) {
      const std::size_t s = p.slot(j, l);
      p.exercises[s] = quiz[l].exercise;
      p.answers[s] = quiz[l].answer;
      p.slot_mask[s] = 1;
      p.source_rows[s] = static_cast<std::int64_t>(quiz[l].source_row);
    }
  }
  return p;
}

PreparedCorpus apply_protocol(std::span<const StudentSequence> sequences, const ProtocolCaps& caps) {
  if (caps.quiz_length < 1) throw ConfigError("quiz length cap must be at least 1");
  if (caps.quiz_count < 2) throw ConfigError("quiz count cap must be at least 2");
  PreparedCorpus corpus;
  corpus.caps = caps;
  for (const auto& seq : sequences) {
    if (seq.quizzes.size() < 2) {
      ++corpus.removed_students;
      continue;
    }
    StudentSequence kept;
    kept.student_id = seq.student_id;
    const std::size_t first = seq.quizzes.size() > caps.quiz_count ? seq.quizzes.size() - caps.quiz_count : 0;
    for (std::size_t j = 0; j < first; ++j) {
      ++corpus.dropped_quizzes;
      corpus.dropped_interactions += seq.quizzes[j].interactions.size();
    }
    for (std::size_t j = first; j < seq.quizzes.size(); ++j) {
      Quiz q;
      q.quiz_id = seq.quizzes[j].quiz_id;
      const auto& src = seq.quizzes[j].interactions;
      const std::size_t keep = std::min(src.size(), caps.quiz_length);
      q.interactions.assign(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(keep));
      corpus.dropped_interactions += src.size() - keep;
      kept.quizzes.push_back(std::move(q));
    }
    corpus.padded.push_back(pad_sequence(kept, caps));
    corpus.sequences.push_back(std::move(kept));
  }
  return corpus;
}

std::vector<Fold> split_folds(std::size_t num_students, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("need at least 2 folds");
  if (num_students < k) {
    throw ConfigError("cannot split " + std::to_string(num_students) + " students into " + std::to_string(k) +
                      " folds");
  }
  std::vector<std::size_t> order(num_students);
  for (std::size_t i = 0; i < num_students; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  std::vector<std::vector<std::size_t>> groups(k);
  std::size_t pos = 0;
  for (std::size_t g = 0; g < k; ++g) {
    const std::size_t size = num_students / k + (g < num_students % k ? 1 : 0);
    groups[g].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                     order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(groups[g].begin(), groups[g].end());
    pos += size;
  }
  std::vector<Fold> folds(k);
  for (std::size_t i = 0; i < k; ++i) {
    folds[i].test = groups[i];
    for (std::size_t g = 0; g < k; ++g) {
      if (g != i) folds[i].train.insert(folds[i].train.end(), groups[g].begin(), groups[g].end());
    }
    std::sort(folds[i].train.begin(), folds[i].train.end());
  }
  return folds;
}

TargetSplit make_target_split(const PaddedSequence& sequence) {
  const std::size_t real = sequence.real_quizzes();
  if (real < 2) {
    throw ContractError("student '" + sequence.student_id + "' has " + std::to_string(real) +
                        " quizzes; at least 2 are needed for a history/target split");
  }
  return make_target_split(sequence, real - 1);
}

TargetSplit make_target_split(const PaddedSequence& sequence, std::size_t target_quiz) {
  const std::size_t real = sequence.real_quizzes();
  if (target_quiz < 1 || target_quiz >= real) {
    throw ContractError("target quiz " + std::to_string(target_quiz) + " needs a non-empty history among " +
                        std::to_string(real) + " quizzes");
  }
  TargetSplit split;
  split.history = sequence;
  auto& h = split.history;
  for (std::size_t l = 0; l < sequence.quiz_length; ++l) {
    const std::size_t s = sequence.slot(target_quiz, l);
    if (!sequence.slot_mask[s]) continue;
    split.targets.push_back({sequence.exercises[s], sequence.answers[s], sequence.source_rows[s]});
  }
  for (std::size_t j = target_quiz; j < sequence.quiz_count; ++j) {
    h.quiz_mask[j] = 0;
    for (std::size_t l = 0; l < sequence.quiz_length; ++l) {
      const std::size_t s = sequence.slot(j, l);
      h.exercises[s] = 0;
      h.answers[s] = 0;
      h.slot_mask[s] = 0;
      h.source_rows[s] = -1;
    }
  }
  return split;
}

// ---------------------------------------------------------------------------
// Statistics

namespace {

struct StatsBuilder {
  const QMatrix& qmatrix;
  CorpusStats stats;
  std::set<std::size_t> exercises;

  void add_student(std::size_t quizzes) {
    ++stats.students;
    stats.quizzes += quizzes;
    ++stats.quiz_number_histogram[quizzes];
  }
  void add_quiz(std::size_t length) {
    stats.interactions += length;
    ++stats.quiz_length_histogram[length];
  }
  void add_exercise(std::size_t e) { exercises.insert(e); }

  CorpusStats finish() {
    std::set<std::size_t> kcs;
    for (std::size_t e : exercises) {
      for (std::size_t k : qmatrix.kcs_of(e)) kcs.insert(k);
    }
    stats.exercises = exercises.size();
    stats.kcs = kcs.size();
    stats.empty = stats.students == 0 || stats.quizzes == 0;
    if (!stats.empty) {
      const double s = static_cast<double>(stats.students);
      stats.avg_interactions_per_student = static_cast<double>(stats.interactions) / s;
      stats.avg_quizzes_per_student = static_cast<double>(stats.quizzes) / s;
      stats.avg_interactions_per_quiz = static_cast<double>(stats.interactions) / static_cast<double>(stats.quizzes);
    }
    return stats;
  }
};

}  // namespace

CorpusStats corpus_stats(std::span<const StudentSequence> sequences, const QMatrix& qmatrix) {
  StatsBuilder b{qmatrix, {}, {}};
  for (const auto& seq : sequences) {
    b.add_student(seq.quizzes.size());
    for (const auto& q : seq.quizzes) {
      b.add_quiz(q.interactions.size());
      for (const auto& it : q.interactions) b.add_exercise(it.exercise);
    }
  }
  return b.finish();
}

CorpusStats corpus_stats(std::span<const PaddedSequence> padded, const QMatrix& qmatrix) {
  StatsBuilder b{qmatrix, {}, {}};
  for (const auto& p : padded) {
    b.add_student(p.real_quizzes());
    for (std::size_t j = 0; j < p.quiz_count; ++j) {
      if (!p.quiz_mask[j]) continue;
      b.add_quiz(p.real_length(j));
      for (std::size_t l = 0; l < p.quiz_length; ++l) {
        const std::size_t s = p.slot(j, l);
        if (p.slot_mask[s]) b.add_exercise(p.exercises[s]);
      }
    }
  }
  return b.finish();
}

void write_stats_report(std::ostream& out, const CorpusStats& stats) {
  const auto flags = out.flags();
  out << "# of students                  " << stats.students << '\n'
      << "# of exercises                 " << stats.exercises << '\n'
      << "# of KCs                       " << stats.kcs << '\n'
      << "# of quizzes                   " << stats.quizzes << '\n'
      << "# of interactions              " << stats.interactions << '\n'
      << std::fixed << std::setprecision(2)
      << "Avg. interactions per student  " << stats.avg_interactions_per_student << '\n'
      << "Avg. quizzes per student       " << stats.avg_quizzes_per_student << '\n'
      << "Avg. interactions per quiz     " << stats.avg_interactions_per_quiz << '\n';
  if (stats.empty) out << "warning: empty corpus, averages reported as 0\n";
  out.flags(flags);
}

void write_histogram_csv(std::ostream& out, const std::map<std::size_t, std::size_t>& histogram) {
  out << "bucket,count\n";
  for (const auto& [bucket, count] : histogram) out << bucket << ',' << count << '\n';
}

}  // namespace qkt::data
