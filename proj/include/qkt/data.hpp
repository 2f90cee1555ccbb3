#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace qkt::data {

// Dense indices for opaque string identifiers, assigned in first-seen order.
class Vocabulary {
 public:
  std::size_t add(const std::string& name);
  std::optional<std::size_t> find(const std::string& name) const;
  const std::string& name(std::size_t index) const { return names_.at(index); }
  std::size_t size() const noexcept { return names_.size(); }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Binary exercise-to-KC relation. The exercise vocabulary is defined by the
// Q-matrix: an interaction on an exercise without a row here has no KC.
class QMatrix {
 public:
  void relate(const std::string& exercise, const std::string& kc);

  std::size_t num_exercises() const noexcept { return exercises_.size(); }
  std::size_t num_kcs() const noexcept { return kcs_.size(); }
  const Vocabulary& exercises() const noexcept { return exercises_; }
  const Vocabulary& kcs() const noexcept { return kcs_; }
  // Sorted, duplicate-free KC indices of an exercise; never empty.
  const std::vector<std::size_t>& kcs_of(std::size_t exercise) const { return kcs_of_.at(exercise); }
  bool related(std::size_t exercise, std::size_t kc) const;
  std::size_t num_relations() const noexcept;

 private:
  Vocabulary exercises_;
  Vocabulary kcs_;
  std::vector<std::vector<std::size_t>> kcs_of_;
};

QMatrix parse_qmatrix(std::istream& in);
QMatrix read_qmatrix(const std::filesystem::path& path);
void write_qmatrix(std::ostream& out, const QMatrix& qmatrix);

struct Interaction {
  std::string student_id;
  std::size_t exercise = 0;
  std::uint8_t answer = 0;
  // Empty when the log carries no quiz boundaries.
  std::string quiz_id;
  std::int64_t order_key = 0;
  // Position in the source (0-based data row); breaks order_key ties.
  std::size_t source_row = 0;

  bool operator==(const Interaction&) const = default;
};

struct ParsedLog {
  std::vector<Interaction> interactions;
  // Rows whose exercise has no Q-matrix entry.
  std::size_t dropped_unmapped = 0;
  std::vector<std::string> warnings;
};

inline constexpr const char* kInteractionHeader = "student_id,exercise_id,quiz_id,timestamp,correct";
inline constexpr const char* kQMatrixHeader = "exercise_id,kc_id";

// Interaction CSV: header `student_id,exercise_id,quiz_id,timestamp,correct`,
// timestamp in integer seconds, correct in {0,1}, quiz_id may be empty.
ParsedLog parse_interaction_log(std::istream& in, const QMatrix& qmatrix);
ParsedLog read_interaction_log(const std::filesystem::path& path, const QMatrix& qmatrix);
void write_interaction_log(std::ostream& out, std::span<const Interaction> interactions, const QMatrix& qmatrix);

struct Quiz {
  std::string quiz_id;
  std::vector<Interaction> interactions;

  bool operator==(const Quiz&) const = default;
};

struct StudentSequence {
  std::string student_id;
  std::vector<Quiz> quizzes;

  std::size_t num_interactions() const;
  bool operator==(const StudentSequence&) const = default;
};

struct SegmentOptions {
  // Fallback mode only: a gap strictly larger than this starts a new quiz.
  std::int64_t gap_threshold_seconds = 3600;
};

// Groups interactions into per-student quiz sequences.
//
// With quiz ids, each maximal run of one quiz id (after ordering by
// order_key) is a quiz, so A,B,A yields three quizzes. Without quiz ids,
// quizzes are split on time gaps. Students are ordered by their first
// interaction, ties by file order.
std::vector<StudentSequence> segment_into_quizzes(std::span<const Interaction> interactions,
                                                  const SegmentOptions& options = {});

struct ProtocolCaps {
  std::size_t quiz_length = 30;  // L cap
  std::size_t quiz_count = 30;   // J cap
};

// Fixed-size [quiz_count x quiz_length] layout of one student, row-major by
// quiz. Real quizzes occupy the leading rows and real interactions the
// leading slots of each row; everything else is padding with mask 0.
struct PaddedSequence {
  std::string student_id;
  std::size_t quiz_count = 0;
  std::size_t quiz_length = 0;
  std::vector<std::size_t> exercises;
  std::vector<std::uint8_t> answers;
  std::vector<std::uint8_t> slot_mask;
  std::vector<std::uint8_t> quiz_mask;
  // Source row of each slot, -1 on padding. Used for leak checks.
  std::vector<std::int64_t> source_rows;

  std::size_t slot(std::size_t quiz, std::size_t position) const { return quiz * quiz_length + position; }
  std::size_t real_quizzes() const;
  std::size_t real_length(std::size_t quiz) const;

  bool operator==(const PaddedSequence&) const = default;
};

PaddedSequence pad_sequence(const StudentSequence& sequence, const ProtocolCaps& caps);

struct PreparedCorpus {
  ProtocolCaps caps;
  std::vector<StudentSequence> sequences;
  std::vector<PaddedSequence> padded;
  std::size_t removed_students = 0;
  std::size_t dropped_quizzes = 0;
  std::size_t dropped_interactions = 0;
};

// Removes students with fewer than 2 quizzes, keeps the last quiz_count
// quizzes of each student and the first quiz_length interactions of each
// quiz, then pads. Idempotent.
PreparedCorpus apply_protocol(std::span<const StudentSequence> sequences, const ProtocolCaps& caps);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Student-level k-fold partition: shuffled (seeded) indices cut into k groups
// whose sizes differ by at most one, larger groups first.
std::vector<Fold> split_folds(std::size_t num_students, std::size_t k, std::uint64_t seed);

struct Target {
  std::size_t exercise = 0;
  std::uint8_t answer = 0;
  std::int64_t source_row = -1;
};

struct TargetSplit {
  PaddedSequence history;
  std::vector<Target> targets;
};

// History is quizzes 0..target_quiz-1; the target quiz and everything after
// it are blanked to padding. Without target_quiz the last real quiz is used.
TargetSplit make_target_split(const PaddedSequence& sequence);
TargetSplit make_target_split(const PaddedSequence& sequence, std::size_t target_quiz);

struct CorpusStats {
  std::size_t students = 0;
  std::size_t exercises = 0;
  std::size_t kcs = 0;
  std::size_t interactions = 0;
  std::size_t quizzes = 0;
  double avg_interactions_per_student = 0.0;
  double avg_quizzes_per_student = 0.0;
  double avg_interactions_per_quiz = 0.0;
  // Set when there is nothing to average over; the averages are then 0.
  bool empty = true;
  std::map<std::size_t, std::size_t> quiz_length_histogram;
  std::map<std::size_t, std::size_t> quiz_number_histogram;
};

CorpusStats corpus_stats(std::span<const StudentSequence> sequences, const QMatrix& qmatrix);
// Reads only unmasked slots of the padded layout.
CorpusStats corpus_stats(std::span<const PaddedSequence> padded, const QMatrix& qmatrix);

void write_stats_report(std::ostream& out, const CorpusStats& stats);
void write_histogram_csv(std::ostream& out, const std::map<std::size_t, std::size_t>& histogram);

}  // namespace qkt::data
