#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "qkt/data.hpp"

namespace qkt::data {

// Parameters of a BKT-style student simulator.
struct SyntheticSpec {
  std::size_t students = 500;
  std::size_t kcs = 20;
  std::size_t exercises_per_kc = 5;
  std::size_t quizzes_per_student = 10;
  std::size_t quiz_length = 10;
  double p_learn = 0.3;
  double p_guess = 0.1;
  double p_slip = 0.1;
  // Probability that a KC starts out mastered.
  double p_init = 0.0;
  std::uint64_t seed = 42;
};

struct MasteryRecord {
  std::string student_id;
  std::size_t quiz_index = 0;
  std::size_t kc = 0;
  // Mastery while the quiz was answered, before any learning from it.
  std::uint8_t mastered = 0;
};

struct SyntheticCorpus {
  QMatrix qmatrix;
  std::vector<Interaction> interactions;
  std::vector<MasteryRecord> mastery;
};

// Each quiz draws one KC uniformly and quiz_length exercises of that KC
// uniformly with replacement. An answer is correct with probability
// 1 - p_slip when the KC is mastered and p_guess otherwise; after the quiz an
// unmastered KC becomes mastered with probability p_learn. Quiz j of every
// student is stamped j days after the start, interactions a minute apart.
SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

inline constexpr const char* kMasteryHeader = "student_id,quiz_index,kc_id,mastered";
void write_mastery_csv(std::ostream& out, std::span<const MasteryRecord> records, const QMatrix& qmatrix);

}  // namespace qkt::data
