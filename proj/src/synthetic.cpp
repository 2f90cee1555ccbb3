#include "qkt/synthetic.hpp"

#include <ostream>

#include "qkt/error.hpp"
#include "qkt/random.hpp"

namespace qkt::data {

namespace {

void check_probability(const char* name, double p) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ConfigError(std::string(name) + " must lie in [0, 1], got " + std::to_string(p));
  }
}

}  // namespace

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  check_probability("p_learn", spec.p_learn);
  check_probability("p_guess", spec.p_guess);
  check_probability("p_slip", spec.p_slip);
  check_probability("p_init", spec.p_init);
  if (spec.students == 0 || spec.kcs == 0 || spec.exercises_per_kc == 0 || spec.quizzes_per_student == 0 ||
      spec.quiz_length == 0) {
    throw ConfigError("synthetic corpus sizes must all be positive");
  }

  SyntheticCorpus corpus;
  for (std::size_t k = 0; k < spec.kcs; ++k) {
    for (std::size_t i = 0; i < spec.exercises_per_kc; ++i) {
      corpus.qmatrix.relate("e" + std::to_string(k * spec.exercises_per_kc + i), "k" + std::to_string(k));
    }
  }

  constexpr std::int64_t kDay = 86400;
  constexpr std::int64_t kMinute = 60;
  Rng rng(spec.seed);
  std::size_t row = 0;
  for (std::size_t s = 0; s < spec.students; ++s) {
    const std::string student = "s" + std::to_string(s);
    std::vector<std::uint8_t> mastered(spec.kcs);
    for (auto& m : mastered) m = rng.bernoulli(spec.p_init) ? 1 : 0;

    for (std::size_t j = 0; j < spec.quizzes_per_student; ++j) {
      const std::size_t kc = rng.below(spec.kcs);
      const bool knows = mastered[kc] != 0;
      corpus.mastery.push_back({student, j, kc, static_cast<std::uint8_t>(knows)});
      const std::string quiz = "q" + std::to_string(j);
      for (std::size_t l = 0; l < spec.quiz_length; ++l) {
        Interaction it;
        it.student_id = student;
        it.exercise = kc * spec.exercises_per_kc + rng.below(spec.exercises_per_kc);
        it.answer = rng.bernoulli(knows ? 1.0 - spec.p_slip : spec.p_guess) ? 1 : 0;
        it.quiz_id = quiz;
        it.order_key = static_cast<std::int64_t>(j) * kDay + static_cast<std::int64_t>(l) * kMinute;
        it.source_row = row++;
        corpus.interactions.push_back(std::move(it));
      }
      if (!knows && rng.bernoulli(spec.p_learn)) mastered[kc] = 1;
    }
  }
  return corpus;
}

void write_mastery_csv(std::ostream& out, std::span<const MasteryRecord> records, const QMatrix& qmatrix) {
  out << kMasteryHeader << '\n';
  for (const auto& r : records) {
    out << r.student_id << ',' << r.quiz_index << ',' << qmatrix.kcs().name(r.kc) << ','
        << static_cast<int>(r.mastered) << '\n';
  }
}

}  // namespace qkt::data
