#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "model_fixtures.hpp"
#include "qkt/error.hpp"
#include "qkt/metrics.hpp"
#include "qkt/training.hpp"
#include "test_support.hpp"

using namespace qkt;
using namespace qkt::training;
using model::GradientSet;
using model::ModelConfig;
using model::ModelParams;
using qkt::testing::make_qmatrix;
using qkt::testing::tiny_config;

namespace {

std::vector<data::PaddedSequence> random_corpus(std::size_t students, std::uint64_t seed, const data::ProtocolCaps& caps,
                                                std::size_t exercises) {
  Rng rng(seed);
  std::vector<data::PaddedSequence> out;
  for (std::size_t s = 0; s < students; ++s) {
    auto p = qkt::testing::random_padded(rng, 2 + rng.below(caps.quiz_count - 1), caps, exercises);
    p.student_id = "s" + std::to_string(s);
    out.push_back(std::move(p));
  }
  return out;
}

// Every answer of a student equals that student's fixed bit.
std::vector<data::PaddedSequence> memorizable_corpus(std::size_t students, const data::ProtocolCaps& caps,
                                                     std::size_t exercises) {
  Rng rng(99);
  auto out = random_corpus(students, 5, caps, exercises);
  for (std::size_t s = 0; s < students; ++s) {
    const std::uint8_t bit = s % 2;
    for (std::size_t k = 0; k < out[s].answers.size(); ++k) {
      if (out[s].slot_mask[k]) out[s].answers[k] = bit;
    }
  }
  return out;
}

std::vector<std::size_t> all_students(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  const TrainConfig c;
  CHECK(c.batch_size == 32);
  CHECK(lr_schedule(0, c) == 1e-3);
  CHECK(lr_schedule(1, c) == 1e-3);
  CHECK(lr_schedule(2, c) == 1e-3);
  CHECK(lr_schedule(3, c) == 5e-4);
  CHECK(lr_schedule(9, c) == doctest::Approx(1.25e-4).epsilon(1e-15));
}

TEST_CASE("train config round trip and validation") {
  TrainConfig c;
  c.target_policy = TargetPolicy::rolling;
  c.lr0 = 0.1 + 0.2;
  c.select_best = false;
  CHECK(TrainConfig::from_key_values(c.to_key_values()) == c);
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_key_values({{"target_policy", "every"}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_key_values({{"momentum", "0.9"}}), ConfigError);
}

TEST_CASE("loss") {
  ad::Tape tape;
  const std::vector<double> one{1};
  CHECK(loss(tape.constant(ad::Tensor::vector({0.5})), one, {}, 0.0).value()[0] ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const std::vector<double> two{1, 0};
  CHECK(loss(tape.constant(ad::Tensor::vector({0.5, 0.5})), two, {}, 0.0).value()[0] ==
        doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));

  Rng rng(4);
  const ad::Tensor a = qkt::testing::random_tensor({3, 2}, rng);
  const ad::Tensor b = qkt::testing::random_tensor({4}, rng);
  double squares = 0.0;
  for (double v : a.values()) squares += v * v;
  for (double v : b.values()) squares += v * v;
  const std::vector<ad::Var> params{tape.constant(a), tape.constant(b)};
  const ad::Var y = tape.constant(ad::Tensor::vector({0.3, 0.9}));
  const double base = loss(y, two, params, 0.0).value()[0];
  double previous = base;
  for (double lambda : {1e-5, 1e-3, 0.5}) {
    const double with = loss(y, two, params, lambda).value()[0];
    CHECK(with - base == doctest::Approx(lambda * squares).epsilon(1e-9));
    CHECK(with > previous);
    previous = with;
  }
  CHECK_THROWS_AS(loss(tape.constant(ad::Tensor::vector({1.0})), one, {}, 0.0), NumericError);
}

TEST_CASE("adam") {
  TrainConfig c;
  ModelConfig mc = tiny_config(2, 3, 2, 3, 3);
  ModelParams p = ModelParams::initialize(mc);
  const ModelParams original = p;
  OptimizerState s = OptimizerState::zeros_like(p);
  GradientSet g = GradientSet::zeros_like(p);

  adam_step(p, g, s, 1e-3, c);
  CHECK(p == original);
  CHECK(s.step == 1);

  // First step on one scalar: m = 0.1 g, v = 0.001 g^2, bias-corrected to g and g^2.
  p = original;
  s = OptimizerState::zeros_like(p);
  const std::size_t b8 = p.index_of("b8");
  g.buffers[b8][0] = 0.37;
  adam_step(p, g, s, 1e-3, c);
  const double m_hat = (0.1 * 0.37) / (1.0 - 0.9);
  const double v_hat = (0.001 * 0.37 * 0.37) / (1.0 - 0.999);
  CHECK(p.at("b8")[0] == doctest::Approx(original.at("b8")[0] - 1e-3 * m_hat / (std::sqrt(v_hat) + 1e-8)).epsilon(1e-14));
  CHECK(std::abs((original.at("b8")[0] - p.at("b8")[0]) - 1e-3) < 1e-9);
  for (const auto& e : p.entries()) {
    if (e.name != "b8") CHECK(std::ranges::equal(e.tensor.values(), original.at(e.name).values()));
  }

  GradientSet wrong = g;
  wrong.buffers[0].pop_back();
  CHECK_THROWS_AS(adam_step(p, wrong, s, 1e-3, c), ContractError);
  wrong.buffers.pop_back();
  CHECK_THROWS_AS(adam_step(p, wrong, s, 1e-3, c), ContractError);
}

TEST_CASE("validation split") {
  const auto students = all_students(40);
  const auto [fit, val] = split_validation(students, 0.1, 7);
  CHECK(fit.size() == 36);
  CHECK(val.size() == 4);
  std::vector<std::size_t> both = fit;
  both.insert(both.end(), val.begin(), val.end());
  std::sort(both.begin(), both.end());
  CHECK(both == students);
  CHECK(split_validation(students, 0.1, 7) == std::make_pair(fit, val));
  CHECK(split_validation(students, 0.0, 7).second.empty());
  const std::vector<std::size_t> single{5};
  CHECK(split_validation(single, 0.5, 1).first == single);
}

TEST_CASE("training loss gradients agree with the single-tape loss") {
  const auto q = make_qmatrix(10, 3, 2);
  ModelConfig mc = tiny_config(4, 10, 3, 4, 5);
  mc.lambda_reg = 0.01;
  const auto corpus = random_corpus(1, 8, {4, 5}, 10);
  for (auto policy : {TargetPolicy::last_quiz, TargetPolicy::rolling}) {
    ModelParams p = ModelParams::initialize(mc);
    GradientSet g = GradientSet::zeros_like(p);
    const double data_loss = student_loss(mc, policy, p, corpus[0], q, g).first;

    // Same objective on one tape, including the L2 term.
    ad::Tape tape;
    auto net = model::Network::with_own_gradients(tape, mc, p);
    std::vector<model::PrefixTarget> prefixes;
    std::vector<double> labels;
    const std::size_t r = corpus[0].real_quizzes();
    for (std::size_t t = policy == TargetPolicy::rolling ? 1 : r - 1; t < r; ++t) {
      model::PrefixTarget pt{t, {}};
      for (std::size_t l = 0; l < corpus[0].real_length(t); ++l) {
        pt.exercises.push_back(corpus[0].exercises[corpus[0].slot(t, l)]);
        labels.push_back(corpus[0].answers[corpus[0].slot(t, l)]);
      }
      prefixes.push_back(pt);
    }
    const auto preds = net.forward_prefixes(corpus[0], prefixes, q);
    ad::Var y = preds[0];
    for (std::size_t i = 1; i < preds.size(); ++i) y = ad::concat(y, preds[i], 0);
    std::vector<ad::Var> bound;
    for (const auto& e : p.entries()) bound.push_back(net.param(e.name));
    const ad::Var total = loss(y, labels, bound, mc.lambda_reg);
    CHECK(total.value()[0] == doctest::Approx(data_loss + mc.lambda_reg * p.sum_squares()).epsilon(1e-12));
    tape.backward(total);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const auto values = p.entries()[i].tensor.values();
      const auto own = p.entries()[i].tensor.grad();
      for (std::size_t k = 0; k < values.size(); ++k) {
        CHECK(g.buffers[i][k] + 2.0 * mc.lambda_reg * values[k] == doctest::Approx(own[k]).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("train") {
  const auto q = make_qmatrix(10, 3, 2);
  const data::ProtocolCaps caps{4, 5};
  ModelConfig mc = tiny_config(6, 10, 3, 4, 5);
  const auto corpus = random_corpus(12, 31, caps, 10);

  SUBCASE("one student, one epoch is one optimizer step") {
    TrainConfig tc;
    tc.epochs = 1;
    tc.validation_fraction = 0.0;
    const auto r = train(mc, tc, {corpus, {0}, {}, &q});
    CHECK(r.state.optimizer.step == 1);
    CHECK(r.state.log.size() == 1);
    CHECK(std::isnan(r.state.log[0].val_auc));
    CHECK(r.params == r.state.params);
  }
  SUBCASE("loss decreases over the first epochs with the default schedule") {
    ModelConfig defaults;
    defaults.num_exercises = 10;
    defaults.num_kcs = 3;
    defaults.quiz_length = 4;
    defaults.quiz_count = 5;
    TrainConfig tc;
    tc.epochs = 5;
    const auto [fit, val] = split_validation(all_students(12), tc.validation_fraction, tc.seed);
    const auto r = train(defaults, tc, {corpus, fit, val, &q});
    REQUIRE(r.state.log.size() == 5);
    for (std::size_t e = 1; e < 5; ++e) CHECK(r.state.log[e].train_loss < r.state.log[e - 1].train_loss);
    CHECK(r.state.log[4].lr == 1e-3 * 0.5);
  }
  SUBCASE("memorisation") {
    const auto easy = memorizable_corpus(20, caps, 10);
    TrainConfig tc;
    tc.epochs = 200;
    tc.lr0 = 1e-2;
    tc.decay_every_epochs = 1000;
    tc.validation_fraction = 0.0;
    tc.batch_size = 20;
    const auto students = all_students(20);
    const auto r = train(mc, tc, {easy, students, {}, &q});
    CHECK(metrics::evaluate(mc, r.params, easy, students, q).auc > 0.95);
  }
  SUBCASE("determinism and resume") {
    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 5;
    tc.target_policy = TargetPolicy::rolling;
    const auto [fit, val] = split_validation(all_students(12), 0.25, 3);
    const TrainData td{corpus, fit, val, &q};
    std::ostringstream saved;
    const auto a = train(mc, tc, td, nullptr, [&](const EpochLog& row, const TrainState& s) {
      if (row.epoch == 1) write_train_state(saved, mc, s);
    });
    const auto b = train(mc, tc, td);
    CHECK(a.state.log == b.state.log);
    CHECK(a.params == b.params);
    CHECK(a.state.optimizer == b.state.optimizer);

    std::istringstream in(saved.str());
    const TrainState mid = read_train_state(in, mc);
    CHECK(mid.next_epoch == 2);
    CHECK(mid.log.size() == 2);
    const auto resumed = train(mc, tc, td, &mid);
    CHECK(resumed.state.log == a.state.log);
    CHECK(resumed.params == a.params);
    CHECK(resumed.state.best_epoch == a.state.best_epoch);

    ModelConfig other = mc;
    other.dim = 5;
    std::istringstream again(saved.str());
    CHECK_THROWS_AS(read_train_state(again, other), ConfigError);
  }
  SUBCASE("best-validation selection") {
    TrainConfig tc;
    tc.epochs = 3;
    const auto [fit, val] = split_validation(all_students(12), 0.3, 3);
    const auto r = train(mc, tc, {corpus, fit, val, &q});
    if (r.state.has_best) {
      CHECK(r.params == r.state.best_params);
      double best = -1.0;
      for (const auto& row : r.state.log) best = std::max(best, row.val_auc);
      CHECK(r.state.best_auc == best);
    }
  }
  SUBCASE("parallel gradients match the serial ones closely") {
    TrainConfig tc;
    tc.epochs = 2;
    tc.validation_fraction = 0.0;
    const auto serial = train(mc, tc, {corpus, all_students(12), {}, &q});
    tc.threads = 3;
    const auto parallel = train(mc, tc, {corpus, all_students(12), {}, &q});
    for (std::size_t i = 0; i < serial.params.size(); ++i) {
      const auto a = serial.params.entries()[i].tensor.values();
      const auto b = parallel.params.entries()[i].tensor.values();
      for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-9));
    }
  }
  SUBCASE("non-finite loss aborts with a description of the batch") {
    TrainConfig tc;
    tc.epochs = 1;
    tc.validation_fraction = 0.0;
    TrainState broken;
    broken.params = ModelParams::initialize(mc);
    broken.params.at("b8")[0] = std::numeric_limits<double>::quiet_NaN();
    broken.optimizer = OptimizerState::zeros_like(broken.params);
    try {
      train(mc, tc, {corpus, all_students(3), {}, &q}, &broken);
      FAIL("expected a numeric failure");
    } catch (const NumericError& e) {
      const std::string what = e.what();
      CHECK(what.find("epoch 0, batch 0") != std::string::npos);
      CHECK(what.find("s1") != std::string::npos);
    }
  }
}

TEST_CASE("epoch log format") {
  std::ostringstream out;
  write_epoch_log_header(out);
  write_epoch_log_row(out, {2, 1e-3, 0.5, 0.75, 0.25, 0.125});
  CHECK(out.str() == "epoch,lr,train_loss,val_auc,val_rmse,val_r2\n2,0.001,0.5,0.75,0.25,0.125\n");
}
