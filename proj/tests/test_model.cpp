#include <cmath>
#include <sstream>

#include "doctest.h"
#include "model_fixtures.hpp"
#include "qkt/error.hpp"
#include "qkt/grad_check.hpp"
#include "qkt/model.hpp"
#include "test_support.hpp"

using namespace qkt;
using namespace qkt::model;
using ad::Shape;
using qkt::testing::make_qmatrix;
using qkt::testing::random_padded;
using qkt::testing::random_tensor;
using qkt::testing::tiny_config;

namespace {

double sigma(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<double> values_of(Var v) { return {v.value().values().begin(), v.value().values().end()}; }

Tensor identity(std::size_t d) {
  Tensor t = Tensor::zeros({d, d});
  for (std::size_t i = 0; i < d; ++i) t.at(i, i) = 1.0;
  return t;
}

void fill(ModelParams& p, const std::string& name, double v) {
  for (double& x : p.at(name).values()) x = v;
}

}  // namespace

TEST_CASE("config validation and key-value round trip") {
  ModelConfig c = tiny_config(4, 10, 3, 5, 4);
  c.gamma = 0.25;
  c.use_ra = false;
  c.candidate = Candidate::reset_before;
  c.gate_bias = GateBias::outside;
  CHECK(ModelConfig::from_key_values(c.to_key_values()) == c);

  ModelConfig bad = c;
  bad.use_sub = bad.use_com = false;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.dim = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.gamma = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_key_values({{"dimension", "3"}}), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_key_values({{"candidate", "lstm"}}), ConfigError);
  CHECK(ModelConfig().dim == 128);
  CHECK(ModelConfig().gamma == 1e-5);
}

TEST_CASE("parameter layout follows the ablation flags") {
  ModelConfig c = tiny_config(4, 10, 3, 5, 4);
  ModelParams full = ModelParams::initialize(c);
  CHECK(full.size() == 25);
  CHECK(full.at("W7").shape() == Shape{12, 4});
  CHECK(full.at("W8").shape() == Shape{4, 1});
  CHECK(full.at("W2").shape() == Shape{8, 4});
  const double bound = 0.5;
  for (const auto& e : full.entries()) {
    for (double v : e.tensor.values()) CHECK((v >= -bound && v <= bound));
  }

  c.use_ki = false;
  CHECK_FALSE(ModelParams::initialize(c).contains("W2"));
  c.use_ki = true;
  c.use_sub = false;
  const ModelParams no_sub = ModelParams::initialize(c);
  for (const char* n : {"W3", "W4", "W5", "b3", "b4", "b5"}) CHECK_FALSE(no_sub.contains(n));
  c.use_sub = true;
  c.use_com = false;
  const ModelParams no_com = ModelParams::initialize(c);
  for (const char* n : {"W_query", "W_key", "W_value"}) CHECK_FALSE(no_com.contains(n));
  c.use_com = true;
  c.use_ra = false;
  CHECK(ModelParams::initialize(c).size() == full.size());

  c.use_ra = true;
  CHECK(ModelParams::initialize(c) == full);
  c.seed = 4;
  CHECK_FALSE(ModelParams::initialize(c) == full);
}

TEST_CASE("embed_exercises") {
  const auto q = make_qmatrix(6, 3, 2);  // e0: {k0,k1}, e1: {k1,k2}, others single
  ModelConfig c = tiny_config(3, 6, 3, 4, 3);
  ModelParams p = ModelParams::initialize(c);
  Rng rng(1);
  p.at("exercise_embedding") = random_tensor({6, 3}, rng, 0.0, 1.0);
  p.at("kc_embedding") = random_tensor({3, 3}, rng, 0.0, 1.0);
  p.at("W1") = identity(3);
  fill(p, "b1", 0.0);
  const Tensor& E = p.at("exercise_embedding");
  const Tensor& K = p.at("kc_embedding");

  SUBCASE("identity weights give e + mean KC embedding") {
    Tape tape;
    Network net(tape, c, p);
    const std::vector<std::size_t> ids{3, 0, 1, 4};
    const auto v = values_of(net.embed_exercises(ids, q));
    for (std::size_t c2 = 0; c2 < 3; ++c2) {
      CHECK(v[0 * 3 + c2] == doctest::Approx(E.at(3, c2) + K.at(0, c2)).epsilon(1e-15));
      CHECK(v[1 * 3 + c2] == doctest::Approx(E.at(0, c2) + (K.at(0, c2) + K.at(1, c2)) / 2).epsilon(1e-15));
      CHECK(v[2 * 3 + c2] == doctest::Approx(E.at(1, c2) + (K.at(1, c2) + K.at(2, c2)) / 2).epsilon(1e-15));
      CHECK(v[3 * 3 + c2] == doctest::Approx(E.at(4, c2) + K.at(1, c2)).epsilon(1e-15));
    }
  }
  SUBCASE("negative pre-activation clamps to zero") {
    fill(p, "b1", -10.0);
    Tape tape;
    Network net(tape, c, p);
    const std::vector<std::size_t> ids{0, 5};
    for (double v : values_of(net.embed_exercises(ids, q))) CHECK(v == 0.0);
  }
  SUBCASE("out-of-range ids") {
    Tape tape;
    Network net(tape, c, p);
    const std::vector<std::size_t> ids{6};
    CHECK_THROWS_AS(net.embed_exercises(ids, q), ContractError);
  }
}

TEST_CASE("encode_interactions") {
  ModelConfig c = tiny_config(2, 4, 2, 4, 3);
  ModelParams p = ModelParams::initialize(c);
  p.at("W_right") = identity(2);
  p.at("b_right") = Tensor::vector({0.1, 0.1});

  SUBCASE("hand case") {
    Tape tape;
    Network net(tape, c, p);
    const std::vector<std::uint8_t> right{1};
    const auto v = values_of(net.encode_interactions(tape.constant(Tensor::matrix({{1, 2}})), right));
    CHECK(v[0] == doctest::Approx(1.1).epsilon(1e-15));
    CHECK(v[1] == doctest::Approx(2.1).epsilon(1e-15));
  }
  SUBCASE("zero weights give the bias of the chosen layer, rows in order") {
    fill(p, "W_right", 0.0);
    fill(p, "W_wrong", 0.0);
    p.at("b_wrong") = Tensor::vector({-3, -4});
    Tape tape;
    Network net(tape, c, p);
    const std::vector<std::uint8_t> answers{0, 1, 0};
    const auto v = values_of(net.encode_interactions(tape.constant(Tensor::matrix({{1, 2}, {3, 4}, {5, 6}})), answers));
    CHECK(v == std::vector<double>{-3, -4, 0.1, 0.1, -3, -4});
  }
  SUBCASE("right answers never read the wrong layer") {
    Tape t1, t2;
    Network n1(t1, c, p);
    const std::vector<std::uint8_t> answers{1, 1};
    const Tensor x = Tensor::matrix({{1, 2}, {-1, 0.5}});
    const auto before = values_of(n1.encode_interactions(t1.constant(x), answers));
    fill(p, "W_wrong", 123.0);
    Network n2(t2, c, p);
    CHECK(values_of(n2.encode_interactions(t2.constant(x), answers)) == before);
  }
}

TEST_CASE("adjacent_gate_combine") {
  ModelConfig c = tiny_config(1, 4, 2, 4, 3);
  ModelParams p = ModelParams::initialize(c);

  SUBCASE("hand case") {
    p.at("W2") = Tensor::matrix({{1}, {-1}});
    fill(p, "b2", 0.0);
    Tape tape;
    Network net(tape, c, p);
    Var gates;
    const auto x = values_of(net.adjacent_gate_combine(tape.constant(Tensor::matrix({{1}})),
                                                       tape.constant(Tensor::matrix({{0}})), &gates));
    CHECK(gates.value()[0] == doctest::Approx(0.7310585786300049).epsilon(1e-15));
    CHECK(x[0] == doctest::Approx(0.2689414213699951).epsilon(1e-15));
  }
  SUBCASE("zero weights average the pair") {
    ModelConfig c3 = tiny_config(3, 4, 2, 4, 3);
    ModelParams p3 = ModelParams::initialize(c3);
    fill(p3, "W2", 0.0);
    fill(p3, "b2", 0.0);
    Tape tape;
    Network net(tape, c3, p3);
    const auto x = values_of(net.adjacent_gate_combine(tape.constant(Tensor::matrix({{1, 2, 3}, {0, 0, 0}})),
                                                       tape.constant(Tensor::matrix({{3, 2, 1}, {4, -4, 8}}))));
    CHECK(x == std::vector<double>{2, 2, 2, 2, -2, 4});
  }
  SUBCASE("large bias selects the current interaction") {
    fill(p, "b2", 50.0);
    Tape tape;
    Network net(tape, c, p);
    const auto x = values_of(net.adjacent_gate_combine(tape.constant(Tensor::matrix({{-2}})),
                                                       tape.constant(Tensor::matrix({{0.75}}))));
    CHECK(x[0] == doctest::Approx(0.75).epsilon(1e-12));
  }
  SUBCASE("literal bias placement adds the bias after the sigmoid") {
    c.gate_bias = GateBias::outside;
    p.at("W2") = Tensor::matrix({{1}, {-1}});
    p.at("b2") = Tensor::vector({0.5});
    Tape tape;
    Network net(tape, c, p);
    Var gates;
    net.adjacent_gate_combine(tape.constant(Tensor::matrix({{1}})), tape.constant(Tensor::matrix({{0}})), &gates);
    CHECK(gates.value()[0] == doctest::Approx(sigma(1.0) + 0.5).epsilon(1e-15));
  }
}

TEST_CASE("quiz_pool and complementarity_pool") {
  ModelConfig c = tiny_config(2, 4, 2, 4, 3);
  ModelParams p = ModelParams::initialize(c);
  Tape tape;
  Network net(tape, c, p);
  const std::vector<std::uint8_t> one{1};
  CHECK(values_of(net.quiz_pool(tape.constant(Tensor::matrix({{0.3, -0.7}})), one)) ==
        std::vector<double>{0.3, -0.7});
  const std::vector<std::uint8_t> all{1, 1, 1};
  CHECK(values_of(net.complementarity_pool(tape.constant(Tensor::matrix({{1, 2}, {1, 2}, {1, 2}})), all)) ==
        std::vector<double>{1, 2});

  const std::vector<std::uint8_t> mask{1, 1, 0};
  const auto a = values_of(net.quiz_pool(tape.constant(Tensor::matrix({{1, 2}, {3, 4}, {5, 6}})), mask));
  const auto b = values_of(net.quiz_pool(tape.constant(Tensor::matrix({{1, 2}, {3, 4}, {-50, 1e9}})), mask));
  CHECK(a == b);
  CHECK(a == std::vector<double>{2, 3});
  const auto ca = values_of(net.complementarity_pool(tape.constant(Tensor::matrix({{1, 2}, {3, 4}, {5, 6}})), mask));
  const auto cb = values_of(net.complementarity_pool(tape.constant(Tensor::matrix({{1, 2}, {3, 4}, {7, 8}})), mask));
  CHECK(ca == cb);
  const std::vector<std::uint8_t> none{0, 0, 0};
  CHECK_THROWS_AS(net.quiz_pool(tape.constant(Tensor::zeros({3, 2})), none), ContractError);
}

TEST_CASE("substitution_path") {
  ModelConfig c = tiny_config(1, 4, 2, 4, 3);
  ModelParams p = ModelParams::initialize(c);
  for (const char* n : {"W3", "W4", "W5"}) fill(p, n, 0.5);
  for (const char* n : {"b3", "b4", "b5"}) fill(p, n, 0.0);
  const Tensor q = Tensor::matrix({{1}, {-1}});
  const std::vector<std::uint8_t> both{1, 1};

  SUBCASE("hand case, reset after projection") {
    Tape tape;
    Network net(tape, c, p);
    const auto steps = net.substitution_path(tape.constant(q), both);
    REQUIRE(steps.size() == 2);
    CHECK(steps[0].state.value()[0] == doctest::Approx(0.18770594548338167).epsilon(1e-14));
    CHECK(steps[1].state.value()[0] == doctest::Approx(0.048288730924205418).epsilon(1e-14));
  }
  SUBCASE("hand case, reset before projection") {
    c.candidate = Candidate::reset_before;
    Tape tape;
    Network net(tape, c, p);
    const auto steps = net.substitution_path(tape.constant(q), both);
    CHECK(steps[0].state.value()[0] == doctest::Approx(0.28764913664496792).epsilon(1e-14));
    CHECK(steps[1].state.value()[0] == doctest::Approx(-0.0014632958671102735).epsilon(1e-12));
  }
  SUBCASE("no-update limit keeps the zero state") {
    fill(p, "b4", -1000.0);
    Tape tape;
    Network net(tape, c, p);
    const auto steps = net.substitution_path(tape.constant(q), both);
    CHECK(std::abs(steps[1].state.value()[0]) < 1e-300);
  }
  SUBCASE("full-update limit takes the candidate") {
    fill(p, "b4", 1000.0);
    Tape tape;
    Network net(tape, c, p);
    const auto steps = net.substitution_path(tape.constant(q), both);
    for (const auto& s : steps) CHECK(s.state.value()[0] == doctest::Approx(s.candidate.value()[0]).epsilon(1e-15));
  }
  SUBCASE("masked quizzes are skipped") {
    Tape tape;
    Network net(tape, c, p);
    const std::vector<std::uint8_t> gap{1, 0, 1};
    const auto with_gap = net.substitution_path(tape.constant(Tensor::matrix({{1}, {99}, {-1}})), gap);
    const auto plain = net.substitution_path(tape.constant(q), both);
    REQUIRE(with_gap.size() == 2);
    CHECK(with_gap[1].state.value()[0] == plain[1].state.value()[0]);
  }
  SUBCASE("gates stay inside (0, 1)") {
    ModelConfig c4 = tiny_config(4, 4, 2, 4, 6);
    ModelParams p4 = ModelParams::initialize(c4);
    Rng rng(5);
    Tape tape;
    Network net(tape, c4, p4);
    const std::vector<std::uint8_t> mask(6, 1);
    for (const auto& s : net.substitution_path(tape.constant(random_tensor({6, 4}, rng, -5, 5)), mask)) {
      for (double v : s.reset.value().values()) CHECK((v > 0.0 && v < 1.0));
      for (double v : s.update.value().values()) CHECK((v > 0.0 && v < 1.0));
    }
  }
}

TEST_CASE("recency offsets") {
  const std::vector<std::uint8_t> two{1, 1};
  const auto off = recency_offsets(two, 1e-5);
  // beta1 - beta2 for softmax([1e-5, 2e-5]) and softmax([1e-5, 0]), evaluated at 40 digits.
  CHECK(std::abs(off[0] - -4.999999999958333e-6) < 1e-11);
  CHECK(std::abs(off[1] - 4.999999999958333e-6) < 1e-11);

  const std::vector<std::uint8_t> gaps{1, 0, 1, 0};
  const auto masked = recency_offsets(gaps, 1e-5);
  CHECK(masked[1] == 0.0);
  CHECK(masked[3] == 0.0);
  CHECK(masked[0] == off[0]);
  CHECK(masked[2] == off[1]);

  const std::vector<std::uint8_t> one{1};
  CHECK(recency_offsets(one, 1e-5)[0] == 0.0);
  const std::vector<std::uint8_t> five(5, 1);
  for (double v : recency_offsets(five, 0.0)) CHECK(v == 0.0);
}

TEST_CASE("recency_attention") {
  ModelConfig c = tiny_config(3, 4, 2, 4, 12);
  ModelParams p = ModelParams::initialize(c);
  Rng rng(9);

  SUBCASE("single quiz") {
    Tape tape;
    Network net(tape, c, p);
    const std::vector<std::uint8_t> one{1};
    Var q = tape.constant(random_tensor({1, 3}, rng));
    const auto att = net.recency_attention(q, one);
    CHECK(att.weights.value()[0] == doctest::Approx(1.0).epsilon(1e-15));
    const auto v = values_of(ad::matmul(q, net.param("W_value")));
    const auto z = values_of(att.contextualized);
    for (std::size_t i = 0; i < 3; ++i) CHECK(z[i] == doctest::Approx(v[i]).epsilon(1e-14));
  }
  SUBCASE("rows sum to one, with and without recency, under masking") {
    for (bool ra : {true, false}) {
      c.use_ra = ra;
      for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.below(10);
        std::vector<std::uint8_t> mask(n, 1);
        for (auto& m : mask) m = rng.bernoulli(0.7) ? 1 : 0;
        mask[rng.below(n)] = 1;
        Tape tape;
        Network net(tape, c, p);
        const auto att = net.recency_attention(tape.constant(random_tensor({n, 3}, rng, -3, 3)), mask);
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t k = 0; k < n; ++k) {
            s += att.weights.value()[j * n + k];
            if (!mask[k]) CHECK(att.weights.value()[j * n + k] == 0.0);
          }
          CHECK(std::abs(s - 1.0) < 1e-6);
        }
      }
    }
  }
  SUBCASE("identical quizzes: weight grows with recency, uniform without it") {
    const std::size_t n = 6;
    Tensor same = Tensor::zeros({n, 3});
    for (std::size_t j = 0; j < n; ++j) same.at(j, 0) = 0.4, same.at(j, 1) = -0.2, same.at(j, 2) = 0.9;
    const std::vector<std::uint8_t> mask(n, 1);
    {
      Tape tape;
      Network net(tape, c, p);
      const auto& w = net.recency_attention(tape.constant(same), mask).weights.value();
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 1; k < n; ++k) CHECK(w[j * n + k] > w[j * n + k - 1]);
      }
    }
    for (int variant = 0; variant < 2; ++variant) {
      ModelConfig flat = c;
      if (variant == 0) flat.gamma = 0.0;
      else flat.use_ra = false;
      Tape tape;
      Network net(tape, flat, p);
      const auto& w = net.recency_attention(tape.constant(same), mask).weights.value();
      for (std::size_t k = 0; k < n * n; ++k) CHECK(w[k] == w[0]);
    }
  }
  SUBCASE("masked quizzes are inert") {
    const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0};
    Tensor a = random_tensor({5, 3}, rng);
    Tensor b = a;
    for (std::size_t k = 0; k < 3; ++k) b.at(1, k) = 7.0, b.at(4, k) = -3.0;
    Tape tape;
    Network net(tape, c, p);
    const auto za = net.recency_attention(tape.constant(a), mask).contextualized;
    const auto zb = net.recency_attention(tape.constant(b), mask).contextualized;
    CHECK(values_of(net.complementarity_pool(za, mask)) == values_of(net.complementarity_pool(zb, mask)));
  }
}

TEST_CASE("integrate_state") {
  ModelConfig c = tiny_config(2, 4, 2, 4, 3);
  ModelParams p = ModelParams::initialize(c);
  p.at("W6") = Tensor::matrix({{1, 2}, {3, 4}});
  p.at("b6") = Tensor::vector({0.5, -0.5});
  Tape tape;
  Network net(tape, c, p);
  Var sub = tape.constant(Tensor::matrix({{1, -1}}));
  Var com = tape.constant(Tensor::vector({0.5, 0.5}));
  // (1.5, -0.5) through W6 plus b6.
  CHECK(values_of(net.integrate_state(sub, com)) == std::vector<double>{0.5, 0.5});
  // Only sub: (1, -1) -> (1 - 3, 2 - 4) + b6.
  CHECK(values_of(net.integrate_state(sub, std::nullopt)) == std::vector<double>{-1.5, -2.5});
  CHECK_THROWS_AS(net.integrate_state(std::nullopt, std::nullopt), ConfigError);

  ModelParams q = ModelParams::initialize(c);
  q.at("W6") = identity(2);
  fill(q, "b6", 0.0);
  Tape t2;
  Network n2(t2, c, q);
  CHECK(values_of(n2.integrate_state(t2.constant(Tensor::matrix({{1, -1}})), t2.constant(Tensor::vector({0.5, 0.5})))) ==
        std::vector<double>{1.5, -0.5});
}

TEST_CASE("predict") {
  ModelConfig c = tiny_config(2, 4, 2, 4, 3);
  ModelParams p = ModelParams::initialize(c);
  Rng rng(4);

  SUBCASE("zero head gives one half") {
    for (const char* n : {"W7", "b7", "W8", "b8"}) fill(p, n, 0.0);
    Tape tape;
    Network net(tape, c, p);
    const auto y = values_of(net.predict(tape.constant(Tensor::vector({3, -2})), tape.constant(random_tensor({3, 2}, rng))));
    CHECK(y == std::vector<double>{0.5, 0.5, 0.5});
  }
  SUBCASE("hand case against the direct formula") {
    const Tensor h = Tensor::vector({0.3, -1.2});
    const Tensor e = Tensor::matrix({{0.5, 2.0}, {-1.0, 0.25}});
    Tape tape;
    Network net(tape, c, p);
    const auto y = values_of(net.predict(tape.constant(h), tape.constant(e)));
    const Tensor& W7 = p.at("W7");
    const Tensor& b7 = p.at("b7");
    const Tensor& W8 = p.at("W8");
    const double b8 = p.at("b8")[0];
    for (std::size_t n = 0; n < 2; ++n) {
      const double f[6] = {e.at(n, 0) * h[0], e.at(n, 1) * h[1], e.at(n, 0), e.at(n, 1), h[0], h[1]};
      double logit = b8;
      for (std::size_t k = 0; k < 2; ++k) {
        double hidden = b7[k];
        for (std::size_t r = 0; r < 6; ++r) hidden += f[r] * W7.at(r, k);
        logit += hidden * W8.at(k, 0);
      }
      CHECK(y[n] == doctest::Approx(sigma(logit)).epsilon(1e-14));
    }
  }
  SUBCASE("extreme inputs stay inside (0, 1)") {
    Tape tape;
    Network net(tape, c, p);
    for (double v : values_of(net.predict(tape.constant(Tensor::vector({1e6, -1e6})),
                                          tape.constant(Tensor::matrix({{1e6, 1e6}, {-1e6, 1e6}}))))) {
      CHECK((v > 0.0 && v < 1.0));
    }
  }
}

TEST_CASE("forward") {
  const ModelConfig c = tiny_config(4, 12, 4, 5, 6);
  const auto q = make_qmatrix(12, 4, 3);
  const ModelParams p = ModelParams::initialize(c);
  const data::ProtocolCaps caps{5, 6};
  Rng rng(21);

  SUBCASE("single history quiz of one interaction") {
    const auto seq = random_padded(rng, 1, caps, 12, 1);
    const std::vector<std::size_t> targets{3, 7};
    const auto y = predict_targets(c, p, seq, targets, q);
    REQUIRE(y.size() == 2);
    for (double v : y) CHECK((v > 0.0 && v < 1.0));
  }
  SUBCASE("trace invariants") {
    const auto seq = random_padded(rng, 5, caps, 12);
    const std::vector<std::size_t> targets{1, 2, 3};
    Tape tape;
    Network net(tape, c, p);
    ForwardTrace trace;
    net.forward(seq, targets, q, &trace);
    CHECK(trace.quiz_vectors.value().rows() == 5);
    CHECK(trace.gru.size() == 5);
    CHECK(trace.interaction_vectors.value().rows() == seq.real_length(0) + seq.real_length(1) + seq.real_length(2) +
                                                          seq.real_length(3) + seq.real_length(4));
    if (trace.gates.valid()) {
      for (double v : trace.gates.value().values()) CHECK((v > 0.0 && v < 1.0));
    }
    REQUIRE(trace.attention);
    const auto& w = trace.attention->weights.value();
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 5; ++k) s += w[j * 5 + k];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    for (double v : trace.predictions.value().values()) CHECK((v > 0.0 && v < 1.0));
  }
  SUBCASE("padding is bit-inert") {
    for (int trial = 0; trial < 20; ++trial) {
      auto seq = random_padded(rng, 1 + rng.below(6), caps, 12);
      const auto targets = qkt::testing::random_targets(rng, 4, 12);
      const auto before = predict_targets(c, p, seq, targets, q);
      qkt::testing::scramble_padding(seq, rng, 12);
      CHECK(predict_targets(c, p, seq, targets, q) == before);
    }
  }
  SUBCASE("prefix forward equals forward on the blanked history") {
    const auto seq = random_padded(rng, 6, caps, 12);
    std::vector<PrefixTarget> prefixes;
    for (std::size_t t = 1; t < 6; ++t) {
      PrefixTarget pt{t, {}};
      for (std::size_t l = 0; l < seq.real_length(t); ++l) pt.exercises.push_back(seq.exercises[seq.slot(t, l)]);
      prefixes.push_back(pt);
    }
    Tape tape;
    Network net(tape, c, p);
    const auto rolled = net.forward_prefixes(seq, prefixes, q);
    for (std::size_t t = 1; t < 6; ++t) {
      const auto split = data::make_target_split(seq, t);
      std::vector<std::size_t> ex;
      for (const auto& tg : split.targets) ex.push_back(tg.exercise);
      CHECK(predict_targets(c, p, split.history, ex, q) == values_of(rolled[t - 1]));
    }
  }
  SUBCASE("ablated branches are absent from the graph") {
    const auto seq = random_padded(rng, 4, caps, 12);
    const std::vector<std::size_t> targets{0, 5};
    for (int v = 0; v < 4; ++v) {
      ModelConfig a = c;
      const char* missing = nullptr;
      if (v == 0) a.use_ki = false, missing = "W2";
      if (v == 1) a.use_sub = false, missing = "W3";
      if (v == 2) a.use_com = false, missing = "W_query";
      if (v == 3) a.use_ra = false;
      const ModelParams ap = ModelParams::initialize(a);
      Tape tape;
      Network net(tape, a, ap);
      ForwardTrace trace;
      net.forward(seq, targets, q, &trace);
      if (missing != nullptr) CHECK_THROWS_AS(net.param(missing), ContractError);
      if (v == 0) CHECK_FALSE(trace.gates.valid());
      if (v == 1) CHECK(trace.gru.empty());
      if (v == 2) CHECK_FALSE(trace.attention.has_value());
    }
  }
  SUBCASE("disabled branches receive no gradient even when their parameters exist") {
    const auto seq = random_padded(rng, 4, caps, 12);
    const std::vector<std::size_t> targets{0, 5};
    for (int v = 0; v < 2; ++v) {
      ModelConfig a = c;
      (v == 0 ? a.use_sub : a.use_com) = false;
      GradientSet g = GradientSet::zeros_like(p);
      Tape tape;
      Network net(tape, a, p, g);
      tape.backward(ad::sum(net.forward(seq, targets, q)));
      const std::vector<std::string> silent =
          v == 0 ? std::vector<std::string>{"W3", "W4", "W5", "b3", "b4", "b5"}
                 : std::vector<std::string>{"W_query", "W_key", "W_value"};
      for (const auto& n : silent) {
        for (double x : g.buffers[p.index_of(n)]) CHECK(x == 0.0);
      }
      double active = 0.0;
      for (double x : g.buffers[p.index_of("W6")]) active += std::abs(x);
      CHECK(active > 0.0);
    }
  }
  SUBCASE("history quizzes must be real") {
    auto seq = random_padded(rng, 2, caps, 12);
    const PrefixTarget too_long{3, {1}};
    Tape tape;
    Network net(tape, c, p);
    CHECK_THROWS_AS(net.forward_prefixes(seq, std::span(&too_long, 1), q), ContractError);
  }
}

TEST_CASE("full-model gradients match finite differences") {
  const auto q = make_qmatrix(20, 5, 4);
  const data::ProtocolCaps caps{4, 3};
  for (int variant = 0; variant < 3; ++variant) {
    ModelConfig c = tiny_config(8, 20, 5, 4, 3, 11);
    if (variant == 1) c.candidate = Candidate::reset_before, c.gate_bias = GateBias::outside;
    if (variant == 2) c.use_ra = false;
    ModelParams p = ModelParams::initialize(c);
    Rng rng(100 + variant);
    const auto seq = random_padded(rng, 3, caps, 20, 4);
    const auto split = data::make_target_split(seq);
    std::vector<std::size_t> ex;
    std::vector<double> labels;
    for (const auto& t : split.targets) ex.push_back(t.exercise), labels.push_back(t.answer);

    std::vector<ad::NamedParam> named;
    for (auto& e : p.entries()) named.push_back({e.name, &e.tensor});
    const auto report = ad::grad_check(
        [&](Tape& tape) {
          Network net = Network::with_own_gradients(tape, c, p);
          return ad::binary_cross_entropy(net.forward(split.history, ex, q), labels);
        },
        named);
    INFO("variant " << variant << " max rel error " << report.max_rel_error);
    CHECK(report.passed);
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("checkpoint round trip") {
  ModelConfig c = tiny_config(3, 7, 2, 4, 5);
  c.gamma = 0.1 + 0.2;  // not exactly representable as typed
  c.lambda_reg = 3e-7;
  const ModelParams p = ModelParams::initialize(c);
  std::ostringstream out;
  write_checkpoint(out, c, p);
  const std::string bytes = out.str();
  CHECK(bytes.substr(0, 8) == "QKTCKPT1");

  std::istringstream in(bytes);
  const Checkpoint ck = read_checkpoint(in);
  CHECK(ck.config == c);
  CHECK(ck.params == p);
  std::ostringstream again;
  write_checkpoint(again, ck.config, ck.params);
  CHECK(again.str() == bytes);

  SUBCASE("compatibility") {
    CHECK_NOTHROW(check_compatible(ck.config, c));
    ModelConfig other = c;
    other.dim = 4;
    CHECK_THROWS_AS(check_compatible(ck.config, other), ConfigError);
    other = c;
    other.use_sub = false;
    CHECK_THROWS_AS(check_compatible(ck.config, other), ConfigError);
  }
  SUBCASE("corrupt input") {
    std::istringstream bad_magic("QKTCKPT0" + bytes.substr(8));
    CHECK_THROWS_AS(read_checkpoint(bad_magic), DataError);
    std::istringstream truncated(bytes.substr(0, bytes.size() - 5));
    CHECK_THROWS_AS(read_checkpoint(truncated), DataError);
  }
  SUBCASE("ablated checkpoint holds no GRU tensors") {
    ModelConfig a = c;
    a.use_sub = false;
    std::ostringstream o;
    write_checkpoint(o, a, ModelParams::initialize(a));
    CHECK(o.str().find("W3") == std::string::npos);
    std::istringstream i(o.str());
    CHECK_FALSE(read_checkpoint(i).params.contains("W4"));
  }
}
