#include "fd_check.hpp"
#include "helpers.hpp"
#include "tent_oracle.hpp"

#include "nhl/modulator.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

namespace nhl {
namespace {

using test::randomized_model;
using test::tiny_arch;

TEST(Entropy, UniformLogitsGiveLogC) {
  Tensor<float> z({2, 10}, 0.0f);
  EXPECT_NEAR(entropy_loss(z), std::log(10.0), 1e-7);  // float log-probabilities
  EXPECT_NEAR(entropy_loss(z), 2.302585, 1e-6);
}

TEST(Entropy, SaturatedRowIsNearZero) {
  Tensor<float> z({1, 3}, {100.0f, 0.0f, 0.0f});
  EXPECT_LT(entropy_loss(z), 1e-40);
  EXPECT_GE(entropy_loss(z), 0.0);
}

TEST(Entropy, TwoThirdsOneSixthOneSixth) {
  // softmax([ln 4, 0, 0]) = (2/3, 1/6, 1/6)
  Tensor<float> z({1, 3}, {static_cast<float>(std::log(4.0)), 0.0f, 0.0f});
  const double expected = -(2.0 / 3.0) * std::log(2.0 / 3.0) - 2.0 * (1.0 / 6.0) * std::log(1.0 / 6.0);
  EXPECT_NEAR(expected, 0.867563, 1e-6);
  EXPECT_NEAR(entropy_loss(z), expected, 1e-6);
  Tensor<float> y({1, 2}, {static_cast<float>(std::log(3.0)), 0.0f});  // (3/4, 1/4)
  EXPECT_NEAR(entropy_loss(y), 0.562335, 1e-6);
}

TEST(Entropy, BoundedByZeroAndLogC) {
  Rng rng(4);
  const Tensor<float> z = test::random_tensor({64, 7}, rng, 3.0);
  for (double h : entropy_rows(z)) {
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log(7.0) + 1e-12);
  }
  EXPECT_THROW(entropy_loss(Tensor<float>({4})), DimensionError);
}

TEST(Glob, Semantics) {
  EXPECT_TRUE(glob_match("block1.**", "block1.bn_a.gamma"));
  EXPECT_TRUE(glob_match("block1.*", "block1.conv_a"));
  EXPECT_FALSE(glob_match("block1.*", "block1.bn_a.gamma"));
  EXPECT_FALSE(glob_match("block1.**", "block10.bn_a.gamma"));
  EXPECT_TRUE(glob_match("**.gamma", "bn1.gamma"));
  EXPECT_TRUE(glob_match("**.gamma", "block3.bn_s.gamma"));
  EXPECT_FALSE(glob_match("**.gamma", "block3.bn_s.gamma2"));
  EXPECT_TRUE(glob_match("block?.conv_b.weight", "block2.conv_b.weight"));
  EXPECT_FALSE(glob_match("block?.conv_b.weight", "block12.conv_b.weight"));
  EXPECT_FALSE(glob_match("bn?gamma", "bn1.gamma"));
  EXPECT_TRUE(glob_match("*", "fc"));
  EXPECT_FALSE(glob_match("*", "fc.weight"));
  EXPECT_TRUE(glob_match("**", "fc.weight"));
  EXPECT_TRUE(glob_match("conv1.weight", "conv1.weight"));
  EXPECT_FALSE(glob_match("conv1.weight", "conv1.weights"));
  EXPECT_TRUE(glob_match("", ""));
  EXPECT_FALSE(glob_match("", "x"));
}

TEST(Tape, SumGivesOnes) {
  GradientTape<float> tape;
  const auto w = tape.parameter("w", Tensor<float>({2, 3}, {1, 2, 3, 4, 5, 6}), true);
  const auto grads = tape.backward(ag::sum(tape, w));
  ASSERT_EQ(grads.size(), 1u);
  for (float v : grads.at("w").data()) EXPECT_EQ(v, 1.0f);
}

TEST(Tape, ReuseAndNonScalarAreErrors) {
  GradientTape<float> tape;
  const auto w = tape.parameter("w", Tensor<float>({3}, 1.0f), true);
  const auto s = ag::sum(tape, w);
  tape.backward(s);
  EXPECT_THROW(tape.backward(s), UsageError);
  EXPECT_THROW(ag::sum(tape, w), UsageError);

  GradientTape<float> other;
  const auto v = other.parameter("v", Tensor<float>({3}, 1.0f), true);
  EXPECT_THROW(other.backward(v), UsageError);
}

TEST(Tape, FrozenParametersGetNoGradientAndSharedUsesAccumulate) {
  GradientTape<float> tape;
  const auto a = tape.parameter("a", Tensor<float>({2}, {1.0f, 2.0f}), true);
  const auto b = tape.parameter("b", Tensor<float>({2}, {3.0f, 4.0f}), false);
  const auto unused = tape.parameter("unused", Tensor<float>({2}), true);
  (void)unused;
  const auto grads = tape.backward(ag::sum(tape, ag::add(tape, ag::add(tape, a, b), a)));
  EXPECT_FALSE(grads.contains("b"));
  EXPECT_EQ(grads.at("a")[0], 2.0f);
  EXPECT_EQ(grads.at("a")[1], 2.0f);
  EXPECT_EQ(grads.at("unused")[0], 0.0f);
}

TEST(EntropyGradients, OnlyTrainableParametersReturned) {
  const ModelCheckpoint m = randomized_model(tiny_arch(), 3);
  Rng rng(5);
  const Tensor<float> x = test::uniform_images({4, 3, 8, 8}, rng);
  double loss = -1.0;
  const auto grads = entropy_gradients(m, x, [](const std::string& n) { return n.starts_with("block2."); }, &loss);
  EXPECT_GT(loss, 0.0);
  EXPECT_FALSE(grads.empty());
  for (const auto& [name, g] : grads) {
    EXPECT_TRUE(name.starts_with("block2.")) << name;
    EXPECT_EQ(g.shape(), m.params.at(name).shape());
  }
}

TEST(EntropyGradients, MatchDoublePrecisionFiniteDifferences) {
  for (std::uint64_t seed : {11u, 12u}) {
    const ModelCheckpoint m = randomized_model(tiny_arch(), seed);
    Rng rng(seed + 100);
    const Tensor<float> x = test::uniform_images({4, 3, 8, 8}, rng);
    const auto checks = test::check_entropy_gradients(m, x, [](const std::string&) { return true; }, 1e-5);
    EXPECT_EQ(checks.size(), m.params.size());
    for (const auto& [name, c] : checks) {
      EXPECT_LE(c.relative(), 1e-5) << name << " seed " << seed << " tape " << c.tape_norm << " fd " << c.fd_norm;
      EXPECT_GT(c.fd_norm, 0.0) << name;
    }
  }
}

// With a coarse step the central difference is only meaningful while no relu
// changes state; on those parameters it must still agree.
TEST(EntropyGradients, CoarseDifferencesAgreeAwayFromKinks) {
  ArchitectureDescriptor arch = tiny_arch();
  arch.height = arch.width = 4;
  int kink_free = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ModelCheckpoint m = randomized_model(arch, seed);
    Rng rng(seed + 100);
    const Tensor<float> x = test::uniform_images({2, 3, 4, 4}, rng);
    for (const auto& [name, c] : test::check_entropy_gradients(m, x, [](const std::string&) { return true; }, 1e-3)) {
      if (c.kink_crossings > 0) continue;
      ++kink_free;
      EXPECT_LE(c.relative(), 1e-4) << name << " seed " << seed;
    }
  }
  EXPECT_GT(kink_free, 0);
}

TEST(ModulatorBind, ResolvesAndRejects) {
  const ModelCheckpoint m = randomized_model(tiny_arch(), 1);
  ModulatorParamSet p;
  p.bind(m);
  ASSERT_FALSE(p.resolved.empty());
  for (const auto& name : p.resolved) EXPECT_TRUE(name.starts_with("block1.") || name.starts_with("block2.")) << name;
  EXPECT_TRUE(std::is_sorted(p.resolved.begin(), p.resolved.end()));

  ModulatorParamSet tent = ModulatorParamSet::bn_affine_only();
  tent.bind(m);
  for (const auto& name : tent.resolved) EXPECT_TRUE(name.ends_with(".gamma") || name.ends_with(".beta"));
  EXPECT_TRUE(tent.selects("bn1.gamma"));

  auto rejects = [&m](std::vector<std::string> sel) {
    ModulatorParamSet q;
    q.selection = std::move(sel);
    EXPECT_THROW(q.bind(m), ParameterError);
  };
  rejects({"block9.**"});
  rejects({"fc.*"});
  rejects({"**"});
  rejects({"conv1.weight"});
  ModulatorParamSet bad;
  bad.momentum = 1.0;
  EXPECT_THROW(bad.bind(m), ParameterError);
  bad = ModulatorParamSet();
  bad.learning_rate = -1e-3;
  EXPECT_THROW(bad.bind(m), ParameterError);
  bad = ModulatorParamSet();
  bad.steps_per_batch = 0;
  EXPECT_THROW(bad.bind(m), ParameterError);
}

TEST(ModulatorStep, ZeroLearningRateChangesNothing) {
  ModelCheckpoint m = randomized_model(tiny_arch(), 2);
  const ModelCheckpoint before = m;
  ModulatorParamSet p;
  p.learning_rate = 0.0;
  Rng rng(1);
  const auto r = modulator_step(m, p, test::uniform_images({4, 3, 8, 8}, rng));
  ASSERT_EQ(r.losses.size(), 1u);
  EXPECT_TRUE(std::isfinite(r.losses[0]));
  for (const auto& [name, t] : before.params) EXPECT_EQ(m.params.at(name).values(), t.values()) << name;
}

TEST(ModulatorStep, SmallStepsDecreaseEntropyAndTouchOnlySelection) {
  ModelCheckpoint m = randomized_model(tiny_arch(), 6);
  const ModelCheckpoint before = m;
  ModulatorParamSet p;
  p.selection = {"block2.**"};
  p.learning_rate = 1e-2;
  p.momentum = 0.0;
  p.steps_per_batch = 3;
  Rng rng(2);
  const Tensor<float> x = test::uniform_images({6, 3, 8, 8}, rng);
  const auto r = modulator_step(m, p, x);
  ASSERT_EQ(r.losses.size(), 3u);
  EXPECT_LT(r.losses[1], r.losses[0]);
  EXPECT_LT(r.losses[2], r.losses[1]);
  bool changed = false;
  for (const auto& [name, t] : before.params) {
    if (name.starts_with("block2.")) {
      changed = changed || m.params.at(name).values() != t.values();
    } else {
      EXPECT_EQ(m.params.at(name).values(), t.values()) << name;
    }
  }
  EXPECT_TRUE(changed);
  for (const auto& [name, t] : before.buffers) EXPECT_EQ(m.buffers.at(name).values(), t.values()) << name;
}

TEST(ModulatorStep, MomentumCarriesAcrossCalls) {
  ModelCheckpoint m = randomized_model(tiny_arch(), 7);
  ModulatorParamSet p;
  Rng rng(3);
  const Tensor<float> x = test::uniform_images({4, 3, 8, 8}, rng);
  modulator_step(m, p, x);
  ASSERT_EQ(p.velocity.size(), p.resolved.size());
  const NamedTensors<float> v1 = p.velocity;
  const ModelCheckpoint mid = m;
  const auto g = entropy_gradients(mid, x, [&p](const std::string& n) { return p.selects(n); });
  modulator_step(m, p, x);
  for (const auto& name : p.resolved) {
    const Tensor<float>& v = p.velocity.at(name);
    for (Index i = 0; i < v.size(); ++i) {
      const float expected_v = 0.9f * v1.at(name)[i] + g.at(name)[i];
      EXPECT_EQ(v[i], expected_v) << name;
      EXPECT_EQ(m.params.at(name)[i], mid.params.at(name)[i] - 1e-3f * expected_v) << name;
    }
  }
}

TEST(ModulatorStep, NonFiniteUpdateRollsBack) {
  ModelCheckpoint m = randomized_model(tiny_arch(), 8);
  ModulatorParamSet p;
  p.learning_rate = 1e3;
  Rng rng(4);
  const Tensor<float> x = test::uniform_images({4, 3, 8, 8}, rng);
  modulator_step(m, p, x);
  const ModelCheckpoint before = m;
  const NamedTensors<float> velocity = p.velocity;
  p.learning_rate = 1e300;  // inf once cast to float
  EXPECT_THROW(modulator_step(m, p, x), NumericError);
  for (const auto& [name, t] : before.params) EXPECT_EQ(m.params.at(name).values(), t.values()) << name;
  for (const auto& [name, t] : velocity) EXPECT_EQ(p.velocity.at(name).values(), t.values()) << name;
}

TEST(ModulatorStep, NonFiniteLossRollsBack) {
  ModelCheckpoint m = randomized_model(tiny_arch(), 9);
  for (float& v : m.params.at("fc.weight").data()) v = 3e38f;
  const ModelCheckpoint before = m;
  ModulatorParamSet p;
  Rng rng(5);
  EXPECT_THROW(modulator_step(m, p, test::uniform_images({4, 3, 8, 8}, rng)), NumericError);
  for (const auto& [name, t] : before.params) EXPECT_EQ(m.params.at(name).values(), t.values()) << name;
  EXPECT_TRUE(p.velocity.empty());
}

TEST(ModulatorStep, RejectsSingleSampleBatch) {
  ModelCheckpoint m = randomized_model(tiny_arch(), 10);
  ModulatorParamSet p;
  Rng rng(6);
  EXPECT_THROW(modulator_step(m, p, test::uniform_images({1, 3, 8, 8}, rng)), ParameterError);
}

TEST(ModulatorStep, BatchNormAffineSelectionMatchesHandDerivedOracle) {
  Rng init(21);
  ModelCheckpoint m = build_model(test::tent_arch(), init);
  for (float& v : m.params.at("bn1.gamma").data()) v = static_cast<float>(init.uniform(0.5, 1.5));
  for (float& v : m.params.at("bn1.beta").data()) v = static_cast<float>(init.uniform(-0.3, 0.3));
  ModulatorParamSet p = ModulatorParamSet::bn_affine_only();
  p.learning_rate = 0.05;  // large enough that the trajectory moves visibly
  test::TentOracle oracle(m, p.learning_rate, p.momentum);
  Rng rng(22);
  for (int step = 0; step < 4; ++step) {
    const Tensor<float> x = test::random_tensor({5, 1, 6, 6}, rng);
    modulator_step(m, p, x);
    oracle.step(x);
    EXPECT_EQ(m.params.at("bn1.gamma").values(), oracle.gamma) << "step " << step;
    EXPECT_EQ(m.params.at("bn1.beta").values(), oracle.beta) << "step " << step;
  }
  EXPECT_EQ(p.resolved, (std::vector<std::string>{"bn1.beta", "bn1.gamma"}));
}

}  // namespace
}  // namespace nhl
