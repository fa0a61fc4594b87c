#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "deaot/training.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace deaot;
using testing_support::vec;

namespace {

SyntheticSpec tiny_spec(std::uint64_t seed, std::size_t frames = 3, std::size_t objects = 2) {
  SyntheticSpec spec;
  spec.seed = seed;
  spec.frames = frames;
  spec.width = spec.height = 24;
  spec.objects = objects;
  spec.min_size = 6;
  spec.max_size = 10;
  return spec;
}

// x^2 with the sign of its gradient flipped.
TensorD corrupted_square(const TensorD& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
  auto nx = x.node();
  return detail::make_result<double>(x.shape(), std::move(out), {&x}, [nx](detail::Node<double>& self) {
    auto& g = nx->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= 2 * nx->data[i] * self.grad[i];
  });
}

}  // namespace

TEST(SequenceLoss, UniformLogitsGiveLogOfSlotCount) {
  for (std::size_t k : {0u, 1u, 3u}) {
    auto logits = TensorD::zeros({16, 11});
    std::vector<bool> keep(11, false);
    for (std::size_t i = 0; i <= k; ++i) keep[i] = true;
    auto masked = mask_columns(logits, keep);
    MaskMap gt(4, 4);
    for (std::size_t i = 0; i < 16; ++i) gt.values[i] = static_cast<std::uint8_t>(i % (k + 1));
    auto loss = sequence_loss<double>({TensorD(), masked, masked}, {gt, gt, gt});
    EXPECT_NEAR(loss.item(), std::log(static_cast<double>(k + 1)), 1e-12);
  }
}

TEST(SequenceLoss, ConfidentCorrectLogitsApproachZero) {
  MaskMap gt(2, 2);
  gt.values = {0, 1, 2, 1};
  auto logits = TensorD::zeros({4, 3});
  for (std::size_t p = 0; p < 4; ++p) logits.mutable_data()[p * 3 + gt.values[p]] = 60.0;
  EXPECT_LT(sequence_loss<double>({TensorD(), logits}, {gt, gt}).item(), 1e-20);
}

TEST(SequenceLoss, MatchesPerPixelOracleAndSkipsReference) {
  Rng rng(1);
  std::vector<TensorD> logits{TensorD::randn({6, 4}, rng)};
  std::vector<MaskMap> masks;
  double expect = 0;
  for (int t = 0; t < 4; ++t) {
    MaskMap m(2, 3);
    for (auto& v : m.values) v = static_cast<std::uint8_t>(rng.uniform_int(0, 3));
    masks.push_back(m);
    if (t > 0) {
      logits.push_back(TensorD::randn({6, 4}, rng, 2.0));
      expect += oracle::cross_entropy(vec(logits.back()), 6, 4, {m.values.begin(), m.values.end()});
    }
  }
  expect /= 3;
  EXPECT_NEAR(sequence_loss(logits, masks).item(), expect, 1e-12);
  EXPECT_THROW(sequence_loss(std::vector<TensorD>{logits[0]}, {masks[0]}), ContractError);
  EXPECT_THROW(sequence_loss(logits, {masks[0], masks[1]}), DimensionError);
}

TEST(TrainConfig, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.clip_length = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.learning_rate = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.steps = 100;
  cfg.warmup_fraction = 0.1;
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 0), cfg.learning_rate / 10);
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 9), cfg.learning_rate);
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 50), cfg.learning_rate);
}

TEST(Optimizer, AdamFirstStepIsSignedLearningRate) {
  ParamStore<double> store;
  auto w = store.add("w", TensorD({3}, {1.0, 2.0, 3.0}));
  backward(sum(mul(w, TensorD({3}, {0.5, -2.0, 0.0}))));
  Adam<double> adam;
  adam.step(store, 0.1);
  EXPECT_NEAR(w[0], 0.9, 1e-6);
  EXPECT_NEAR(w[1], 2.1, 1e-6);
  EXPECT_DOUBLE_EQ(w[2], 3.0);
}

TEST(Optimizer, GradientClippingRescalesToMaxNorm) {
  ParamStore<double> store;
  auto a = store.add("a", TensorD({2}, {0.0, 0.0}));
  auto b = store.add("b", TensorD({1}, {0.0}));
  backward(add(sum(mul(a, TensorD({2}, {3.0, 0.0}))), sum(mul(b, TensorD({1}, {4.0})))));
  EXPECT_DOUBLE_EQ(clip_grad_norm(store, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-12);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-12);
  EXPECT_NEAR(clip_grad_norm(store, 10.0), 1.0, 1e-12);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-12);
}

TEST(Train, ZeroLearningRateLeavesWeightsUnchanged) {
  Engine<float> engine(EngineConfig::desk(), 3);
  const auto before = engine.params().entries();
  std::vector<std::vector<float>> snapshot;
  for (const auto& e : before) snapshot.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.clip_length = 3;
  cfg.learning_rate = 0;
  auto result = train(engine, {generate_sequence(tiny_spec(3, 4))}, cfg);
  EXPECT_EQ(result.losses.size(), 3u);
  for (std::size_t i = 0; i < engine.params().size(); ++i) {
    const auto& t = engine.params().entries()[i].tensor;
    EXPECT_EQ(std::vector<float>(t.data().begin(), t.data().end()), snapshot[i]) << engine.params().entries()[i].name;
  }
}

TEST(Train, LossDecreasesOnFixedClip) {
  std::vector<double> ratios;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Engine<float> engine(EngineConfig::desk(), seed);
    TrainConfig cfg;
    cfg.steps = 50;
    cfg.clip_length = 3;  // equals the sequence length: every step sees the same clip
    cfg.seed = seed;
    auto result = train(engine, {generate_sequence(tiny_spec(seed + 40, 3))}, cfg);
    const auto& l = result.losses;
    const double early = (l[0] + l[1] + l[2] + l[3] + l[4]) / 5;
    const double late = (l[45] + l[46] + l[47] + l[48] + l[49]) / 5;
    ratios.push_back(late / early);
  }
  std::sort(ratios.begin(), ratios.end());
  EXPECT_LT(ratios[2], 0.9);
}

TEST(Train, DeterministicLossCurve) {
  auto data = std::vector<Sequence>{generate_sequence(tiny_spec(5, 5)), generate_sequence(tiny_spec(6, 5))};
  TrainConfig cfg;
  cfg.steps = 6;
  cfg.clip_length = 3;
  cfg.seed = 11;
  Engine<float> a(EngineConfig::desk(), 7), b(EngineConfig::desk(), 7);
  EXPECT_EQ(train(a, data, cfg).losses, train(b, data, cfg).losses);
  cfg.teacher_memory = TeacherMemory::ground_truth;
  Engine<float> c(EngineConfig::desk(), 7), d(EngineConfig::desk(), 7);
  EXPECT_EQ(train(c, data, cfg).losses, train(d, data, cfg).losses);
}

TEST(Train, NonFiniteLossAborts) {
  Engine<float> engine(EngineConfig::desk(), 8);
  engine.params().get("dec.proj").mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.clip_length = 3;
  EXPECT_THROW(train(engine, {generate_sequence(tiny_spec(8))}, cfg), NumericError);
}

TEST(Train, RejectsUnusableData) {
  Engine<float> engine(EngineConfig::desk(), 9);
  TrainConfig cfg;
  cfg.clip_length = 5;
  EXPECT_THROW(train(engine, {}, cfg), ConfigError);
  EXPECT_THROW(train(engine, {generate_sequence(tiny_spec(9, 3))}, cfg), ConfigError);
}

TEST(Train, LossInvariantToSlotRelabeling) {
  const auto seq = generate_sequence(tiny_spec(12, 3, 3));
  std::vector<std::uint8_t> pi{0, 7, 2, 9, 4, 5, 6, 1, 8, 3, 10};
  Engine<double> a(EngineConfig::desk(), 13), b(EngineConfig::desk(), 13);
  auto& bank = b.params().get("id.bank");
  const auto original = vec(bank);
  const std::size_t cv = bank.cols();
  for (std::size_t i = 0; i < pi.size(); ++i)
    for (std::size_t c = 0; c < cv; ++c) bank.mutable_data()[pi[i] * cv + c] = original[i * cv + c];
  std::vector<MaskMap> relabeled = seq.masks;
  for (auto& m : relabeled)
    for (auto& v : m.values) v = pi[v];
  std::vector<const Image*> frames;
  for (const auto& f : seq.frames) frames.push_back(&f);
  NoGradGuard no_grad;
  for (auto teacher : {TeacherMemory::ground_truth, TeacherMemory::predicted}) {
    const double la = clip_loss(a, frames, seq.masks, teacher).item();
    const double lb = clip_loss(b, frames, relabeled, teacher).item();
    EXPECT_NEAR(la, lb, 1e-10 * std::abs(la));
  }
}

TEST(Gradcheck, LinearLayerIsExact) {
  ParamStore<double> store;
  Rng rng(14);
  auto x = TensorD::randn({5, 4}, rng), r = TensorD::randn({5, 3}, rng);
  store.add("w", TensorD::randn({4, 3}, rng));
  auto& w = store.get("w");
  auto report = gradcheck(store, [&] { return sum(mul(matmul(x, w), r)); }, {1e-4, 64, 1e-6});
  EXPECT_TRUE(report.passed);
  EXPECT_LT(report.max_rel_error, 1e-6);
  EXPECT_EQ(report.checked, 12u);
}

TEST(Gradcheck, CorruptedBackwardIsCaught) {
  ParamStore<double> store;
  Rng rng(15);
  auto x = TensorD::randn({5, 4}, rng);
  store.add("good", TensorD::randn({4, 3}, rng));
  store.add("bad", TensorD::randn({3}, rng));
  auto& good = store.get("good");
  auto& bad = store.get("bad");
  auto report = gradcheck(store, [&] { return add(sum(matmul(x, good)), sum(corrupted_square(bad))); });
  EXPECT_FALSE(report.passed);
  EXPECT_EQ(report.offending, (std::vector<std::string>{"bad"}));
  EXPECT_NEAR(report.tensors[1].max_rel_error, 2.0, 1e-6);
}

TEST(Gradcheck, SubsamplesLargeTensors) {
  ParamStore<double> store;
  Rng rng(16);
  store.add("w", TensorD::randn({20, 10}, rng));
  auto& w = store.get("w");
  GradcheckOptions opt;
  opt.max_per_tensor = 7;
  auto report = gradcheck(store, [&] { return sum(mul(w, w)); }, opt);
  EXPECT_EQ(report.checked, 7u);
  EXPECT_TRUE(report.passed);
}

TEST(Gradcheck, OneLayerDeskEngine) {
  EngineConfig cfg;
  cfg.layers = 1;
  GradcheckOptions opt;
  opt.max_per_tensor = 6;
  auto report = gradcheck_engine(cfg, EngineGradcheckSetup{}, opt);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  EXPECT_LT(report.max_rel_error, 1e-3);
}

TEST(Synthetic, NoObjectsMeansBackgroundMasks) {
  auto seq = generate_sequence(tiny_spec(17, 4, 0));
  ASSERT_EQ(seq.masks.size(), 4u);
  for (const auto& m : seq.masks) EXPECT_EQ(m.max_label(), 0);
}

TEST(Synthetic, DeterministicAndSeedDependent) {
  auto a = generate_sequence(tiny_spec(18)), b = generate_sequence(tiny_spec(18)), c = generate_sequence(tiny_spec(19));
  EXPECT_EQ(a.frames, b.frames);
  EXPECT_EQ(a.masks, b.masks);
  EXPECT_NE(a.frames, c.frames);
}

TEST(Synthetic, StaticSquareKeepsItsArea) {
  auto spec = tiny_spec(20, 6, 1);
  spec.kinds = {ShapeKind::square};
  spec.min_size = spec.max_size = 7;
  spec.max_speed = 0;
  for (const auto& m : generate_sequence(spec).masks) EXPECT_EQ(m.count(1), 49u);
}

TEST(Synthetic, MovingSquaresStayInsideAndKeepArea) {
  auto spec = tiny_spec(21, 20, 1);
  spec.kinds = {ShapeKind::square};
  spec.min_size = spec.max_size = 8;
  spec.max_speed = 3;
  for (const auto& m : generate_sequence(spec).masks) EXPECT_EQ(m.count(1), 64u);
}

TEST(Synthetic, LaterObjectsOcclude) {
  auto spec = tiny_spec(22, 3, 2);
  spec.kinds = {ShapeKind::square};
  spec.min_size = spec.max_size = 24;  // both fill the frame
  for (const auto& m : generate_sequence(spec).masks) EXPECT_EQ(m.count(2), 24u * 24u);
}

TEST(Synthetic, Errors) {
  auto spec = tiny_spec(23, 3, 11);
  EXPECT_THROW(generate_sequence(spec), ConfigError);
  spec = tiny_spec(23);
  spec.max_size = 30;
  EXPECT_THROW(generate_sequence(spec), ConfigError);
}

TEST(Synthetic, DirectoryRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "deaot_test_sequence";
  std::filesystem::remove_all(dir);
  auto seq = generate_sequence(tiny_spec(24, 4));
  write_sequence(dir, seq);
  EXPECT_TRUE(std::filesystem::exists(dir / "frames" / "00003.ppm"));
  EXPECT_TRUE(std::filesystem::exists(dir / "masks" / "00000.pgm"));
  auto back = read_sequence(dir);
  EXPECT_EQ(back.frames, seq.frames);
  EXPECT_EQ(back.masks, seq.masks);
  EXPECT_EQ(back.meta.at("objects"), "2");
  EXPECT_EQ(back.meta.at("seed"), "24");
}
