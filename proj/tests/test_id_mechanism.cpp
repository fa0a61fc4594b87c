#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "deaot/id_mechanism.hpp"
#include "test_support.hpp"

using namespace deaot;
using testing_support::vec;

namespace {

IdBank<double> random_bank(std::size_t max_objects, std::size_t cv, Rng& rng) {
  return {TensorD::randn({max_objects + 1, cv}, rng)};
}

std::vector<double> row(const TensorD& t, std::size_t r) {
  return {t.data().begin() + static_cast<std::ptrdiff_t>(r * t.cols()),
          t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * t.cols())};
}

MaskMap random_mask(std::size_t h, std::size_t w, std::uint8_t labels, Rng& rng) {
  MaskMap m(h, w);
  for (auto& v : m.values) v = static_cast<std::uint8_t>(rng.uniform_int(0, labels));
  return m;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("deaot_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(EncodeMask, BackgroundOnly) {
  Rng rng(1);
  auto bank = random_bank(10, 6, rng);
  auto tokens = encode_mask(MaskMap(8, 8), bank, 4);
  ASSERT_EQ(tokens.shape(), (Shape{4, 6}));
  for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(row(tokens, r), row(bank.vectors, 0));
}

TEST(EncodeMask, FullyCoveredByOneObject) {
  Rng rng(2);
  auto bank = random_bank(10, 6, rng);
  auto tokens = encode_mask(MaskMap(8, 8, 3), bank, 2);
  for (std::size_t r = 0; r < 16; ++r) EXPECT_EQ(row(tokens, r), row(bank.vectors, 3));
}

TEST(EncodeMask, MajorityVoteWithinPatch) {
  Rng rng(3);
  auto bank = random_bank(10, 4, rng);
  MaskMap m(4, 4);
  // top-left patch {1,1,2,0}
  m.at(0, 0) = 1, m.at(0, 1) = 1, m.at(1, 0) = 2, m.at(1, 1) = 0;
  // top-right patch {3,2,2,3}: tie -> first in raster order
  m.at(0, 2) = 3, m.at(0, 3) = 2, m.at(1, 2) = 2, m.at(1, 3) = 3;
  // bottom-left all 4; bottom-right {5,0,0,5} tie -> 5
  for (std::size_t y = 2; y < 4; ++y)
    for (std::size_t x = 0; x < 2; ++x) m.at(y, x) = 4;
  m.at(2, 2) = 5, m.at(3, 3) = 5;
  EXPECT_EQ(downsample_labels(m, 2), (std::vector<std::size_t>{1, 3, 4, 5}));
  auto tokens = encode_mask(m, bank, 2);
  EXPECT_EQ(row(tokens, 0), row(bank.vectors, 1));
  EXPECT_EQ(row(tokens, 1), row(bank.vectors, 3));
}

TEST(EncodeMask, Errors) {
  Rng rng(4);
  auto bank = random_bank(3, 4, rng);
  EXPECT_THROW(encode_mask(MaskMap(4, 4, 4), bank, 2), IdentityError);
  EXPECT_THROW(encode_mask(MaskMap(5, 4), bank, 2), DimensionError);
}

TEST(EncodeMask, IdempotentUnderUpsampleRoundTrip) {
  Rng rng(5);
  auto bank = random_bank(5, 4, rng);
  auto m = random_mask(12, 8, 5, rng);
  const auto labels = downsample_labels(m, 4);
  MaskMap up(12, 8);
  for (std::size_t y = 0; y < 12; ++y)
    for (std::size_t x = 0; x < 8; ++x) up.at(y, x) = static_cast<std::uint8_t>(labels[(y / 4) * 2 + x / 4]);
  EXPECT_EQ(downsample_labels(up, 4), labels);
  EXPECT_EQ(vec(encode_mask(up, bank, 4)), vec(encode_mask(m, bank, 4)));
}

TEST(DecodeLogits, OrthogonalBankRecoversSlot) {
  IdBank<double> bank{TensorD::zeros({4, 4})};
  for (std::size_t i = 0; i < 4; ++i) bank.vectors.mutable_data()[i * 4 + i] = 1.0;
  TensorD feature({1, 4}, {0, 0, 1, 0});
  auto logits = decode_logits(feature, bank, {1, 2});
  EXPECT_EQ(logits.at(0, 0), 0.0);
  EXPECT_EQ(logits.at(0, 1), 0.0);
  EXPECT_EQ(logits.at(0, 2), 1.0);
  EXPECT_TRUE(std::isinf(logits.at(0, 3)) && logits.at(0, 3) < 0);
  EXPECT_EQ(argmax_mask(logits, 1, 1, 1).values[0], 2);
}

TEST(DecodeLogits, NoActiveObjectsMeansBackground) {
  Rng rng(6);
  auto bank = random_bank(10, 8, rng);
  auto feature = TensorD::randn({16, 8}, rng, 5.0);
  auto mask = argmax_mask(decode_logits(feature, bank, {}), 4, 4, 1);
  for (auto v : mask.values) EXPECT_EQ(v, 0);
}

TEST(DecodeLogits, InactiveSlotsNeverWin) {
  Rng rng(7);
  auto bank = random_bank(10, 8, rng);
  auto feature = TensorD::randn({64, 8}, rng, 5.0);
  auto mask = argmax_mask(decode_logits(feature, bank, {2, 7}), 8, 8, 1);
  for (auto v : mask.values) EXPECT_TRUE(v == 0 || v == 2 || v == 7);
  EXPECT_THROW(decode_logits(feature, bank, {11}), IdentityError);
  EXPECT_THROW(decode_logits(feature, bank, {0}), IdentityError);
}

TEST(DecodeLogits, DotProductOracle) {
  Rng rng(8);
  auto bank = random_bank(4, 5, rng);
  auto feature = TensorD::randn({3, 5}, rng);
  auto logits = decode_logits(feature, bank, {1, 2, 3, 4});
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t i = 0; i < 5; ++i) {
      double d = 0;
      for (std::size_t c = 0; c < 5; ++c) d += feature.at(p, c) * bank.vectors.at(i, c);
      EXPECT_NEAR(logits.at(p, i), d, 1e-12);
    }
}

TEST(SlotEquivariance, PermutedBankAndLabelsPermutePrediction) {
  Rng rng(9);
  for (int rep = 0; rep < 10; ++rep) {
    auto bank = random_bank(6, 8, rng);
    auto mask = random_mask(8, 8, 6, rng);
    // pi: random permutation of 1..6, 0 fixed
    std::vector<std::uint8_t> pi{0, 1, 2, 3, 4, 5, 6};
    for (std::size_t i = 6; i > 1; --i) std::swap(pi[i], pi[static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(i)))]);
    IdBank<double> permuted{TensorD::zeros(bank.vectors.shape())};
    for (std::size_t i = 0; i <= 6; ++i)
      for (std::size_t c = 0; c < 8; ++c) permuted.vectors.mutable_data()[pi[i] * 8 + c] = bank.vectors.at(i, c);
    MaskMap relabeled = mask;
    for (auto& v : relabeled.values) v = pi[v];
    auto a = encode_mask(mask, bank, 2), b = encode_mask(relabeled, permuted, 2);
    EXPECT_EQ(vec(a), vec(b));
    auto feature = TensorD::randn({16, 8}, rng);
    std::set<std::size_t> active{1, 3, 4}, active_pi{pi[1], pi[3], pi[4]};
    auto m1 = argmax_mask(decode_logits(feature, bank, active), 8, 8, 2);
    auto m2 = argmax_mask(decode_logits(feature, permuted, active_pi), 8, 8, 2);
    for (auto& v : m1.values) v = pi[v];
    EXPECT_EQ(m1, m2);
  }
}

TEST(ArgmaxMask, ChannelZeroFavoured) {
  auto logits = TensorD::zeros({4, 3});
  for (std::size_t p = 0; p < 4; ++p) logits.mutable_data()[p * 3] = 1.0;
  for (auto v : argmax_mask(logits, 4, 4, 2).values) EXPECT_EQ(v, 0);
}

TEST(ArgmaxMask, CheckerboardBlocks) {
  auto logits = TensorD::zeros({9, 2});
  for (std::size_t p = 0; p < 9; ++p) logits.mutable_data()[p * 2 + (p % 2)] = 1.0;
  auto m = argmax_mask(logits, 6, 6, 2);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 6; ++x) EXPECT_EQ(m.at(y, x), ((y / 2) * 3 + x / 2) % 2);
}

TEST(ArgmaxMask, MatchesLinearScan) {
  Rng rng(10);
  auto logits = TensorD::randn({12, 5}, rng);
  auto m = argmax_mask(logits, 3, 4, 1);
  for (std::size_t p = 0; p < 12; ++p) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < 5; ++j)
      if (logits.at(p, j) > logits.at(p, best)) best = j;
    EXPECT_EQ(m.values[p], best);
  }
  EXPECT_THROW(argmax_mask(logits, 4, 4, 1), DimensionError);
}

TEST(Netpbm, RoundTrip) {
  const auto dir = temp_dir("netpbm");
  Rng rng(11);
  Image img(5, 7);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  auto mask = random_mask(5, 7, 9, rng);
  write_ppm(dir / "a.ppm", img);
  write_pgm(dir / "a.pgm", mask);
  EXPECT_EQ(read_ppm(dir / "a.ppm"), img);
  EXPECT_EQ(read_pgm(dir / "a.pgm"), mask);
  EXPECT_THROW(read_ppm(dir / "a.pgm"), IoError);
  EXPECT_THROW(read_pgm(dir / "missing.pgm"), IoError);
}

TEST(Netpbm, HeaderWithComment) {
  const auto dir = temp_dir("netpbm_comment");
  {
    std::ofstream out(dir / "c.pgm", std::ios::binary);
    out << "P5\n# made by hand\n2 1\n255\n";
    out.put(3);
    out.put(0);
  }
  auto m = read_pgm(dir / "c.pgm");
  EXPECT_EQ(m.width, 2u);
  EXPECT_EQ(m.values, (std::vector<std::uint8_t>{3, 0}));
  {
    std::ofstream out(dir / "t.pgm", std::ios::binary);
    out << "P5\n4 4\n255\n";
    out.put(1);
  }
  EXPECT_THROW(read_pgm(dir / "t.pgm"), IoError);
}

TEST(Overlay, TintsObjectsOnly) {
  Image img(2, 2);
  for (auto& v : img.rgb) v = 100;
  MaskMap m(2, 2);
  m.at(1, 1) = 1;
  auto o = overlay(img, m, 0.5);
  EXPECT_EQ(o.pixel(0, 0)[0], 100);
  EXPECT_NE(o.pixel(1, 1)[0], 100);
}
