#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "deaot/engine.hpp"
#include "deaot/metrics.hpp"
#include "deaot/params.hpp"
#include "deaot/synthetic.hpp"

namespace fs = std::filesystem;
using namespace deaot;

namespace {

const std::string kSmallData = " --set width=24 --set height=24 --set min_size=6 --set max_size=9 --set frames=4";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    root_ = fs::temp_directory_path() / ("deaot_cli_" + std::to_string(::getpid()) + "_" + info->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  // Runs the binary with `args`; stdout and stderr are captured.
  int run(const std::string& args) {
    const std::string cmd = std::string(DEAOT_CLI_PATH) + " " + args + " > " + (root_ / "stdout").string() + " 2> " +
                            (root_ / "stderr").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string out() const { return slurp(root_ / "stdout"); }
  std::string err() const { return slurp(root_ / "stderr"); }
  std::string path(const std::string& name) const { return (root_ / name).string(); }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  }

  static std::size_t count_files(const fs::path& dir, const std::string& ext) {
    if (!fs::is_directory(dir)) return 0;
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
    return n;
  }

  // Byte-compares every regular file below two trees.
  static void expect_same_tree(const fs::path& a, const fs::path& b) {
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), a);
      ASSERT_TRUE(fs::exists(b / rel)) << rel;
      EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
      ++files;
    }
    std::size_t other = 0;
    for (const auto& e : fs::recursive_directory_iterator(b)) other += e.is_regular_file();
    EXPECT_EQ(files, other);
  }

  fs::path root_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("gen-data"), 1);  // --out is required
  EXPECT_EQ(run("gen-data --out " + path("a") + " --bogus"), 1);
  EXPECT_EQ(run("gen-data --out " + path("b") + " --set chanels=3"), 1);
  EXPECT_NE(err().find("chanels"), std::string::npos);
  EXPECT_EQ(run("gen-data --out " + path("c") + " --set channels"), 1);
  EXPECT_EQ(run("train --out " + path("d") + " --set objects=11"), 1);
  EXPECT_EQ(run("bench --jobs 0"), 1);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, GenDataWritesRequestedFrames) {
  ASSERT_EQ(run("gen-data --seed 3 --sequences 1 --out " + path("one") + kSmallData + " --frames 8"), 0) << err();
  EXPECT_EQ(count_files(root_ / "one" / "frames", ".ppm"), 8u);
  EXPECT_EQ(count_files(root_ / "one" / "masks", ".pgm"), 8u);
  EXPECT_TRUE(fs::exists(root_ / "one" / "meta.txt"));
  EXPECT_NE(err().find("config: {"), std::string::npos);  // resolved config is logged

  ASSERT_EQ(run("gen-data --seed 3 --sequences 3 --out " + path("many") + kSmallData), 0) << err();
  for (const char* s : {"seq000", "seq001", "seq002"}) {
    EXPECT_EQ(count_files(root_ / "many" / s / "frames", ".ppm"), 4u) << s;
    EXPECT_EQ(read_sequence(root_ / "many" / s).frames[0].width, 24u);
  }
}

TEST_F(Cli, GenDataIsDeterministic) {
  const std::string args = " --seed 11 --sequences 2" + kSmallData;
  ASSERT_EQ(run("gen-data --out " + path("a") + args), 0);
  ASSERT_EQ(run("gen-data --out " + path("b") + args), 0);
  expect_same_tree(root_ / "a", root_ / "b");
  ASSERT_EQ(run("gen-data --seed 12 --sequences 1 --out " + path("c") + kSmallData), 0);
  EXPECT_NE(slurp(root_ / "a" / "seq000" / "frames" / "00000.ppm"), slurp(root_ / "c" / "frames" / "00000.ppm"));
}

TEST_F(Cli, GenDataWithoutObjectsWritesBackgroundMasks) {
  ASSERT_EQ(run("gen-data --objects 0 --sequences 1 --out " + path("bg") + kSmallData), 0) << err();
  const auto seq = read_sequence(root_ / "bg");
  ASSERT_EQ(seq.masks.size(), 4u);
  for (const auto& m : seq.masks) EXPECT_EQ(m.max_label(), 0);
}

TEST_F(Cli, NonEmptyOutputNeedsForce) {
  ASSERT_EQ(run("gen-data --sequences 1 --out " + path("d") + kSmallData), 0);
  EXPECT_EQ(run("gen-data --sequences 1 --out " + path("d") + kSmallData), 1);
  EXPECT_NE(err().find("--force"), std::string::npos);
  EXPECT_EQ(run("gen-data --sequences 1 --force --out " + path("d") + kSmallData), 0);
}

TEST_F(Cli, TrainWithZeroLearningRateKeepsInitialization) {
  ASSERT_EQ(run("train --seed 5 --set learning_rate=0 --set steps=2 --set sequences=1 --set clip_length=2 --out " +
                path("t") + kSmallData),
            0)
      << err();
  Engine<float> reference(EngineConfig::desk(), 5);
  const auto file = read_weights(root_ / "t" / "weights.bin");
  ASSERT_EQ(file.tensors.size(), reference.params().size());
  for (const auto& e : reference.params().entries()) {
    bool found = false;
    for (const auto& [name, rec] : file.tensors) {
      if (name != e.name) continue;
      found = true;
      ASSERT_EQ(rec.values.size(), e.tensor.numel()) << name;
      const auto d = e.tensor.data();
      for (std::size_t i = 0; i < d.size(); ++i) ASSERT_EQ(static_cast<float>(rec.values[i]), d[i]) << name;
    }
    EXPECT_TRUE(found) << e.name;
  }
  EXPECT_TRUE(fs::exists(root_ / "t" / "config.json"));
  const auto csv = slurp(root_ / "t" / "loss.csv");
  EXPECT_EQ(csv.substr(0, 10), "step,loss\n");
}

TEST_F(Cli, TrainLossCurveIsReproducible) {
  const std::string args =
      " --seed 2 --set steps=4 --set sequences=2 --set clip_length=3 --set learning_rate=0.002" + kSmallData;
  ASSERT_EQ(run("train --out " + path("a") + args), 0) << err();
  ASSERT_EQ(run("train --out " + path("b") + args), 0) << err();
  const auto a = slurp(root_ / "a" / "loss.csv");
  EXPECT_EQ(a, slurp(root_ / "b" / "loss.csv"));
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 5);
  EXPECT_EQ(slurp(root_ / "a" / "weights.bin"), slurp(root_ / "b" / "weights.bin"));
}

TEST_F(Cli, TrainReadsSequencesFromDisk) {
  ASSERT_EQ(run("gen-data --sequences 2 --out " + path("data") + kSmallData), 0);
  ASSERT_EQ(run("train --set steps=2 --set clip_length=2 --data " + path("data") + " --out " + path("t")), 0) << err();
  EXPECT_TRUE(fs::exists(root_ / "t" / "weights.bin"));
  EXPECT_EQ(run("train --set steps=2 --data " + path("missing") + " --out " + path("u")), 2);
}

TEST_F(Cli, InferPassesReferenceAndIsDeterministic) {
  ASSERT_EQ(run("gen-data --seed 4 --sequences 1 --out " + path("seq") + kSmallData + " --frames 5"), 0);
  ASSERT_EQ(run("train --seed 4 --set steps=1 --set sequences=1 --set clip_length=2 --out " + path("w") + kSmallData), 0) << err();
  const std::string args = " --seed 4 --data " + path("seq") + " --weights " + path("w/weights.bin");
  ASSERT_EQ(run("infer --overlays --out " + path("p1") + args), 0) << err();
  ASSERT_EQ(run("infer --overlays --out " + path("p2") + args), 0) << err();
  EXPECT_EQ(count_files(root_ / "p1" / "masks", ".pgm"), 5u);
  EXPECT_EQ(count_files(root_ / "p1" / "overlays", ".ppm"), 5u);
  EXPECT_EQ(slurp(root_ / "p1" / "masks" / "00000.pgm"), slurp(root_ / "seq" / "masks" / "00000.pgm"));
  expect_same_tree(root_ / "p1", root_ / "p2");
}

TEST_F(Cli, InferJobCountDoesNotChangeOutput) {
  ASSERT_EQ(run("gen-data --seed 8 --sequences 3 --out " + path("data") + kSmallData), 0);
  ASSERT_EQ(run("infer --seed 1 --jobs 1 --data " + path("data") + " --out " + path("j1")), 0) << err();
  ASSERT_EQ(run("infer --seed 1 --jobs 3 --data " + path("data") + " --out " + path("j3")), 0) << err();
  EXPECT_EQ(count_files(root_ / "j1" / "seq002" / "masks", ".pgm"), 4u);
  expect_same_tree(root_ / "j1", root_ / "j3");
}

TEST_F(Cli, InferWithoutReferenceMaskFails) {
  ASSERT_EQ(run("gen-data --sequences 1 --out " + path("seq") + kSmallData), 0);
  fs::remove_all(root_ / "seq" / "masks");
  EXPECT_EQ(run("infer --data " + path("seq") + " --out " + path("p")), 2);
  EXPECT_NE(err().find("reference mask"), std::string::npos);
}

TEST_F(Cli, EvalPerfectEmptyAndMismatch) {
  ASSERT_EQ(run("gen-data --seed 6 --sequences 1 --out " + path("gt") + kSmallData), 0);
  ASSERT_EQ(run("eval --pred " + path("gt") + " --gt " + path("gt") + " --out " + path("r")), 0) << err();
  EXPECT_NE(slurp(root_ / "r" / "report.csv").find("mean,all,1.000000,1.000000,1.000000"), std::string::npos);
  EXPECT_TRUE(fs::exists(root_ / "r" / "report.txt"));

  const auto gt = read_sequence(root_ / "gt");
  std::vector<MaskMap> empty(gt.masks.size(), MaskMap(24, 24));
  empty[0] = gt.masks[0];
  write_masks(root_ / "empty", empty);
  ASSERT_EQ(run("eval --pred " + path("empty") + " --gt " + path("gt") + " --out " + path("r0")), 0) << err();
  EXPECT_NE(slurp(root_ / "r0" / "report.csv").find("mean,all,0.000000,0.000000,0.000000"), std::string::npos);

  empty.pop_back();
  write_masks(root_ / "short", empty);
  EXPECT_EQ(run("eval --pred " + path("short") + " --gt " + path("gt")), 2);
}

TEST_F(Cli, EvalMatchesLibraryReport) {
  ASSERT_EQ(run("gen-data --seed 9 --sequences 1 --out " + path("gt") + kSmallData), 0);
  ASSERT_EQ(run("infer --seed 9 --data " + path("gt") + " --out " + path("p")), 0) << err();
  ASSERT_EQ(run("eval --pred " + path("p") + " --gt " + path("gt") + " --out " + path("r")), 0) << err();
  const auto expected =
      evaluate_sequence(read_masks(root_ / "p" / "masks", 4), read_sequence(root_ / "gt").masks);
  EXPECT_EQ(slurp(root_ / "r" / "report.csv"), report_csv(expected));
  EXPECT_EQ(out(), report_table(expected));
}

TEST_F(Cli, BenchWritesOneRowPerCase) {
  const std::string args =
      "bench --set bench_channels=16 --set bench_match_dim=8 --set bench_prop_dim=16 --set bench_window=3 "
      "--set bench_dw_kernel=3 --set 'bench_heads=[1,2]' --set 'bench_sizes=[4,6]' --set bench_repetitions=2 "
      "--set 'bench_blocks=[\"gpm\",\"lstt\",\"gpm_lt\"]' --out " +
      path("b");
  ASSERT_EQ(run(args), 0) << err();
  const auto csv = slurp(root_ / "b" / "bench.csv");
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "block,heads,T,H,W,C,Ck,Cv,median_ns,macs");
  std::vector<std::string> keys;
  while (std::getline(lines, line)) {
    // drop the timing and MAC columns: the rest must follow enumeration order
    keys.push_back(line.substr(0, line.rfind(',', line.rfind(',') - 1)));
  }
  ASSERT_EQ(keys.size(), 3u * 2 * 2);
  EXPECT_EQ(keys[0], "gpm,1,2,4,4,16,8,16");
  EXPECT_EQ(keys[1], "gpm,1,2,6,6,16,8,16");
  EXPECT_EQ(keys[2], "gpm,2,2,4,4,16,8,16");
  EXPECT_EQ(keys[11], "gpm_lt,2,2,6,6,16,8,16");
  EXPECT_EQ(out(), csv);
}

TEST_F(Cli, GradcheckPassesOnOneLayerDeskEngine) {
  ASSERT_EQ(run("gradcheck --set layers=1 --set gradcheck_samples=3"), 0) << out() << err();
  EXPECT_NE(out().find("PASS"), std::string::npos);
}

TEST_F(Cli, ConfigFileAndOverridePrecedence) {
  std::ofstream(root_ / "cfg.json") << R"({"frames": 6, "width": 24, "height": 24, "min_size": 6, "max_size": 9})";
  ASSERT_EQ(run("gen-data --sequences 1 --config " + path("cfg.json") + " --set frames=3 --out " + path("g")), 0)
      << err();
  EXPECT_EQ(count_files(root_ / "g" / "frames", ".ppm"), 3u);
  std::ofstream(root_ / "bad.json") << R"({"frames": 6, "colour": 1})";
  EXPECT_EQ(run("gen-data --config " + path("bad.json") + " --out " + path("h")), 1);
  EXPECT_EQ(run("gen-data --config " + path("absent.json") + " --out " + path("h")), 1);
}
