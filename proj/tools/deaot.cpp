// deaot: synthetic data generation, training, inference, evaluation,
// gradient checking and benchmarking.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "deaot/bench.hpp"
#include "deaot/config.hpp"
#include "deaot/engine.hpp"
#include "deaot/metrics.hpp"
#include "deaot/synthetic.hpp"
#include "deaot/training.hpp"

namespace fs = std::filesystem;
using namespace deaot;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::size_t jobs = 1;
};

void add_common(CLI::App* app, Common& c, bool needs_out) {
  app->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "config override key=value (value parsed as JSON when possible)");
  app->add_option("--seed", c.seed, "random seed");
  auto* out = app->add_option("--out", c.out, "output directory");
  if (needs_out) out->required();
  app->add_flag("--force", c.force, "overwrite a non-empty output directory");
  app->add_option("--jobs", c.jobs, "parallel sequences")->check(CLI::PositiveNumber);
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) apply_config(cfg, read_json_file(c.config));
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    const auto key = kv.substr(0, eq), raw = kv.substr(eq + 1);
    auto value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    apply_config(cfg, nlohmann::json{{key, value}});
  }
  if (c.seed) cfg.seed = *c.seed;
  cfg.train.seed = cfg.seed;
  cfg.data.seed = cfg.seed;
  std::cerr << "config: " << config_json(cfg).dump() << "\n";
  return cfg;
}

void prepare_out(const fs::path& out, bool force) {
  if (fs::exists(out) && !fs::is_directory(out)) throw ConfigError(out.string() + " exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!force) throw ConfigError("output directory " + out.string() + " is not empty (use --force)");
    fs::remove_all(out);
  }
  fs::create_directories(out);
}

bool is_sequence_dir(const fs::path& p) { return fs::is_directory(p / "frames"); }

// A sequence directory, or a directory whose subdirectories are sequences.
std::vector<fs::path> sequence_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("no such directory " + root.string());
  if (is_sequence_dir(root)) return {root};
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && is_sequence_dir(e.path())) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw IoError("no sequence directories under " + root.string());
  return dirs;
}

std::vector<SyntheticSpec> synthetic_specs(const RunConfig& cfg) {
  std::vector<SyntheticSpec> specs;
  for (std::size_t i = 0; i < cfg.sequences; ++i) {
    auto s = cfg.data;
    s.seed = cfg.seed + i;
    specs.push_back(s);
  }
  return specs;
}

int cmd_gen_data(const Common& c) {
  auto cfg = resolve(c);
  const fs::path out = c.out;
  prepare_out(out, c.force);
  const auto specs = synthetic_specs(cfg);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    char name[16];
    std::snprintf(name, sizeof(name), "seq%03zu", i);
    const auto dir = specs.size() == 1 ? out : out / name;
    write_sequence(dir, generate_sequence(specs[i], cfg.engine.max_objects));
  }
  std::cout << "wrote " << specs.size() << " sequence(s) to " << out.string() << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& data_dir) {
  auto cfg = resolve(c);
  validate(cfg);
  const fs::path out = c.out;
  prepare_out(out, c.force);
  std::vector<Sequence> data;
  if (!data_dir.empty()) {
    for (const auto& d : sequence_dirs(data_dir)) data.push_back(read_sequence(d));
  } else {
    for (const auto& s : synthetic_specs(cfg)) data.push_back(generate_sequence(s, cfg.engine.max_objects));
  }
  Engine<float> engine(cfg.engine, cfg.seed);
  std::ofstream loss_csv(out / "loss.csv");
  loss_csv << "step,loss\n";
  loss_csv.precision(9);
  const std::size_t report_every = std::max<std::size_t>(1, cfg.train.steps / 20);
  auto result = train(engine, data, cfg.train, [&](std::size_t step, double loss) {
    loss_csv << step << ',' << loss << '\n';
    if (step % report_every == 0 || step + 1 == cfg.train.steps)
      std::cerr << "step " << step << " loss " << loss << "\n";
  });
  save_weights(out / "weights.bin", engine.params());
  std::ofstream(out / "config.json") << config_json(cfg).dump(2) << "\n";
  std::cout << "trained " << cfg.train.steps << " steps in " << result.seconds << " s; final loss "
            << (result.losses.empty() ? 0.0 : result.losses.back()) << "\n";
  return 0;
}

void infer_sequence(const RunConfig& cfg, const fs::path& weights, const fs::path& seq_dir, const fs::path& out) {
  NoGradGuard no_grad;
  const auto seq = read_sequence(seq_dir);
  if (seq.masks.empty()) throw IoError("sequence " + seq_dir.string() + " has no reference mask masks/00000.pgm");
  Engine<float> engine(cfg.engine, cfg.seed);
  if (!weights.empty()) load_weights(weights, engine.params());
  fs::create_directories(out / "masks");
  if (cfg.overlays) fs::create_directories(out / "overlays");
  engine.commit_reference(seq.frames[0], seq.masks[0]);
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    const MaskMap mask = t == 0 ? seq.masks[0] : engine.step(seq.frames[t]).mask;
    write_pgm(out / "masks" / frame_name(t, "pgm"), mask);
    if (cfg.overlays) write_ppm(out / "overlays" / frame_name(t, "ppm"), overlay(seq.frames[t], mask));
  }
}

int cmd_infer(const Common& c, const std::string& weights, const std::string& data_dir) {
  auto cfg = resolve(c);
  cfg.engine.validate();
  const fs::path out = c.out;
  prepare_out(out, c.force);
  const auto dirs = sequence_dirs(data_dir);
  const bool single = dirs.size() == 1 && is_sequence_dir(data_dir);
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < dirs.size(); i = next++) {
      try {
        infer_sequence(cfg, weights, dirs[i], single ? out : out / dirs[i].filename());
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < std::min(c.jobs, dirs.size()); ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  std::cout << "inferred " << dirs.size() << " sequence(s) into " << out.string() << "\n";
  return 0;
}

fs::path mask_dir(const fs::path& p) { return fs::is_directory(p / "masks") ? p / "masks" : p; }

std::size_t count_masks(const fs::path& dir) {
  std::size_t n = 0;
  while (fs::exists(dir / frame_name(n, "pgm"))) ++n;
  return n;
}

int cmd_eval(const Common& c, const std::string& pred, const std::string& gt) {
  const fs::path pdir = mask_dir(pred), gdir = mask_dir(gt);
  const auto np = count_masks(pdir), ng = count_masks(gdir);
  if (np != ng)
    throw DimensionError(std::to_string(np) + " predicted masks in " + pdir.string() + " but " + std::to_string(ng) +
                         " ground-truth masks in " + gdir.string());
  const auto report = evaluate_sequence(read_masks(pdir, np), read_masks(gdir, ng));
  std::cout << report_table(report);
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    std::ofstream(fs::path(c.out) / "report.csv") << report_csv(report);
    std::ofstream(fs::path(c.out) / "report.txt") << report_table(report);
  }
  return 0;
}

int cmd_gradcheck(const Common& c) {
  auto cfg = resolve(c);
  cfg.engine.validate();
  auto setup = cfg.gradcheck;
  setup.seed = cfg.seed;
  auto opts = cfg.gradcheck_options;
  opts.seed = cfg.seed;
  const auto report = gradcheck_engine(cfg.engine, setup, opts);
  for (const auto& t : report.tensors)
    std::cout << t.name << " checked=" << t.checked << " max_rel_error=" << t.max_rel_error << "\n";
  std::cout << "max_rel_error=" << report.max_rel_error << " checked=" << report.checked
            << " seconds=" << report.seconds << " " << (report.passed ? "PASS" : "FAIL") << "\n";
  if (!report.passed) {
    std::cerr << "gradient check failed for:";
    for (const auto& n : report.offending) std::cerr << " " << n;
    std::cerr << "\n";
    return 2;
  }
  return 0;
}

int cmd_bench(const Common& c) {
  auto cfg = resolve(c);
  const auto cases = enumerate_cases(cfg.bench);
  std::ostringstream csv;
  csv << bench_csv_header() << "\n";
  std::cout << bench_csv_header() << std::endl;
  for (const auto& bc : cases) {
    const auto row = run_bench_case(bc, cfg.seed);
    csv << bench_csv_row(row) << "\n";
    std::cout << bench_csv_row(row) << std::endl;
  }
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    std::ofstream(fs::path(c.out) / "bench.csv") << csv.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoupled dual-branch propagation for video object segmentation"};
  app.require_subcommand(1);
  Common gen, tr, inf, ev, gc, be;
  std::string train_data, infer_weights, infer_data, eval_pred, eval_gt;

  auto* gen_cmd = app.add_subcommand("gen-data", "write synthetic moving-shape sequences");
  add_common(gen_cmd, gen, true);
  for (const char* key : {"frames", "objects", "width", "height", "sequences"})
    gen_cmd->add_option_function<std::size_t>(
        std::string("--") + key, [&gen, key](std::size_t v) { gen.overrides.push_back(key + ("=" + std::to_string(v))); },
        std::string("shorthand for --set ") + key + "=N");

  auto* train_cmd = app.add_subcommand("train", "train on synthetic or on-disk sequences");
  add_common(train_cmd, tr, true);
  train_cmd->add_option("--data", train_data, "sequence directory (or directory of sequences)");

  auto* infer_cmd = app.add_subcommand("infer", "propagate the reference mask through a sequence");
  add_common(infer_cmd, inf, true);
  infer_cmd->add_option("--weights", infer_weights, "DEAOTW1 checkpoint")->check(CLI::ExistingFile);
  infer_cmd->add_option("--data", infer_data, "sequence directory (or directory of sequences)")->required();
  infer_cmd->add_flag_callback("--overlays", [&] { inf.overrides.push_back("overlays=true"); },
                               "also write colour overlays");

  auto* eval_cmd = app.add_subcommand("eval", "J / F / J&F of predicted masks");
  add_common(eval_cmd, ev, false);
  eval_cmd->add_option("--pred", eval_pred, "predicted mask directory")->required();
  eval_cmd->add_option("--gt", eval_gt, "ground-truth sequence or mask directory")->required();

  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of the full engine (double)");
  add_common(gc_cmd, gc, false);

  auto* bench_cmd = app.add_subcommand("bench", "time single propagation layers");
  add_common(bench_cmd, be, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(tr, train_data);
    if (*infer_cmd) return cmd_infer(inf, infer_weights, infer_data);
    if (*eval_cmd) return cmd_eval(ev, eval_pred, eval_gt);
    if (*gc_cmd) return cmd_gradcheck(gc);
    if (*bench_cmd) return cmd_bench(be);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
