#pragma once

// Run configuration: one flat JSON object covering engine, training, data
// generation, benchmarking and gradient checking. Unknown keys are errors.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "deaot/bench.hpp"
#include "deaot/engine.hpp"
#include "deaot/training.hpp"

namespace deaot {

struct RunConfig {
  std::uint64_t seed = 0;
  EngineConfig engine;
  TrainConfig train;
  SyntheticSpec data;
  std::size_t sequences = 4;  // gen-data / train: number of synthetic sequences
  BenchGrid bench;
  EngineGradcheckSetup gradcheck;
  GradcheckOptions gradcheck_options;
  bool overlays = false;
};

namespace detail {

inline KeySource parse_keys(const std::string& s) {
  if (s == "vis") return KeySource::vis;
  if (s == "vis+id") return KeySource::vis_id;
  throw ConfigError("key source must be 'vis' or 'vis+id', got '" + s + "'");
}
inline std::string keys_name(KeySource k) { return k == KeySource::vis ? "vis" : "vis+id"; }

inline MemoryVariant parse_variant(const std::string& s) {
  if (s == "T") return MemoryVariant::T;
  if (s == "S") return MemoryVariant::S;
  if (s == "B") return MemoryVariant::B;
  if (s == "L") return MemoryVariant::L;
  throw ConfigError("variant must be T, S, B or L, got '" + s + "'");
}

inline PropKind parse_prop(const std::string& s) {
  if (s == "self") return PropKind::self_prop;
  if (s == "lt") return PropKind::long_term;
  if (s == "st") return PropKind::short_term;
  throw ConfigError("order entries must be self, lt or st, got '" + s + "'");
}

template <typename V>
V get_as(const nlohmann::json& j, const std::string& key) {
  try {
    return j.get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

}  // namespace detail

// Applies every key of `j` onto `cfg`.
inline void apply_config(RunConfig& cfg, const nlohmann::json& j) {
  using detail::get_as;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  auto& e = cfg.engine;
  auto& t = cfg.train;
  auto& d = cfg.data;
  auto& b = cfg.bench;
  for (const auto& [key, v] : j.items()) {
    auto sz = [&] {
      const auto x = get_as<std::int64_t>(v, key);
      if (x < 0) throw ConfigError("config key '" + key + "' must be non-negative");
      return static_cast<std::size_t>(x);
    };
    auto num = [&] { return get_as<double>(v, key); };
    auto str = [&] { return get_as<std::string>(v, key); };
    auto sizes = [&] { return get_as<std::vector<std::size_t>>(v, key); };
    if (key == "seed") cfg.seed = get_as<std::uint64_t>(v, key);
    else if (key == "layers") e.layers = sz();
    else if (key == "channels") e.channels = sz();
    else if (key == "match_dim") e.match_dim = sz();
    else if (key == "prop_dim") e.prop_dim = sz();
    else if (key == "window") e.window = sz();
    else if (key == "dw_kernel") e.dw_kernel = sz();
    else if (key == "max_objects") e.max_objects = sz();
    else if (key == "mem_interval") e.mem_interval = sz();
    else if (key == "variant") e.variant = detail::parse_variant(str());
    else if (key == "heads") e.heads = sz();
    else if (key == "self_keys") e.self_keys = detail::parse_keys(str());
    else if (key == "ltst_keys") e.ltst_keys = detail::parse_keys(str());
    else if (key == "decouple") e.decouple = get_as<bool>(v, key);
    else if (key == "stride") e.stride = sz();
    else if (key == "gate") e.gate = get_as<bool>(v, key);
    else if (key == "order") {
      e.order.clear();
      for (const auto& s : get_as<std::vector<std::string>>(v, key)) e.order.push_back(detail::parse_prop(s));
    } else if (key == "decoder_input") {
      const auto s = str();
      if (s == "concat") e.decoder_input = DecoderInput::concat;
      else if (s == "id_only") e.decoder_input = DecoderInput::id_only;
      else throw ConfigError("decoder_input must be concat or id_only");
    }
    else if (key == "clip_length") t.clip_length = sz();
    else if (key == "batch") t.batch = sz();
    else if (key == "steps") t.steps = sz();
    else if (key == "learning_rate") t.learning_rate = num();
    else if (key == "weight_decay") t.weight_decay = num();
    else if (key == "warmup_fraction") t.warmup_fraction = num();
    else if (key == "clip_norm") t.clip_norm = num();
    else if (key == "teacher_memory") {
      const auto s = str();
      if (s == "predicted") t.teacher_memory = TeacherMemory::predicted;
      else if (s == "ground_truth") t.teacher_memory = TeacherMemory::ground_truth;
      else throw ConfigError("teacher_memory must be predicted or ground_truth");
    }
    else if (key == "frames") d.frames = sz();
    else if (key == "width") d.width = sz();
    else if (key == "height") d.height = sz();
    else if (key == "objects") d.objects = sz();
    else if (key == "sequences") cfg.sequences = sz();
    else if (key == "min_size") d.min_size = sz();
    else if (key == "max_size") d.max_size = sz();
    else if (key == "max_speed") d.max_speed = num();
    else if (key == "noise_cell") d.noise_cell = sz();
    else if (key == "noise_amplitude") d.noise_amplitude = num();
    else if (key == "overlays") cfg.overlays = get_as<bool>(v, key);
    else if (key == "bench_blocks") {
      b.blocks.clear();
      for (const auto& s : get_as<std::vector<std::string>>(v, key)) b.blocks.push_back(parse_bench_block(s));
    }
    else if (key == "bench_heads") b.heads = sizes();
    else if (key == "bench_frames") b.frames = sizes();
    else if (key == "bench_sizes") b.sizes = sizes();
    else if (key == "bench_channels") b.base.channels = sz();
    else if (key == "bench_match_dim") b.base.match_dim = sz();
    else if (key == "bench_prop_dim") b.base.prop_dim = sz();
    else if (key == "bench_window") b.base.window = sz();
    else if (key == "bench_dw_kernel") b.base.dw_kernel = sz();
    else if (key == "bench_repetitions") b.base.repetitions = sz();
    else if (key == "bench_warmup") b.base.warmup = sz();
    else if (key == "gradcheck_image_size") cfg.gradcheck.image_size = sz();
    else if (key == "gradcheck_frames") cfg.gradcheck.frames = sz();
    else if (key == "gradcheck_tolerance") cfg.gradcheck_options.tolerance = num();
    else if (key == "gradcheck_samples") cfg.gradcheck_options.max_per_tensor = sz();
    else throw ConfigError("unknown config key '" + key + "'");
  }
}

// Fully resolved configuration, in the same flat key space apply_config reads.
inline nlohmann::json config_json(const RunConfig& cfg) {
  const auto& e = cfg.engine;
  const auto& t = cfg.train;
  const auto& d = cfg.data;
  const auto& b = cfg.bench;
  std::vector<std::string> order, blocks;
  for (auto k : e.order) order.push_back(to_string(k));
  for (auto k : b.blocks) blocks.push_back(to_string(k));
  return {
      {"seed", cfg.seed},
      {"layers", e.layers},
      {"channels", e.channels},
      {"match_dim", e.match_dim},
      {"prop_dim", e.prop_dim},
      {"window", e.window},
      {"dw_kernel", e.dw_kernel},
      {"max_objects", e.max_objects},
      {"mem_interval", e.mem_interval},
      {"variant", to_string(e.variant)},
      {"heads", e.heads},
      {"self_keys", detail::keys_name(e.self_keys)},
      {"ltst_keys", detail::keys_name(e.ltst_keys)},
      {"decouple", e.decouple},
      {"stride", e.stride},
      {"gate", e.gate},
      {"order", order},
      {"decoder_input", e.decoder_input == DecoderInput::concat ? "concat" : "id_only"},
      {"clip_length", t.clip_length},
      {"batch", t.batch},
      {"steps", t.steps},
      {"learning_rate", t.learning_rate},
      {"weight_decay", t.weight_decay},
      {"warmup_fraction", t.warmup_fraction},
      {"clip_norm", t.clip_norm},
      {"teacher_memory", t.teacher_memory == TeacherMemory::predicted ? "predicted" : "ground_truth"},
      {"frames", d.frames},
      {"width", d.width},
      {"height", d.height},
      {"objects", d.objects},
      {"sequences", cfg.sequences},
      {"min_size", d.min_size},
      {"max_size", d.max_size},
      {"max_speed", d.max_speed},
      {"noise_cell", d.noise_cell},
      {"noise_amplitude", d.noise_amplitude},
      {"overlays", cfg.overlays},
      {"bench_blocks", blocks},
      {"bench_heads", b.heads},
      {"bench_frames", b.frames},
      {"bench_sizes", b.sizes},
      {"bench_channels", b.base.channels},
      {"bench_match_dim", b.base.match_dim},
      {"bench_prop_dim", b.base.prop_dim},
      {"bench_window", b.base.window},
      {"bench_dw_kernel", b.base.dw_kernel},
      {"bench_repetitions", b.base.repetitions},
      {"bench_warmup", b.base.warmup},
      {"gradcheck_image_size", cfg.gradcheck.image_size},
      {"gradcheck_frames", cfg.gradcheck.frames},
      {"gradcheck_tolerance", cfg.gradcheck_options.tolerance},
      {"gradcheck_samples", cfg.gradcheck_options.max_per_tensor},
  };
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

// Validates the cross-module constraints of a resolved config.
inline void validate(const RunConfig& cfg) {
  cfg.engine.validate();
  cfg.train.validate();
  if (cfg.data.objects > cfg.engine.max_objects) throw ConfigError("objects exceed max_objects");
  if (cfg.data.width % cfg.engine.stride != 0 || cfg.data.height % cfg.engine.stride != 0)
    throw ConfigError("frame size must be divisible by the stride");
}

}  // namespace deaot
