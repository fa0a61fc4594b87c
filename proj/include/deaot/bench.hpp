#pragma once

// Forward-time microbenchmarks of single propagation layers.

#include <algorithm>
#include <chrono>
#include <sstream>
#include <string>
#include <vector>

#include "deaot/propagation.hpp"

namespace deaot {

// gpm / lstt time a full layer; gpm_lt / lstt_lt time only the long-term
// propagation site.
enum class BenchBlock { gpm, lstt, gpm_lt, lstt_lt };

inline const char* to_string(BenchBlock b) {
  switch (b) {
    case BenchBlock::gpm: return "gpm";
    case BenchBlock::lstt: return "lstt";
    case BenchBlock::gpm_lt: return "gpm_lt";
    case BenchBlock::lstt_lt: return "lstt_lt";
  }
  return "?";
}

inline BenchBlock parse_bench_block(const std::string& s) {
  if (s == "gpm") return BenchBlock::gpm;
  if (s == "lstt") return BenchBlock::lstt;
  if (s == "gpm_lt") return BenchBlock::gpm_lt;
  if (s == "lstt_lt") return BenchBlock::lstt_lt;
  throw ConfigError("unknown bench block '" + s + "'");
}

struct BenchCase {
  BenchBlock block = BenchBlock::gpm;
  std::size_t heads = 1;
  std::size_t frames = 2;  // T, memorized frames
  std::size_t height = 30, width = 30;
  std::size_t channels = 256, match_dim = 128, prop_dim = 512;
  std::size_t window = 15;
  std::size_t dw_kernel = 5;
  std::size_t repetitions = 10;
  std::size_t warmup = 3;
};

struct BenchRow {
  BenchCase c;
  double median_ns = 0;
  std::uint64_t macs = 0;
  std::size_t inner = 1;  // calls per timed sample
};

inline bool is_decoupled(BenchBlock b) { return b == BenchBlock::gpm || b == BenchBlock::gpm_lt; }

inline PropagationConfig bench_propagation_config(const BenchCase& c) {
  PropagationConfig p;
  p.channels = c.channels;
  p.match_dim = c.match_dim;
  p.prop_dim = c.prop_dim;
  p.window = c.window;
  p.dw_kernel = is_decoupled(c.block) ? c.dw_kernel : 0;
  p.heads = c.heads;
  return p;
}

inline std::uint64_t bench_macs(const BenchCase& c) {
  return attention_flops(bench_propagation_config(c), c.frames, c.height, c.width, c.heads,
                         is_decoupled(c.block) ? 2 : 1)
      .macs();
}

namespace detail {

// Median wall time of `fn` in ns; samples shorter than min_sample_ns are
// re-run with more calls per sample.
template <typename F>
std::pair<double, std::size_t> time_median(F&& fn, std::size_t warmup, std::size_t reps) {
  using clock = std::chrono::steady_clock;
  constexpr double kMinSampleNs = 2e5;
  warmup = std::max<std::size_t>(warmup, 3);
  reps = std::max<std::size_t>(reps, 10);
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::size_t inner = 1;
  for (;;) {
    const auto t0 = clock::now();
    for (std::size_t i = 0; i < inner; ++i) fn();
    const double ns = std::chrono::duration<double, std::nano>(clock::now() - t0).count();
    if (ns >= kMinSampleNs || inner >= (std::size_t{1} << 20)) break;
    inner *= 2;
  }
  std::vector<double> samples;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = clock::now();
    for (std::size_t i = 0; i < inner; ++i) fn();
    samples.push_back(std::chrono::duration<double, std::nano>(clock::now() - t0).count() /
                      static_cast<double>(inner));
  }
  std::nth_element(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(samples.size() / 2), samples.end());
  double median = samples[samples.size() / 2];
  if (samples.size() % 2 == 0) {
    const double lower = *std::max_element(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(samples.size() / 2));
    median = (median + lower) / 2;
  }
  return {median, inner};
}

}  // namespace detail

// Times one case on random inputs (fixed seed), single-threaded. Memory keys
// and values are projected once up front for both block kinds.
inline BenchRow run_bench_case(const BenchCase& c, std::uint64_t seed = 0) {
#if defined(DEAOT_USE_CBLAS) && defined(OPENBLAS_VERSION)
  openblas_set_num_threads(1);
#endif
  NoGradGuard no_grad;
  const auto cfg = bench_propagation_config(c);
  cfg.validate();
  Rng rng(seed);
  const Grid grid{c.height, c.width};
  const std::size_t n = grid.tokens();
  ParamStore<float> store;
  BranchState<float> state{TensorF::randn({n, c.channels}, rng), TensorF::randn({n, c.channels}, rng), 0,
                           static_cast<std::int64_t>(c.frames) + 1};
  auto id_embedding = [&] { return TensorF::randn({n, c.prop_dim}, rng); };
  auto tokens = [&] { return TensorF::randn({n, c.channels}, rng); };

  std::vector<PropKind> order;
  for (auto k : cfg.order)
    if (k != PropKind::long_term || c.frames > 0) order.push_back(k);
  auto layer_cfg = cfg;
  layer_cfg.order = order;

  BenchRow row{c, 0.0, bench_macs(c), 1};
  if (is_decoupled(c.block)) {
    auto params = make_gpm_layer_params(store, "bench", cfg, rng);
    MemoryBankLayer<float> memory;
    for (std::size_t t = 0; t < c.frames; ++t)
      memory.append(make_memory_frame(params.long_term, cfg, SiteTokens<float>{tokens(), tokens()}, id_embedding(),
                                      static_cast<std::int64_t>(t)));
    const auto prev = make_memory_frame(params.short_term, cfg, SiteTokens<float>{tokens(), tokens()}, id_embedding(),
                                        static_cast<std::int64_t>(c.frames));
    LayerContext<float> ctx{grid, &memory, &prev, nullptr};
    if (c.block == BenchBlock::gpm) {
      std::tie(row.median_ns, row.inner) = detail::time_median(
          [&] { volatile auto s = gpm_forward(state, params, layer_cfg, ctx).state.id[0]; (void)s; }, c.warmup,
          c.repetitions);
    } else {
      std::tie(row.median_ns, row.inner) = detail::time_median(
          [&] {
            if (c.frames == 0) return;
            volatile auto s = lt_propagate(state, memory, params.long_term, cfg, grid).state.id[0];
            (void)s;
          },
          c.warmup, c.repetitions);
    }
  } else {
    auto params = make_lstt_layer_params(store, "bench", cfg, rng);
    MemoryBankLayer<float> memory;
    for (std::size_t t = 0; t < c.frames; ++t)
      memory.append(make_coupled_memory_frame(params.long_term, tokens(), id_embedding(), static_cast<std::int64_t>(t)));
    const auto prev =
        make_coupled_memory_frame(params.short_term, tokens(), id_embedding(), static_cast<std::int64_t>(c.frames));
    LayerContext<float> ctx{grid, &memory, &prev, nullptr};
    if (c.block == BenchBlock::lstt) {
      std::tie(row.median_ns, row.inner) = detail::time_median(
          [&] { volatile auto s = lstt_forward(state, params, layer_cfg, ctx).state.visual[0]; (void)s; }, c.warmup,
          c.repetitions);
    } else {
      std::tie(row.median_ns, row.inner) = detail::time_median(
          [&] {
            if (c.frames == 0) return;
            volatile auto s = lstt_long_term(state.visual, memory, params.long_term, c.heads).x[0];
            (void)s;
          },
          c.warmup, c.repetitions);
    }
  }
  return row;
}

inline std::vector<BenchRow> run_bench(const std::vector<BenchCase>& cases, std::uint64_t seed = 0) {
  std::vector<BenchRow> rows;
  for (const auto& c : cases) rows.push_back(run_bench_case(c, seed));
  return rows;
}

inline std::string bench_csv_header() { return "block,heads,T,H,W,C,Ck,Cv,median_ns,macs"; }

inline std::string bench_csv_row(const BenchRow& r) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(0);
  out << to_string(r.c.block) << ',' << r.c.heads << ',' << r.c.frames << ',' << r.c.height << ',' << r.c.width << ','
      << r.c.channels << ',' << r.c.match_dim << ',' << r.c.prop_dim << ',' << r.median_ns << ',' << r.macs;
  return out.str();
}

// Cartesian product of the listed values, in a fixed enumeration order.
struct BenchGrid {
  std::vector<BenchBlock> blocks = {BenchBlock::gpm, BenchBlock::lstt};
  std::vector<std::size_t> heads = {1, 8};
  std::vector<std::size_t> frames = {2};
  std::vector<std::size_t> sizes = {30};  // H = W
  BenchCase base;
};

inline std::vector<BenchCase> enumerate_cases(const BenchGrid& g) {
  std::vector<BenchCase> cases;
  for (auto b : g.blocks)
    for (auto h : g.heads)
      for (auto t : g.frames)
        for (auto s : g.sizes) {
          BenchCase c = g.base;
          c.block = b;
          c.heads = h;
          c.frames = t;
          c.height = c.width = s;
          cases.push_back(c);
        }
  return cases;
}

}  // namespace deaot
