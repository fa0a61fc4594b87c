#pragma once

// Dual-branch gated propagation (self, long-term, short-term) assembled into
// the Gated Propagation Module, and the coupled multi-head LSTT block used as
// the baseline.
//
// Every propagation site is pre-LN + residual on each branch. The key/query
// projection W^K of a site is shared by query and memory tokens, and the ID
// branch always consumes the attention map computed for the visual branch.

#include <optional>
#include <string>
#include <vector>

#include "deaot/nn_ops.hpp"
#include "deaot/params.hpp"

namespace deaot {

enum class PropKind { self_prop, long_term, short_term };
enum class KeySource { vis, vis_id };

inline const char* to_string(PropKind kind) {
  switch (kind) {
    case PropKind::self_prop: return "self";
    case PropKind::long_term: return "lt";
    case PropKind::short_term: return "st";
  }
  return "?";
}

struct PropagationConfig {
  std::size_t channels = 32;    // C
  std::size_t match_dim = 16;   // C_k
  std::size_t prop_dim = 64;    // C_v
  std::size_t window = 7;       // lambda, short-term neighbourhood side
  std::size_t dw_kernel = 3;    // 0 disables the depth-wise conv
  std::size_t heads = 1;        // attention heads (GPM default 1)
  KeySource self_keys = KeySource::vis_id;
  KeySource ltst_keys = KeySource::vis;
  bool gate = true;
  std::vector<PropKind> order = {PropKind::self_prop, PropKind::long_term, PropKind::short_term};

  void validate() const {
    if (channels == 0 || match_dim == 0 || prop_dim == 0) throw ConfigError("channel dimensions must be positive");
    if (window % 2 == 0) throw ConfigError("short-term window must be odd, got " + std::to_string(window));
    if (dw_kernel != 0 && dw_kernel % 2 == 0)
      throw ConfigError("depth-wise kernel size must be odd or 0, got " + std::to_string(dw_kernel));
    if (heads == 0 || match_dim % heads != 0 || prop_dim % heads != 0)
      throw ConfigError(std::to_string(heads) + " heads do not divide C_k=" + std::to_string(match_dim) +
                        " and C_v=" + std::to_string(prop_dim));
    for (std::size_t i = 0; i < order.size(); ++i)
      for (std::size_t j = i + 1; j < order.size(); ++j)
        if (order[i] == order[j]) throw ConfigError("propagation order repeats a sub-module");
  }
};

// Trainable tensors of one propagation type in one GPM layer.
template <typename T>
struct PropagationParams {
  Tensor<T> w_k;      // [C or 2C x C_k], shared by queries and keys
  Tensor<T> w_v;      // [C x C_v]  visual values
  Tensor<T> w_v_bar;  // [C x C_v]  ID values
  Tensor<T> w_u;      // [C x C_v]  visual gate
  Tensor<T> w_u_bar;  // [C x C_v]  ID gate
  Tensor<T> w_o;      // [C_v x C]
  Tensor<T> w_o_bar;  // [C_v x C]
  Tensor<T> dw;       // [ks x ks x C_v], empty when disabled
  Tensor<T> dw_bar;
  Tensor<T> ln_gain, ln_bias;          // visual pre-LN
  Tensor<T> ln_bar_gain, ln_bar_bias;  // ID pre-LN
};

template <typename T>
struct GpmLayerParams {
  PropagationParams<T> self_prop, long_term, short_term;

  const PropagationParams<T>& of(PropKind kind) const {
    return kind == PropKind::self_prop ? self_prop : kind == PropKind::long_term ? long_term : short_term;
  }
};

namespace detail {

template <typename T>
Tensor<T> init_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  return Tensor<T>::randn({rows, cols}, rng, 1.0 / std::sqrt(static_cast<double>(rows)));
}

// Near-identity depth-wise kernel: centre tap 1 plus small noise.
template <typename T>
Tensor<T> init_dw_kernel(Rng& rng, std::size_t ks, std::size_t channels) {
  auto k = Tensor<T>::randn({ks, ks, channels}, rng, 0.02);
  auto data = k.mutable_data();
  const std::size_t centre = (ks / 2) * ks + ks / 2;
  for (std::size_t c = 0; c < channels; ++c) data[centre * channels + c] += T(1);
  return k;
}

}  // namespace detail

template <typename T>
PropagationParams<T> make_propagation_params(ParamStore<T>& store, const std::string& prefix,
                                             const PropagationConfig& cfg, KeySource keys, Rng& rng) {
  const std::size_t c = cfg.channels, ck = cfg.match_dim, cv = cfg.prop_dim;
  const std::size_t key_in = keys == KeySource::vis_id ? 2 * c : c;
  PropagationParams<T> p;
  p.w_k = store.add(prefix + ".w_k", detail::init_matrix<T>(rng, key_in, ck));
  p.w_v = store.add(prefix + ".w_v", detail::init_matrix<T>(rng, c, cv));
  p.w_v_bar = store.add(prefix + ".w_v_bar", detail::init_matrix<T>(rng, c, cv));
  p.w_u = store.add(prefix + ".w_u", detail::init_matrix<T>(rng, c, cv));
  p.w_u_bar = store.add(prefix + ".w_u_bar", detail::init_matrix<T>(rng, c, cv));
  p.w_o = store.add(prefix + ".w_o", detail::init_matrix<T>(rng, cv, c));
  p.w_o_bar = store.add(prefix + ".w_o_bar", detail::init_matrix<T>(rng, cv, c));
  if (cfg.dw_kernel > 0) {
    p.dw = store.add(prefix + ".dw", detail::init_dw_kernel<T>(rng, cfg.dw_kernel, cv));
    p.dw_bar = store.add(prefix + ".dw_bar", detail::init_dw_kernel<T>(rng, cfg.dw_kernel, cv));
  }
  p.ln_gain = store.add(prefix + ".ln.gain", Tensor<T>::ones({c}));
  p.ln_bias = store.add(prefix + ".ln.bias", Tensor<T>::zeros({c}));
  p.ln_bar_gain = store.add(prefix + ".ln_bar.gain", Tensor<T>::ones({c}));
  // With M_1 = 0 a zero bias would close every ID gate at init.
  p.ln_bar_bias = store.add(prefix + ".ln_bar.bias", Tensor<T>::randn({c}, rng, 1.0));
  return p;
}

template <typename T>
GpmLayerParams<T> make_gpm_layer_params(ParamStore<T>& store, const std::string& prefix,
                                        const PropagationConfig& cfg, Rng& rng) {
  GpmLayerParams<T> p;
  p.self_prop = make_propagation_params(store, prefix + ".self", cfg, cfg.self_keys, rng);
  p.long_term = make_propagation_params(store, prefix + ".lt", cfg, cfg.ltst_keys, rng);
  p.short_term = make_propagation_params(store, prefix + ".st", cfg, cfg.ltst_keys, rng);
  return p;
}

// Current-frame embeddings entering/leaving a layer. `id` is empty for the
// coupled (single-stream) baseline.
template <typename T>
struct BranchState {
  Tensor<T> visual;  // I_l^t  [n x C]
  Tensor<T> id;      // M_l^t  [n x C]
  std::size_t layer = 0;
  std::int64_t frame = 0;

  bool coupled() const { return id.empty(); }
};

// One memorized frame at one propagation site, with its projected keys and
// values cached.
template <typename T>
struct MemoryFrame {
  std::int64_t frame = 0;
  Tensor<T> visual;        // normalized visual tokens at the site
  Tensor<T> id;            // normalized ID tokens at the site (empty if coupled)
  Tensor<T> id_embedding;  // ID(Y) of the frame's mask
  Tensor<T> keys;          // [n x C_k]
  Tensor<T> values;        // visual values [n x C_v] (coupled: X W^V + ID(Y))
  Tensor<T> id_values;     // M W^V_bar + ID(Y)
};

// Long-term memory of one layer: frames in increasing frame-id order with
// concatenated keys/values.
template <typename T>
class MemoryBankLayer {
 public:
  void append(MemoryFrame<T> frame) {
    if (!frames_.empty() && frame.frame <= frames_.back().frame)
      throw ContractError("memory frame ids must strictly increase");
    frames_.push_back(std::move(frame));
    rebuild();
  }
  bool empty() const { return frames_.empty(); }
  std::size_t size() const { return frames_.size(); }
  const std::vector<MemoryFrame<T>>& frames() const { return frames_; }
  const Tensor<T>& keys() const { return keys_; }
  const Tensor<T>& values() const { return values_; }
  const Tensor<T>& id_values() const { return id_values_; }
  std::vector<std::int64_t> frame_ids() const {
    std::vector<std::int64_t> ids;
    for (const auto& f : frames_) ids.push_back(f.frame);
    return ids;
  }

 private:
  void rebuild() {
    std::vector<Tensor<T>> k, v, iv;
    for (const auto& f : frames_) {
      k.push_back(f.keys);
      v.push_back(f.values);
      if (!f.id_values.empty()) iv.push_back(f.id_values);
    }
    keys_ = concat_rows(k);
    values_ = concat_rows(v);
    if (!iv.empty()) id_values_ = concat_rows(iv);
  }

  std::vector<MemoryFrame<T>> frames_;
  Tensor<T> keys_, values_, id_values_;
};

// Normalized inputs seen at one site; memory frames are built from these.
template <typename T>
struct SiteTokens {
  Tensor<T> visual;
  Tensor<T> id;
};

// Captured intermediates of one propagation site.
template <typename T>
struct SiteTrace {
  PropKind kind = PropKind::self_prop;
  CorrMap<T> vis_map;  // map consumed by the visual GP
  CorrMap<T> id_map;   // map consumed by the ID GP
  Tensor<T> vis_out;
  Tensor<T> id_out;
};

template <typename T>
struct SiteResult {
  BranchState<T> state;
  SiteTokens<T> tokens;
  SiteTrace<T> trace;
};

namespace detail {

template <typename T>
Tensor<T> key_input(const Tensor<T>& visual, const Tensor<T>& id, KeySource keys) {
  return keys == KeySource::vis_id ? concat_channels(visual, id) : visual;
}

template <typename T>
SiteTokens<T> normalize_site(const BranchState<T>& state, const PropagationParams<T>& p) {
  return {layer_norm(state.visual, p.ln_gain, p.ln_bias), layer_norm(state.id, p.ln_bar_gain, p.ln_bar_bias)};
}

// Runs both branch GPs over one shared attention map and applies residuals.
template <typename T>
SiteResult<T> propagate_pair(PropKind kind, const BranchState<T>& state, SiteTokens<T> tokens,
                             const CorrMap<T>& map, const Tensor<T>& vis_values, const Tensor<T>& id_values,
                             const PropagationParams<T>& p, const PropagationConfig& cfg, Grid grid) {
  const GatedPropagationOptions gp{cfg.gate};
  SiteResult<T> r;
  r.trace.kind = kind;
  r.trace.vis_map = map;
  r.trace.vis_out = gated_propagation(matmul(tokens.visual, p.w_u), r.trace.vis_map, vis_values, p.w_o, p.dw, grid, gp);
  r.trace.id_map = map;
  r.trace.id_out = gated_propagation(matmul(tokens.id, p.w_u_bar), r.trace.id_map, id_values, p.w_o_bar, p.dw_bar, grid, gp);
  r.state = state;
  r.state.visual = add(state.visual, r.trace.vis_out);
  r.state.id = add(state.id, r.trace.id_out);
  r.tokens = std::move(tokens);
  return r;
}

}  // namespace detail

// Projects a frame's site tokens into memory keys/values for a propagation type.
template <typename T>
MemoryFrame<T> make_memory_frame(const PropagationParams<T>& p, const PropagationConfig& cfg,
                                 const SiteTokens<T>& tokens, const Tensor<T>& id_embedding, std::int64_t frame) {
  MemoryFrame<T> m;
  m.frame = frame;
  m.visual = tokens.visual;
  m.id = tokens.id;
  m.id_embedding = id_embedding;
  m.keys = matmul(detail::key_input(tokens.visual, tokens.id, cfg.ltst_keys), p.w_k);
  m.values = matmul(tokens.visual, p.w_v);
  m.id_values = add(matmul(tokens.id, p.w_v_bar), id_embedding);
  return m;
}

// Long-term propagation against all memorized frames. If `self_reference` is
// given, the current frame (with that ID embedding) serves as its own memory
// and the built memory frame is stored there.
template <typename T>
SiteResult<T> lt_propagate(const BranchState<T>& state, const MemoryBankLayer<T>& memory,
                           const PropagationParams<T>& p, const PropagationConfig& cfg, Grid grid) {
  if (memory.empty()) throw ContractError("long-term propagation needs at least one memorized frame");
  auto tokens = detail::normalize_site(state, p);
  auto q = matmul(detail::key_input(tokens.visual, tokens.id, cfg.ltst_keys), p.w_k);
  auto map = corr(q, memory.keys(), cfg.heads);
  map.query_frame = state.frame;
  map.key_frames = memory.frame_ids();
  return detail::propagate_pair(PropKind::long_term, state, std::move(tokens), map, memory.values(),
                                memory.id_values(), p, cfg, grid);
}

// Short-term propagation: each location attends to its lambda x lambda
// neighbourhood in frame t-1 (`previous`, projected with short-term params).
template <typename T>
SiteResult<T> st_propagate(const BranchState<T>& state, const MemoryFrame<T>& previous,
                           const PropagationParams<T>& p, const PropagationConfig& cfg, Grid grid) {
  if (cfg.window % 2 == 0) throw ConfigError("short-term window must be odd");
  if (previous.keys.rows() != grid.tokens())
    throw DimensionError("short-term previous frame is not on the current grid");
  auto tokens = detail::normalize_site(state, p);
  auto q = matmul(detail::key_input(tokens.visual, tokens.id, cfg.ltst_keys), p.w_k);
  auto map = corr_local(q, previous.keys, grid, cfg.window, cfg.heads);
  map.query_frame = state.frame;
  map.key_frames = {previous.frame};
  return detail::propagate_pair(PropKind::short_term, state, std::move(tokens), map, previous.values,
                                previous.id_values, p, cfg, grid);
}

// Self-propagation: keys and queries from I (+) M, one map for both branches.
template <typename T>
SiteResult<T> self_propagate(const BranchState<T>& state, const PropagationParams<T>& p,
                             const PropagationConfig& cfg, Grid grid) {
  auto tokens = detail::normalize_site(state, p);
  auto k = matmul(detail::key_input(tokens.visual, tokens.id, cfg.self_keys), p.w_k);
  auto map = corr(k, k, cfg.heads);
  map.query_frame = state.frame;
  map.key_frames = {state.frame};
  auto vis_values = matmul(tokens.visual, p.w_v);
  auto id_values = matmul(tokens.id, p.w_v_bar);
  return detail::propagate_pair(PropKind::self_prop, state, std::move(tokens), map, vis_values, id_values, p, cfg,
                                grid);
}

// Inputs of a layer forward beyond the current state.
template <typename T>
struct LayerContext {
  Grid grid;
  const MemoryBankLayer<T>* memory = nullptr;  // long-term memory for this layer
  const MemoryFrame<T>* previous = nullptr;    // short-term (t-1) snapshot for this layer
  // Set when the current frame is an annotated reference: it then serves as
  // its own long- and short-term memory.
  const Tensor<T>* reference_id = nullptr;
};

template <typename T>
struct LayerOutput {
  BranchState<T> state;
  std::optional<SiteTokens<T>> lt_tokens, st_tokens;
  std::optional<MemoryFrame<T>> lt_frame, st_frame;  // built in reference mode
  std::vector<SiteTrace<T>> traces;
};

// One GPM layer: the configured sequence of self / long-term / short-term
// gated propagation, no feed-forward.
template <typename T>
LayerOutput<T> gpm_forward(const BranchState<T>& input, const GpmLayerParams<T>& params,
                           const PropagationConfig& cfg, const LayerContext<T>& ctx) {
  if (input.coupled()) throw ContractError("gpm_forward needs both visual and ID embeddings");
  LayerOutput<T> out;
  out.state = input;
  for (PropKind kind : cfg.order) {
    SiteResult<T> r;
    switch (kind) {
      case PropKind::self_prop:
        r = self_propagate(out.state, params.self_prop, cfg, ctx.grid);
        break;
      case PropKind::long_term: {
        if (ctx.reference_id) {
          MemoryBankLayer<T> own;
          auto tokens = detail::normalize_site(out.state, params.long_term);
          own.append(make_memory_frame(params.long_term, cfg, tokens, *ctx.reference_id, input.frame));
          out.lt_frame = own.frames().front();
          r = lt_propagate(out.state, own, params.long_term, cfg, ctx.grid);
        } else {
          if (!ctx.memory) throw ContractError("long-term propagation without memory");
          r = lt_propagate(out.state, *ctx.memory, params.long_term, cfg, ctx.grid);
        }
        out.lt_tokens = r.tokens;
        break;
      }
      case PropKind::short_term: {
        if (ctx.reference_id && !ctx.previous) {
          auto tokens = detail::normalize_site(out.state, params.short_term);
          out.st_frame = make_memory_frame(params.short_term, cfg, tokens, *ctx.reference_id, input.frame);
          r = st_propagate(out.state, *out.st_frame, params.short_term, cfg, ctx.grid);
        } else {
          if (!ctx.previous) throw ContractError("short-term propagation without a previous frame");
          r = st_propagate(out.state, *ctx.previous, params.short_term, cfg, ctx.grid);
        }
        out.st_tokens = r.tokens;
        break;
      }
    }
    out.state = r.state;
    out.traces.push_back(std::move(r.trace));
  }
  out.state.layer = input.layer + 1;
  return out;
}

// ---------------------------------------------------------------------------
// Coupled LSTT baseline

template <typename T>
struct LsttAttentionParams {
  Tensor<T> w_k;  // [C x C_k]
  Tensor<T> w_v;  // [C x C_v]
  Tensor<T> w_o;  // [C_v x C]
  Tensor<T> ln_gain, ln_bias;
};

template <typename T>
struct LsttLayerParams {
  LsttAttentionParams<T> self_prop, long_term, short_term;
  Tensor<T> ffn_ln_gain, ffn_ln_bias;
  Tensor<T> w_ffn1;  // [C x 4C]
  Tensor<T> w_ffn2;  // [4C x C]

  const LsttAttentionParams<T>& of(PropKind kind) const {
    return kind == PropKind::self_prop ? self_prop : kind == PropKind::long_term ? long_term : short_term;
  }
};

inline constexpr std::size_t kFfnExpansion = 4;

template <typename T>
LsttLayerParams<T> make_lstt_layer_params(ParamStore<T>& store, const std::string& prefix,
                                          const PropagationConfig& cfg, Rng& rng) {
  const std::size_t c = cfg.channels, ck = cfg.match_dim, cv = cfg.prop_dim;
  auto make = [&](const std::string& name) {
    LsttAttentionParams<T> p;
    p.w_k = store.add(prefix + "." + name + ".w_k", detail::init_matrix<T>(rng, c, ck));
    p.w_v = store.add(prefix + "." + name + ".w_v", detail::init_matrix<T>(rng, c, cv));
    p.w_o = store.add(prefix + "." + name + ".w_o", detail::init_matrix<T>(rng, cv, c));
    p.ln_gain = store.add(prefix + "." + name + ".ln.gain", Tensor<T>::ones({c}));
    p.ln_bias = store.add(prefix + "." + name + ".ln.bias", Tensor<T>::zeros({c}));
    return p;
  };
  LsttLayerParams<T> p;
  p.self_prop = make("self");
  p.long_term = make("lt");
  p.short_term = make("st");
  p.ffn_ln_gain = store.add(prefix + ".ffn.ln.gain", Tensor<T>::ones({c}));
  p.ffn_ln_bias = store.add(prefix + ".ffn.ln.bias", Tensor<T>::zeros({c}));
  p.w_ffn1 = store.add(prefix + ".ffn.w1", detail::init_matrix<T>(rng, c, kFfnExpansion * c));
  p.w_ffn2 = store.add(prefix + ".ffn.w2", detail::init_matrix<T>(rng, kFfnExpansion * c, c));
  return p;
}

// Coupled memory frame: keys X W^K, values X W^V + ID(Y).
template <typename T>
MemoryFrame<T> make_coupled_memory_frame(const LsttAttentionParams<T>& p, const Tensor<T>& tokens,
                                         const Tensor<T>& id_embedding, std::int64_t frame) {
  MemoryFrame<T> m;
  m.frame = frame;
  m.visual = tokens;
  m.id_embedding = id_embedding;
  m.keys = matmul(tokens, p.w_k);
  m.values = id_embedding.empty() ? matmul(tokens, p.w_v) : add(matmul(tokens, p.w_v), id_embedding);
  return m;
}

template <typename T>
struct CoupledSiteResult {
  Tensor<T> x;
  Tensor<T> tokens;  // normalized input at the site
  SiteTrace<T> trace;
};

namespace detail {

template <typename T>
CoupledSiteResult<T> coupled_site(PropKind kind, const Tensor<T>& x, const Tensor<T>& tokens,
                                  const CorrMap<T>& map, const Tensor<T>& values,
                                  const LsttAttentionParams<T>& p) {
  CoupledSiteResult<T> r;
  r.trace.kind = kind;
  r.trace.vis_map = map;
  r.trace.vis_out = matmul(attend(map, values), p.w_o);
  r.x = add(x, r.trace.vis_out);
  r.tokens = tokens;
  return r;
}

}  // namespace detail

template <typename T>
CoupledSiteResult<T> lstt_self_attention(const Tensor<T>& x, const LsttAttentionParams<T>& p, std::size_t heads) {
  auto tokens = layer_norm(x, p.ln_gain, p.ln_bias);
  auto k = matmul(tokens, p.w_k);
  return detail::coupled_site(PropKind::self_prop, x, tokens, corr(k, k, heads), matmul(tokens, p.w_v), p);
}

template <typename T>
CoupledSiteResult<T> lstt_long_term(const Tensor<T>& x, const MemoryBankLayer<T>& memory,
                                    const LsttAttentionParams<T>& p, std::size_t heads) {
  if (memory.empty()) throw ContractError("long-term attention needs at least one memorized frame");
  auto tokens = layer_norm(x, p.ln_gain, p.ln_bias);
  auto map = corr(matmul(tokens, p.w_k), memory.keys(), heads);
  map.key_frames = memory.frame_ids();
  return detail::coupled_site(PropKind::long_term, x, tokens, map, memory.values(), p);
}

template <typename T>
CoupledSiteResult<T> lstt_short_term(const Tensor<T>& x, const MemoryFrame<T>& previous,
                                     const LsttAttentionParams<T>& p, std::size_t heads, std::size_t window,
                                     Grid grid) {
  auto tokens = layer_norm(x, p.ln_gain, p.ln_bias);
  auto map = corr_local(matmul(tokens, p.w_k), previous.keys, grid, window, heads);
  map.key_frames = {previous.frame};
  return detail::coupled_site(PropKind::short_term, x, tokens, map, previous.values, p);
}

template <typename T>
Tensor<T> lstt_feed_forward(const Tensor<T>& x, const LsttLayerParams<T>& p) {
  auto h = silu(matmul(layer_norm(x, p.ffn_ln_gain, p.ffn_ln_bias), p.w_ffn1));
  return add(x, matmul(h, p.w_ffn2));
}

// One coupled LSTT layer: multi-head self / long-term / short-term attention
// in the configured order, then the feed-forward module. `input.id` is
// ignored; the stream X carries both visual and identity information.
template <typename T>
LayerOutput<T> lstt_forward(const BranchState<T>& input, const LsttLayerParams<T>& params,
                            const PropagationConfig& cfg, const LayerContext<T>& ctx) {
  if (cfg.heads == 0 || cfg.match_dim % cfg.heads != 0 || cfg.prop_dim % cfg.heads != 0)
    throw ConfigError("LSTT heads must divide C_k and C_v");
  LayerOutput<T> out;
  Tensor<T> x = input.visual;
  for (PropKind kind : cfg.order) {
    CoupledSiteResult<T> r;
    switch (kind) {
      case PropKind::self_prop:
        r = lstt_self_attention(x, params.self_prop, cfg.heads);
        break;
      case PropKind::long_term: {
        if (ctx.reference_id) {
          MemoryBankLayer<T> own;
          auto tokens = layer_norm(x, params.long_term.ln_gain, params.long_term.ln_bias);
          own.append(make_coupled_memory_frame(params.long_term, tokens, *ctx.reference_id, input.frame));
          out.lt_frame = own.frames().front();
          r = lstt_long_term(x, own, params.long_term, cfg.heads);
        } else {
          if (!ctx.memory) throw ContractError("long-term attention without memory");
          r = lstt_long_term(x, *ctx.memory, params.long_term, cfg.heads);
        }
        out.lt_tokens = SiteTokens<T>{r.tokens, {}};
        break;
      }
      case PropKind::short_term: {
        if (ctx.reference_id && !ctx.previous) {
          auto tokens = layer_norm(x, params.short_term.ln_gain, params.short_term.ln_bias);
          out.st_frame = make_coupled_memory_frame(params.short_term, tokens, *ctx.reference_id, input.frame);
          r = lstt_short_term(x, *out.st_frame, params.short_term, cfg.heads, cfg.window, ctx.grid);
        } else {
          if (!ctx.previous) throw ContractError("short-term attention without a previous frame");
          r = lstt_short_term(x, *ctx.previous, params.short_term, cfg.heads, cfg.window, ctx.grid);
        }
        out.st_tokens = SiteTokens<T>{r.tokens, {}};
        break;
      }
    }
    x = r.x;
    out.traces.push_back(std::move(r.trace));
  }
  out.state = input;
  out.state.visual = lstt_feed_forward(x, params);
  out.state.id = Tensor<T>();
  out.state.layer = input.layer + 1;
  return out;
}

// ---------------------------------------------------------------------------
// Cost model

// Work of one long-term attention stage over T memorized frames.
struct AttentionCost {
  std::uint64_t correlation_macs = 0;  // Q K^T over all heads
  std::uint64_t aggregation_macs = 0;  // Corr * V, per value branch
  std::uint64_t softmax_exps = 0;      // one exponential per (head, query, key)
  std::uint64_t macs() const { return correlation_macs + aggregation_macs; }
};

// heads * T * (HW)^2 * (C_k / heads) correlation MACs, T * (HW)^2 * C_v per
// value branch, heads * T * (HW)^2 softmax exponentials. `branches` is 2 for
// the decoupled module and 1 for the coupled baseline.
inline AttentionCost attention_flops(const PropagationConfig& cfg, std::size_t frames, std::size_t height,
                                     std::size_t width, std::size_t heads, std::size_t branches = 1) {
  if (heads == 0 || cfg.match_dim % heads != 0) throw ConfigError("heads must divide C_k");
  const std::uint64_t hw = static_cast<std::uint64_t>(height) * width;
  const std::uint64_t pairs = frames * hw * hw;
  AttentionCost cost;
  cost.correlation_macs = heads * pairs * (cfg.match_dim / heads);
  cost.aggregation_macs = branches * pairs * cfg.prop_dim;
  cost.softmax_exps = heads * pairs;
  return cost;
}

}  // namespace deaot
