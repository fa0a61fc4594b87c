#pragma once

// Full network: convolutional encoder stub, L propagation layers (dual-branch
// GPM, or the coupled LSTT baseline), memory management, a small decoder with
// one skip connection, and the frame-by-frame inference loop.

#include <array>
#include <set>
#include <string>
#include <vector>

#include "deaot/id_mechanism.hpp"
#include "deaot/image.hpp"
#include "deaot/propagation.hpp"

namespace deaot {

// Long-term memory policy. T/S/B keep only the first reference frame; L also
// appends every mem_interval-th predicted frame.
enum class MemoryVariant { T, S, B, L };
enum class DecoderInput { concat, id_only };

inline const char* to_string(MemoryVariant v) {
  switch (v) {
    case MemoryVariant::T: return "T";
    case MemoryVariant::S: return "S";
    case MemoryVariant::B: return "B";
    case MemoryVariant::L: return "L";
  }
  return "?";
}

struct EngineConfig {
  std::size_t layers = 2;
  std::size_t channels = 32;
  std::size_t match_dim = 16;
  std::size_t prop_dim = 64;
  std::size_t window = 7;
  std::size_t dw_kernel = 3;
  std::size_t max_objects = kDefaultMaxObjects;
  std::size_t mem_interval = 5;
  MemoryVariant variant = MemoryVariant::S;
  std::size_t heads = 8;  // LSTT baseline only; GPM is single-head
  KeySource self_keys = KeySource::vis_id;
  KeySource ltst_keys = KeySource::vis;
  bool decouple = true;
  std::size_t stride = 4;
  std::vector<PropKind> order = {PropKind::self_prop, PropKind::long_term, PropKind::short_term};
  DecoderInput decoder_input = DecoderInput::concat;
  bool gate = true;

  static EngineConfig desk() { return {}; }

  static EngineConfig full_size() {
    EngineConfig c;
    c.channels = 256;
    c.match_dim = 128;
    c.prop_dim = 512;
    c.window = 15;
    c.dw_kernel = 5;
    c.stride = 16;
    c.layers = 2;
    return c;
  }

  // Layer count and memory policy of the named model sizes.
  void apply_variant(MemoryVariant v) {
    variant = v;
    layers = v == MemoryVariant::T ? 1 : v == MemoryVariant::S ? 2 : 3;
  }

  PropagationConfig propagation() const {
    PropagationConfig p;
    p.channels = channels;
    p.match_dim = match_dim;
    p.prop_dim = prop_dim;
    p.window = window;
    p.dw_kernel = dw_kernel;
    p.heads = decouple ? 1 : heads;
    p.self_keys = self_keys;
    p.ltst_keys = ltst_keys;
    p.gate = gate;
    p.order = order;
    return p;
  }

  void validate() const {
    if (layers == 0) throw ConfigError("layers must be at least 1");
    if (stride != 2 && stride != 4 && stride != 8 && stride != 16)
      throw ConfigError("stride must be 2, 4, 8 or 16, got " + std::to_string(stride));
    if (channels < 2 || channels % 2 != 0) throw ConfigError("channels must be even");
    if (max_objects == 0 || max_objects > 255) throw ConfigError("max_objects must be in [1, 255]");
    if (mem_interval == 0) throw ConfigError("mem_interval must be positive");
    propagation().validate();
  }
};

// Image pixels to tokens [H*W x 3], normalized to roughly zero mean.
template <typename T>
Tensor<T> image_tensor(const Image& image) {
  std::vector<T> data(image.rgb.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = (static_cast<T>(image.rgb[i]) / T(255) - T(0.5)) / T(0.25);
  return Tensor<T>({image.height * image.width, 3}, std::move(data));
}

template <typename T>
struct EncodedFrame {
  Tensor<T> tokens;  // I_1 [(H/s)(W/s) x C]
  Tensor<T> skip;    // stride-2 features [(H/2)(W/2) x C/2]
  Grid grid;         // feature grid at stride s
  Grid skip_grid;
};

template <typename T>
struct FrameOutput {
  std::int64_t frame = 0;
  Tensor<T> logits;  // [H*W x slots], -inf on inactive slots
};

template <typename T>
struct StepResult {
  MaskMap mask;
  Tensor<T> probabilities;  // [H*W x slots]
};

template <typename T>
class Engine {
 public:
  Engine(EngineConfig config, std::uint64_t seed) : cfg_(std::move(config)), prop_(cfg_.propagation()) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t c = cfg_.channels, half = c / 2, ck = 3;
    auto conv = [&](const std::string& name, std::size_t cin, std::size_t cout) {
      return store_.add(name, Tensor<T>::randn({ck, ck, cin, cout}, rng, 1.0 / std::sqrt(double(ck * ck * cin))));
    };
    enc1_ = conv("enc.conv1", 3, half);
    enc2_ = conv("enc.conv2", half, c);
    enc3_ = conv("enc.conv3", c, c);
    enc_ln_gain_ = store_.add("enc.ln.gain", Tensor<T>::ones({c}));
    enc_ln_bias_ = store_.add("enc.ln.bias", Tensor<T>::zeros({c}));
    bank_.vectors = store_.add("id.bank", Tensor<T>::randn({cfg_.max_objects + 1, cfg_.prop_dim}, rng, 1.0));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const auto prefix = "layer" + std::to_string(l);
      if (cfg_.decouple)
        gpm_.push_back(make_gpm_layer_params(store_, prefix, prop_, rng));
      else
        lstt_.push_back(make_lstt_layer_params(store_, prefix, prop_, rng));
    }
    const std::size_t dec_in = cfg_.decouple && cfg_.decoder_input == DecoderInput::concat ? 2 * c : c;
    dec1_ = conv("dec.conv1", dec_in, c);
    dec2_ = conv("dec.conv2", c + half, half);
    dec_proj_ = store_.add("dec.proj", Tensor<T>::randn({half, cfg_.prop_dim}, rng, 0.1 / std::sqrt(double(half))));
    reset();
  }

  const EngineConfig& config() const { return cfg_; }
  const PropagationConfig& propagation_config() const { return prop_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const IdBank<T>& bank() const { return bank_; }
  const std::vector<GpmLayerParams<T>>& gpm_layers() const { return gpm_; }

  // Drops all memory, object state and pending tokens; weights are kept.
  void reset() {
    long_term_.assign(cfg_.layers, MemoryBankLayer<T>{});
    previous_.assign(cfg_.layers, std::nullopt);
    active_.clear();
    pending_.reset();
    next_frame_ = 0;
    traces_.clear();
  }

  const std::set<std::size_t>& active_objects() const { return active_; }
  const MemoryBankLayer<T>& long_term(std::size_t layer) const { return long_term_.at(layer); }
  const std::optional<MemoryFrame<T>>& previous(std::size_t layer) const { return previous_.at(layer); }
  std::int64_t next_frame() const { return next_frame_; }

  void set_trace(bool on) { trace_ = on; }
  // Per layer, the site traces of the most recent forward pass.
  const std::vector<std::vector<SiteTrace<T>>>& last_trace() const { return traces_; }

  EncodedFrame<T> encode(const Image& image) const {
    const std::size_t s = cfg_.stride;
    if (image.height % s != 0 || image.width % s != 0)
      throw DimensionError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                           " is not divisible by stride " + std::to_string(s));
    const Grid full{image.height, image.width};
    EncodedFrame<T> e;
    e.skip_grid = {full.h / 2, full.w / 2};
    e.grid = {full.h / s, full.w / s};
    e.skip = silu(conv2d(image_tensor<T>(image), enc1_, full, 2));
    auto h = silu(conv2d(e.skip, enc2_, e.skip_grid, s / 2));
    e.tokens = layer_norm(conv2d(h, enc3_, e.grid), enc_ln_gain_, enc_ln_bias_);
    return e;
  }

  // Final propagation state to stride-2 ID features [(H/2)(W/2) x C_v].
  Tensor<T> decode(const BranchState<T>& final_state, const EncodedFrame<T>& enc) const {
    Tensor<T> input;
    if (!cfg_.decouple)
      input = final_state.visual;
    else if (cfg_.decoder_input == DecoderInput::concat)
      input = concat_channels(final_state.visual, final_state.id);
    else
      input = final_state.id;
    if (input.rows() != enc.grid.tokens()) throw DimensionError("decode: final state does not match encoder grid");
    auto h = silu(conv2d(input, dec1_, enc.grid));
    h = upsample_nearest(h, enc.grid, cfg_.stride / 2);
    h = silu(conv2d(concat_channels(h, enc.skip), dec2_, enc.skip_grid));
    return matmul(h, dec_proj_);
  }

  // Annotated frame: runs the layers with the frame as its own memory and
  // seeds long- and short-term memory with the ground-truth encoding.
  void commit_reference(const Image& image, const MaskMap& mask) {
    check_mask(image, mask);
    for (auto v : mask.values)
      if (v > cfg_.max_objects)
        throw IdentityError("mask label " + std::to_string(v) + " exceeds max_objects " +
                            std::to_string(cfg_.max_objects));
    for (auto v : mask.values)
      if (v != 0) active_.insert(v);
    const auto enc = encode(image);
    const auto id_emb = encode_mask(mask, bank_, cfg_.stride);
    const std::int64_t frame = next_frame_++;
    auto state = initial_state(enc, frame);
    if (trace_) traces_.clear();
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      LayerContext<T> ctx;
      ctx.grid = enc.grid;
      ctx.reference_id = &id_emb;
      auto out = cfg_.decouple ? gpm_forward(state, gpm_[l], prop_, ctx) : lstt_forward(state, lstt_[l], prop_, ctx);
      if (out.lt_frame) long_term_[l].append(std::move(*out.lt_frame));
      if (out.st_frame) previous_[l] = std::move(*out.st_frame);
      if (trace_) traces_.push_back(std::move(out.traces));
      state = out.state;
    }
    pending_.reset();
  }

  // Predicts logits for the next frame from the current memory. The frame's
  // per-layer site tokens are kept until memorize().
  FrameOutput<T> infer_frame(const Image& image) {
    if (long_term_.front().empty()) throw ContractError("no reference frame has been committed");
    const auto enc = encode(image);
    const std::int64_t frame = next_frame_++;
    auto state = initial_state(enc, frame);
    Pending pending;
    pending.frame = frame;
    pending.grid = enc.grid;
    if (trace_) traces_.clear();
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      LayerContext<T> ctx;
      ctx.grid = enc.grid;
      ctx.memory = &long_term_[l];
      ctx.previous = previous_[l] ? &*previous_[l] : nullptr;
      auto out = cfg_.decouple ? gpm_forward(state, gpm_[l], prop_, ctx) : lstt_forward(state, lstt_[l], prop_, ctx);
      pending.lt_tokens.push_back(out.lt_tokens);
      pending.st_tokens.push_back(out.st_tokens);
      if (trace_) traces_.push_back(std::move(out.traces));
      state = out.state;
    }
    pending_ = std::move(pending);
    auto feature = decode(state, enc);
    auto logits = upsample_nearest(decode_logits(feature, bank_, active_), enc.skip_grid, 2);
    return {frame, logits};
  }

  // Commits the pending frame with `mask` (prediction or teacher mask):
  // always refreshes the short-term snapshot; appends to long-term memory
  // when the policy says so.
  void memorize(const MaskMap& mask) {
    if (!pending_) throw ContractError("memorize() without a preceding infer_frame()");
    for (auto v : mask.values)
      if (v > cfg_.max_objects) throw IdentityError("mask label " + std::to_string(v) + " out of range");
    const auto id_emb = encode_mask(mask, bank_, cfg_.stride);
    const bool to_long_term = commits_long_term(pending_->frame);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      if (pending_->st_tokens[l]) previous_[l] = make_frame(l, PropKind::short_term, *pending_->st_tokens[l], id_emb);
      if (to_long_term && pending_->lt_tokens[l])
        long_term_[l].append(make_frame(l, PropKind::long_term, *pending_->lt_tokens[l], id_emb));
    }
    pending_.reset();
  }

  bool commits_long_term(std::int64_t frame) const {
    return cfg_.variant == MemoryVariant::L && frame % static_cast<std::int64_t>(cfg_.mem_interval) == 0;
  }

  // Inference on one frame: predict, take the argmax mask, memorize it.
  StepResult<T> step(const Image& image) {
    NoGradGuard no_grad;
    auto out = infer_frame(image);
    StepResult<T> r;
    r.mask = argmax_mask(out.logits, image.height, image.width, 1);
    r.probabilities = softmax_rows(out.logits);
    memorize(r.mask);
    return r;
  }

 private:
  struct Pending {
    std::int64_t frame = 0;
    Grid grid;
    std::vector<std::optional<SiteTokens<T>>> lt_tokens, st_tokens;
  };

  void check_mask(const Image& image, const MaskMap& mask) const {
    if (mask.height != image.height || mask.width != image.width)
      throw DimensionError("mask size does not match frame size");
  }

  BranchState<T> initial_state(const EncodedFrame<T>& enc, std::int64_t frame) const {
    BranchState<T> s;
    s.visual = enc.tokens;
    if (cfg_.decouple) s.id = Tensor<T>::zeros({enc.grid.tokens(), cfg_.channels});
    s.layer = 0;
    s.frame = frame;
    return s;
  }

  MemoryFrame<T> make_frame(std::size_t layer, PropKind kind, const SiteTokens<T>& tokens,
                            const Tensor<T>& id_emb) const {
    if (cfg_.decouple) return make_memory_frame(gpm_[layer].of(kind), prop_, tokens, id_emb, pending_->frame);
    return make_coupled_memory_frame(lstt_[layer].of(kind), tokens.visual, id_emb, pending_->frame);
  }

  EngineConfig cfg_;
  PropagationConfig prop_;
  ParamStore<T> store_;
  Tensor<T> enc1_, enc2_, enc3_, enc_ln_gain_, enc_ln_bias_;
  Tensor<T> dec1_, dec2_, dec_proj_;
  IdBank<T> bank_;
  std::vector<GpmLayerParams<T>> gpm_;
  std::vector<LsttLayerParams<T>> lstt_;

  std::vector<MemoryBankLayer<T>> long_term_;
  std::vector<std::optional<MemoryFrame<T>>> previous_;
  std::set<std::size_t> active_;
  std::optional<Pending> pending_;
  std::int64_t next_frame_ = 0;
  bool trace_ = false;
  std::vector<std::vector<SiteTrace<T>>> traces_;
};

}  // namespace deaot
