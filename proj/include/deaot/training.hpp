#pragma once

// Loss, Adam, the clip-sampling training loop and finite-difference
// gradient checking.

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "deaot/engine.hpp"
#include "deaot/synthetic.hpp"

namespace deaot {

enum class TeacherMemory { predicted, ground_truth };

struct TrainConfig {
  std::size_t clip_length = 5;  // frames per clip including the reference
  std::size_t batch = 1;        // clips per step
  std::size_t steps = 1000;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double warmup_fraction = 0.1;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  TeacherMemory teacher_memory = TeacherMemory::predicted;

  void validate() const {
    if (clip_length < 2) throw ConfigError("clip_length must be at least 2");
    if (batch == 0) throw ConfigError("batch must be positive");
    if (learning_rate < 0 || weight_decay < 0) throw ConfigError("negative learning rate or weight decay");
  }
};

// Per-pixel labels of a mask as class targets.
inline std::vector<std::size_t> mask_targets(const MaskMap& mask) {
  return {mask.values.begin(), mask.values.end()};
}

// Mean over frames 1..T-1 of the per-pixel cross-entropy; logits[0] (the
// reference frame) is ignored and may be empty.
template <typename T>
Tensor<T> sequence_loss(const std::vector<Tensor<T>>& logits, const std::vector<MaskMap>& masks) {
  if (logits.size() < 2) throw ContractError("sequence_loss needs at least two frames");
  if (logits.size() != masks.size())
    throw DimensionError(std::to_string(logits.size()) + " logit frames for " + std::to_string(masks.size()) +
                         " masks");
  std::vector<Tensor<T>> terms;
  for (std::size_t t = 1; t < logits.size(); ++t) {
    if (logits[t].rows() != masks[t].size()) throw DimensionError("logits do not cover the mask");
    terms.push_back(cross_entropy(logits[t], mask_targets(masks[t])));
  }
  Tensor<T> total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return scale(total, T(1) / static_cast<T>(terms.size()));
}

// Runs one clip through the engine and returns its loss. frames[0] is the
// reference.
template <typename T>
Tensor<T> clip_loss(Engine<T>& engine, const std::vector<const Image*>& frames, const std::vector<MaskMap>& masks,
                    TeacherMemory teacher) {
  engine.reset();
  engine.commit_reference(*frames[0], masks[0]);
  std::vector<Tensor<T>> logits{Tensor<T>()};
  for (std::size_t t = 1; t < frames.size(); ++t) {
    auto out = engine.infer_frame(*frames[t]);
    logits.push_back(out.logits);
    if (t + 1 < frames.size()) {
      if (teacher == TeacherMemory::predicted)
        engine.memorize(argmax_mask(out.logits, frames[t]->height, frames[t]->width, 1));
      else
        engine.memorize(masks[t]);
    }
  }
  return sequence_loss(logits, masks);
}

template <typename T>
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore<T>& store, double lr, double weight_decay = 0.0) {
    auto& entries = store.entries();
    if (m_.empty()) {
      for (auto& e : entries) {
        m_.emplace_back(e.tensor.numel(), 0.0);
        v_.emplace_back(e.tensor.numel(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1 - std::pow(b1_, static_cast<double>(t_)), c2 = 1 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& p = entries[i].tensor;
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      auto g = p.grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        m_[i][j] = b1_ * m_[i][j] + (1 - b1_) * gj;
        v_[i][j] = b2_ * v_[i][j] + (1 - b2_) * gj * gj;
        const double update = (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_) + weight_decay * w[j];
        w[j] = static_cast<T>(w[j] - lr * update);
      }
    }
  }

 private:
  double b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Scales all gradients so their global L2 norm is at most max_norm; returns
// the norm before clipping.
template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  double sq = 0;
  for (auto& e : store.entries())
    if (e.tensor.has_grad())
      for (T g : e.tensor.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& e : store.entries())
      if (e.tensor.has_grad())
        for (T& g : e.tensor.mutable_grad()) g *= factor;
  }
  return norm;
}

template <typename T>
bool all_finite_grad(const Tensor<T>& t) {
  for (T g : t.grad())
    if (!std::isfinite(g)) return false;
  return true;
}

struct TrainResult {
  std::vector<double> losses;  // one per step
  double seconds = 0;
};

// Learning rate with linear warmup over the first warmup_fraction of steps.
inline double scheduled_lr(const TrainConfig& cfg, std::size_t step) {
  const auto warmup = static_cast<std::size_t>(std::max(1.0, std::ceil(cfg.warmup_fraction * static_cast<double>(cfg.steps))));
  return cfg.learning_rate * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));
}

// Trains on clips sampled with replacement: frame 0 of a sequence as the
// reference, followed by clip_length-1 consecutive frames.
template <typename T>
TrainResult train(Engine<T>& engine, const std::vector<Sequence>& data, const TrainConfig& cfg,
                  const std::function<void(std::size_t, double)>& on_step = {}) {
  cfg.validate();
  if (data.empty()) throw ConfigError("no training sequences");
  for (const auto& s : data) {
    if (s.frames.size() < cfg.clip_length) throw ConfigError("sequence shorter than clip_length");
    if (s.masks.size() != s.frames.size()) throw ConfigError("training sequences need a mask for every frame");
  }
  Rng rng(cfg.seed);
  Adam<T> adam;
  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    engine.params().zero_grad();
    double step_loss = 0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& seq = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))];
      const auto last_start = static_cast<std::int64_t>(seq.frames.size() - cfg.clip_length + 1);
      const auto first = static_cast<std::size_t>(rng.uniform_int(1, last_start));
      std::vector<const Image*> frames{&seq.frames[0]};
      std::vector<MaskMap> masks{seq.masks[0]};
      for (std::size_t t = first; t < first + cfg.clip_length - 1; ++t) {
        frames.push_back(&seq.frames[t]);
        masks.push_back(seq.masks[t]);
      }
      auto loss = scale(clip_loss(engine, frames, masks, cfg.teacher_memory), T(1) / static_cast<T>(cfg.batch));
      if (!std::isfinite(loss.item()))
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (clip from frame " +
                           std::to_string(first) + ")");
      backward(loss);
      step_loss += static_cast<double>(loss.item());
    }
    for (auto& e : engine.params().entries())
      if (e.tensor.has_grad() && !all_finite_grad(e.tensor))
        throw NumericError("non-finite gradient in " + e.name + " at step " + std::to_string(step));
    if (cfg.clip_norm > 0) clip_grad_norm(engine.params(), cfg.clip_norm);
    adam.step(engine.params(), scheduled_lr(cfg, step), cfg.weight_decay);
    result.losses.push_back(step_loss);
    if (on_step) on_step(step, step_loss);
  }
  engine.params().zero_grad();
  engine.reset();
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradcheckOptions {
  double step = 1e-4;
  std::size_t max_per_tensor = 64;
  double tolerance = 1e-3;
  double abs_floor = 1e-6;  // denominators below this are clamped
  std::uint64_t seed = 0;
};

struct TensorGradError {
  std::string name;
  double max_rel_error = 0;
  std::size_t checked = 0;
};

struct GradcheckReport {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::vector<TensorGradError> tensors;
  std::vector<std::string> offending;
  bool passed = false;
  double seconds = 0;
};

// Central differences on a random subset of each tensor's entries vs the
// analytic gradient of loss_fn (which must rebuild the graph on every call).
inline GradcheckReport gradcheck(ParamStore<double>& store, const std::function<TensorD()>& loss_fn,
                                 const GradcheckOptions& opt = {}) {
  const auto start = std::chrono::steady_clock::now();
  store.zero_grad();
  auto loss = loss_fn();
  backward(loss);
  Rng rng(opt.seed);
  GradcheckReport report;
  for (auto& e : store.entries()) {
    auto& p = e.tensor;
    const std::size_t n = p.numel();
    std::vector<double> analytic(n, 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    std::vector<std::size_t> picks(n);
    for (std::size_t i = 0; i < n; ++i) picks[i] = i;
    if (n > opt.max_per_tensor) {
      for (std::size_t i = 0; i < opt.max_per_tensor; ++i)
        std::swap(picks[i], picks[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                                           static_cast<std::int64_t>(n) - 1))]);
      picks.resize(opt.max_per_tensor);
    }
    TensorGradError err{e.name, 0.0, picks.size()};
    NoGradGuard no_grad;
    for (auto i : picks) {
      auto w = p.mutable_data();
      const double orig = w[i];
      w[i] = orig + opt.step;
      const double up = loss_fn().item();
      w[i] = orig - opt.step;
      const double down = loss_fn().item();
      w[i] = orig;
      const double numeric = (up - down) / (2 * opt.step);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), opt.abs_floor});
      err.max_rel_error = std::max(err.max_rel_error, std::abs(numeric - analytic[i]) / denom);
    }
    report.checked += err.checked;
    report.max_rel_error = std::max(report.max_rel_error, err.max_rel_error);
    if (err.max_rel_error >= opt.tolerance) report.offending.push_back(e.name);
    report.tensors.push_back(err);
  }
  store.zero_grad();
  report.passed = report.offending.empty();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

struct EngineGradcheckSetup {
  std::size_t image_size = 12;
  std::size_t frames = 2;
  std::size_t objects = 2;
  std::uint64_t seed = 7;
};

// Gradient check of a full engine (double precision) on a short synthetic clip.
inline GradcheckReport gradcheck_engine(EngineConfig cfg, const EngineGradcheckSetup& setup,
                                        const GradcheckOptions& opt = {}) {
  Engine<double> engine(std::move(cfg), setup.seed);
  SyntheticSpec spec;
  spec.seed = setup.seed;
  spec.frames = setup.frames;
  spec.width = spec.height = setup.image_size;
  spec.objects = setup.objects;
  spec.min_size = std::max<std::size_t>(2, setup.image_size / 4);
  spec.max_size = std::max(spec.min_size, setup.image_size / 2);
  spec.max_speed = 1.0;
  spec.noise_cell = std::max<std::size_t>(2, setup.image_size / 3);
  const auto seq = generate_sequence(spec, engine.config().max_objects);
  std::vector<const Image*> frames;
  for (const auto& f : seq.frames) frames.push_back(&f);
  auto loss_fn = [&] { return clip_loss(engine, frames, seq.masks, TeacherMemory::ground_truth); };
  return gradcheck(engine.params(), loss_fn, opt);
}

}  // namespace deaot
