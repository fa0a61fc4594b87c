#pragma once

// Identification embeddings: masks become per-token bank vectors, and final
// ID features are decoded back to per-slot logits by inner products with the
// same bank.

#include <array>
#include <set>
#include <vector>

#include "deaot/image.hpp"
#include "deaot/nn_ops.hpp"

namespace deaot {

inline constexpr std::size_t kDefaultMaxObjects = 10;

// Row 0 is background; rows 1..max_objects are object slots.
template <typename T>
struct IdBank {
  Tensor<T> vectors;  // [(max_objects + 1) x C_v]

  std::size_t slots() const { return vectors.rows(); }
  std::size_t max_objects() const { return slots() - 1; }
  std::size_t channels() const { return vectors.cols(); }
};

// Majority label of each stride x stride patch. Among tied labels the one
// seen first in raster order wins, which keeps the rule equivariant under
// relabeling.
inline std::vector<std::size_t> downsample_labels(const MaskMap& mask, std::size_t stride) {
  if (stride == 0 || mask.height % stride != 0 || mask.width % stride != 0)
    throw DimensionError("mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " is not divisible by stride " + std::to_string(stride));
  const std::size_t gh = mask.height / stride, gw = mask.width / stride;
  std::vector<std::size_t> labels(gh * gw);
  std::array<std::size_t, 256> votes{};
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      votes.fill(0);
      for (std::size_t y = gy * stride; y < (gy + 1) * stride; ++y)
        for (std::size_t x = gx * stride; x < (gx + 1) * stride; ++x) ++votes[mask.at(y, x)];
      std::size_t best = mask.at(gy * stride, gx * stride);
      for (std::size_t y = gy * stride; y < (gy + 1) * stride; ++y)
        for (std::size_t x = gx * stride; x < (gx + 1) * stride; ++x)
          if (votes[mask.at(y, x)] > votes[best]) best = mask.at(y, x);
      labels[gy * gw + gx] = best;
    }
  return labels;
}

// ID(Y): each feature token takes the bank vector of its patch label.
template <typename T>
Tensor<T> encode_mask(const MaskMap& mask, const IdBank<T>& bank, std::size_t stride) {
  for (auto v : mask.values)
    if (v >= bank.slots())
      throw IdentityError("mask label " + std::to_string(v) + " exceeds the " + std::to_string(bank.slots()) +
                          "-slot identification bank");
  return gather_rows(bank.vectors, downsample_labels(mask, stride));
}

// logit[p][i] = <feature[p], bank[i]> for background and active slots; all
// other slots are -inf.
template <typename T>
Tensor<T> decode_logits(const Tensor<T>& feature, const IdBank<T>& bank, const std::set<std::size_t>& active) {
  std::vector<bool> keep(bank.slots(), false);
  keep[0] = true;
  for (auto id : active) {
    if (id == 0 || id >= bank.slots()) throw IdentityError("active slot " + std::to_string(id) + " out of range");
    keep[id] = true;
  }
  return mask_columns(matmul_nt(feature, bank.vectors), keep);
}

// Per-token argmax (first maximum wins), then nearest upsampling by stride.
template <typename T>
MaskMap argmax_mask(const Tensor<T>& logits, std::size_t height, std::size_t width, std::size_t stride) {
  if (stride == 0 || height % stride != 0 || width % stride != 0)
    throw DimensionError("argmax_mask: size not divisible by stride");
  const std::size_t gh = height / stride, gw = width / stride;
  if (logits.ndim() != 2 || logits.dim(0) != gh * gw)
    throw DimensionError("argmax_mask: " + std::to_string(logits.rows()) + " tokens for a " + std::to_string(gh) +
                         "x" + std::to_string(gw) + " grid");
  const std::size_t c = logits.dim(1);
  if (c > 256) throw IdentityError("argmax_mask: more than 255 object slots");
  MaskMap mask(height, width);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      const T* row = logits.data().data() + (gy * gw + gx) * c;
      std::size_t best = 0;
      for (std::size_t j = 1; j < c; ++j)
        if (row[j] > row[best]) best = j;
      for (std::size_t y = gy * stride; y < (gy + 1) * stride; ++y)
        for (std::size_t x = gx * stride; x < (gx + 1) * stride; ++x) mask.at(y, x) = static_cast<std::uint8_t>(best);
    }
  return mask;
}

}  // namespace deaot
