#pragma once

// FIFO cache of per-step activation counts used by the homeostatic layers.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "homeostat/sparsity.hpp"
#include "homeostat/tensor.hpp"

namespace homeostat {

using Count = std::int64_t;

// Per-head, per-feature counts laid out as heads x features.
struct CountMatrix {
  std::size_t heads = 0;
  std::size_t features = 0;
  std::vector<Count> values;

  CountMatrix() = default;
  CountMatrix(std::size_t h, std::size_t f)
      : heads(h), features(f), values(h * f, 0) {}
  CountMatrix(std::size_t h, std::size_t f, std::vector<Count> v);

  std::span<const Count> head(std::size_t h) const {
    return {values.data() + h * features, features};
  }
  std::span<Count> head(std::size_t h) {
    return {values.data() + h * features, features};
  }
  bool operator==(const CountMatrix&) const = default;
};

// Sum over all leading (batch, position) indices of a (..., H, F) binary
// mask. `bits.size()` must be a multiple of heads * features.
CountMatrix reduce_mask(std::span<const std::uint8_t> bits, std::size_t heads,
                        std::size_t features);

// Same reduction for a rank-4 (B, L, H, F) tensor holding 0/1 values.
CountMatrix reduce_mask(const Tensor& mask);
CountMatrix reduce_mask(const SparsityMask& mask);

class StatsCache {
 public:
  StatsCache(std::size_t heads, std::size_t capacity, std::size_t features);

  std::size_t heads() const { return heads_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t features() const { return features_; }
  std::size_t fill() const { return fill_; }
  std::size_t cursor() const { return cursor_; }
  bool empty() const { return fill_ == 0; }

  // Stores one step's counts, evicting the oldest frame once full.
  void push(const CountMatrix& counts);

  // Elementwise sum over the retained frames (zeros when empty).
  const CountMatrix& aggregate() const { return sum_; }

  // Raw ring storage, capacity x heads x features, for serialization.
  const std::vector<Count>& frames() const { return frames_; }

  // Rebuilds a cache from serialized ring storage.
  static StatsCache restore(std::size_t heads, std::size_t capacity,
                            std::size_t features, std::vector<Count> frames,
                            std::size_t cursor, std::size_t fill);

  bool operator==(const StatsCache&) const = default;

 private:
  std::size_t heads_;
  std::size_t capacity_;
  std::size_t features_;
  std::vector<Count> frames_;
  std::size_t cursor_ = 0;
  std::size_t fill_ = 0;
  CountMatrix sum_;
};

}  // namespace homeostat
