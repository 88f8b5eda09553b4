#include "homeostat/stats_cache.hpp"

#include <algorithm>
#include <string>

#include "homeostat/errors.hpp"

namespace homeostat {

CountMatrix::CountMatrix(std::size_t h, std::size_t f, std::vector<Count> v)
    : heads(h), features(f), values(std::move(v)) {
  if (values.size() != h * f) {
    throw InvalidInput("count matrix: expected " + std::to_string(h * f) +
                       " values, got " + std::to_string(values.size()));
  }
}

CountMatrix reduce_mask(std::span<const std::uint8_t> bits, std::size_t heads,
                        std::size_t features) {
  const std::size_t frame = heads * features;
  if (frame == 0 || bits.size() % frame != 0) {
    throw InvalidInput("reduce_mask: mask size is not a multiple of H*F");
  }
  CountMatrix counts(heads, features);
  for (std::size_t base = 0; base < bits.size(); base += frame) {
    for (std::size_t i = 0; i < frame; ++i) {
      const auto b = bits[base + i];
      if (b > 1) throw InvalidInput("reduce_mask: mask is not binary");
      counts.values[i] += b;
    }
  }
  return counts;
}

CountMatrix reduce_mask(const Tensor& mask) {
  if (mask.rank() != 4) {
    throw InvalidInput("reduce_mask: expected a (B, L, H, F) tensor");
  }
  std::vector<std::uint8_t> bits(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const Real v = mask.data[i];
    if (v != 0.0 && v != 1.0) {
      throw InvalidInput("reduce_mask: mask is not binary");
    }
    bits[i] = v == 1.0 ? 1 : 0;
  }
  return reduce_mask(bits, mask.shape[2], mask.shape[3]);
}

CountMatrix reduce_mask(const SparsityMask& mask) {
  if (mask.shape.size() != 4) {
    throw InvalidInput("reduce_mask: expected a (B, L, H, F) mask");
  }
  return reduce_mask(mask.bits, mask.shape[2], mask.shape[3]);
}

StatsCache::StatsCache(std::size_t heads, std::size_t capacity,
                       std::size_t features)
    : heads_(heads),
      capacity_(capacity),
      features_(features),
      frames_(heads * capacity * features, 0),
      sum_(heads, features) {
  if (heads == 0 || capacity == 0 || features == 0) {
    throw InvalidInput("stats cache: heads, capacity and features must be >= 1");
  }
}

void StatsCache::push(const CountMatrix& counts) {
  if (counts.heads != heads_ || counts.features != features_) {
    throw InvalidInput("stats cache: pushed counts have shape (" +
                       std::to_string(counts.heads) + ", " +
                       std::to_string(counts.features) + "), cache expects (" +
                       std::to_string(heads_) + ", " +
                       std::to_string(features_) + ")");
  }
  const std::size_t frame = heads_ * features_;
  Count* slot = frames_.data() + cursor_ * frame;
  for (std::size_t i = 0; i < frame; ++i) {
    if (counts.values[i] < 0) {
      throw InvalidInput("stats cache: negative activation count");
    }
    // Slots that were never written hold zeros, so subtracting is exact.
    sum_.values[i] += counts.values[i] - slot[i];
    slot[i] = counts.values[i];
  }
  cursor_ = (cursor_ + 1) % capacity_;
  fill_ = std::min(fill_ + 1, capacity_);
}

StatsCache StatsCache::restore(std::size_t heads, std::size_t capacity,
                               std::size_t features, std::vector<Count> frames,
                               std::size_t cursor, std::size_t fill) {
  StatsCache cache(heads, capacity, features);
  if (frames.size() != cache.frames_.size() || cursor >= capacity ||
      fill > capacity || (fill < capacity && cursor != fill) ||
      std::any_of(frames.begin(), frames.end(), [](Count c) { return c < 0; })) {
    throw InvalidInput("stats cache: inconsistent serialized state");
  }
  cache.frames_ = std::move(frames);
  cache.cursor_ = cursor;
  cache.fill_ = fill;
  const std::size_t frame = heads * features;
  for (std::size_t q = 0; q < capacity; ++q) {
    for (std::size_t i = 0; i < frame; ++i) {
      cache.sum_.values[i] += cache.frames_[q * frame + i];
    }
  }
  return cache;
}

}  // namespace homeostat
