#pragma once

// k-winners-take-all selection over the last axis of activation tensors.

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "homeostat/tensor.hpp"

namespace homeostat {

// Fraction of elements kept by a winner-take-all mask, strictly inside (0, 1).
class SparsityCoefficient {
 public:
  explicit SparsityCoefficient(double kept_fraction);

  double value() const { return s_; }

  // Winners per slice of length n: round(s*n), half away from zero,
  // clamped to at least one.
  std::size_t winners(std::size_t n) const;

 private:
  double s_;
};

// Binary mask with the same shape as the tensor it was computed from.
struct SparsityMask {
  Shape shape;
  std::vector<std::uint8_t> bits;

  std::size_t last_dim() const { return shape.empty() ? 0 : shape.back(); }
  bool operator==(const SparsityMask&) const = default;
};

// Writes a 0/1 mask into `out` with ones at the `k` largest entries of `x`.
// Ties go to the lower index. `scratch` is reused between calls to avoid
// reallocating the index buffer. Values must be finite.
void select_top_k(std::span<const Real> x, std::size_t k,
                  std::span<std::uint8_t> out,
                  std::vector<std::uint32_t>& scratch);

SparsityMask kwta_mask(std::span<const Real> x, SparsityCoefficient s);

// Applies kwta_mask independently to every last-axis slice of `x` and returns
// the masked tensor together with the mask.
std::pair<Tensor, SparsityMask> kwta_apply(const Tensor& x,
                                           SparsityCoefficient s);

// Backward pass of x * m with the mask held fixed.
Tensor kwta_gradient(const Tensor& upstream, const SparsityMask& mask);

}  // namespace homeostat
