#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

namespace homeostat {

using Real = double;
using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

// Dense row-major real tensor. The last axis is the contiguous one.
struct Tensor {
  Shape shape;
  std::vector<Real> data;

  Tensor() = default;
  explicit Tensor(Shape s, Real fill = 0.0)
      : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(Shape s, std::vector<Real> values)
      : shape(std::move(s)), data(std::move(values)) {}

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t last_dim() const { return shape.empty() ? 0 : shape.back(); }

  std::span<Real> row(std::size_t r) {
    return {data.data() + r * last_dim(), last_dim()};
  }
  std::span<const Real> row(std::size_t r) const {
    return {data.data() + r * last_dim(), last_dim()};
  }
  std::size_t rows() const {
    return last_dim() == 0 ? 0 : data.size() / last_dim();
  }

  bool operator==(const Tensor&) const = default;
};

}  // namespace homeostat
