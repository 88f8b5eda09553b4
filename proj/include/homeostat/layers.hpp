#pragma once

// Dense building blocks with explicit forward/backward passes. Each layer
// caches what its backward pass needs from the most recent forward call.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "homeostat/random.hpp"
#include "homeostat/tensor.hpp"

namespace homeostat {

using Matrix =
    Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

inline std::span<Real> as_span(Matrix& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
inline std::span<const Real> as_span(const Matrix& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;  // allocated by zero_grad()

  void zero_grad();
  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
};

using ParameterVisitor = std::function<void(Parameter&)>;

// Fills with U(-bound, bound).
void init_uniform(Matrix& m, Real bound, Rng& rng);

// y = x W + b with W of shape (in, out).
class Linear {
 public:
  Linear(std::string name, std::size_t in, std::size_t out, Rng& rng);

  Matrix forward(const Matrix& x);
  // Accumulates parameter gradients and returns dL/dx.
  Matrix backward(const Matrix& dy);
  void visit(const ParameterVisitor& fn);

  std::size_t in() const { return static_cast<std::size_t>(weight_.value.rows()); }
  std::size_t out() const { return static_cast<std::size_t>(weight_.value.cols()); }

 private:
  Parameter weight_;
  Parameter bias_;
  Matrix input_;
};

// Row-wise layer normalization with learned gain and shift.
class LayerNorm {
 public:
  LayerNorm(std::string name, std::size_t dim, Real eps = 1e-5);

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& dy);
  void visit(const ParameterVisitor& fn);

 private:
  Parameter gain_;
  Parameter shift_;
  Real eps_;
  Matrix normalized_;
  RowVector inv_std_;
};

// Linear -> ReLU -> Linear.
class FeedForward {
 public:
  FeedForward(const std::string& name, std::size_t dim, std::size_t hidden,
              Rng& rng);

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& dy);
  void visit(const ParameterVisitor& fn);

 private:
  Linear expand_;
  Linear contract_;
  Matrix hidden_;  // post-activation
};

// Token lookup table of shape (vocab, dim).
class Embedding {
 public:
  Embedding(std::string name, std::size_t vocab, std::size_t dim, Rng& rng);

  Matrix forward(std::span<const std::int32_t> ids);
  void backward(const Matrix& dy);
  void visit(const ParameterVisitor& fn);

  std::size_t vocab() const { return static_cast<std::size_t>(table_.value.rows()); }

 private:
  Parameter table_;
  std::vector<std::int32_t> ids_;
};

// Sinusoidal position table: PE[p, 2i] = sin(p / 10000^(2i/D)),
// PE[p, 2i+1] = cos(same). D must be even.
Matrix positional_encoding(std::size_t length, std::size_t dim);

}  // namespace homeostat
