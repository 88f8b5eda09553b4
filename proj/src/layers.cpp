#include "homeostat/layers.hpp"

#include <cmath>

#include "homeostat/errors.hpp"

namespace homeostat {

void Parameter::zero_grad() {
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
    grad.resize(value.rows(), value.cols());
  }
  grad.setZero();
}

void init_uniform(Matrix& m, Real bound, Rng& rng) {
  Real* p = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) p[i] = rng.uniform(-bound, bound);
}

Linear::Linear(std::string name, std::size_t in, std::size_t out, Rng& rng)
    : weight_{name + ".weight", Matrix(in, out), {}},
      bias_{name + ".bias", Matrix::Zero(1, out), {}} {
  init_uniform(weight_.value, 1.0 / std::sqrt(static_cast<Real>(in)), rng);
}

Matrix Linear::forward(const Matrix& x) {
  input_ = x;
  Matrix y = x * weight_.value;
  y.rowwise() += bias_.value.row(0);
  return y;
}

Matrix Linear::backward(const Matrix& dy) {
  weight_.grad.noalias() += input_.transpose() * dy;
  bias_.grad.row(0) += dy.colwise().sum();
  return dy * weight_.value.transpose();
}

void Linear::visit(const ParameterVisitor& fn) {
  fn(weight_);
  fn(bias_);
}

LayerNorm::LayerNorm(std::string name, std::size_t dim, Real eps)
    : gain_{name + ".gain", Matrix::Ones(1, dim), {}},
      shift_{name + ".shift", Matrix::Zero(1, dim), {}},
      eps_(eps) {}

Matrix LayerNorm::forward(const Matrix& x) {
  const auto n = x.cols();
  normalized_.resize(x.rows(), n);
  inv_std_.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).matrix();
    const Real var = centered.squaredNorm() / static_cast<Real>(n);
    const Real inv = 1.0 / std::sqrt(var + eps_);
    inv_std_(r) = inv;
    normalized_.row(r) = centered * inv;
  }
  Matrix y = normalized_.array().rowwise() * gain_.value.row(0).array();
  y.rowwise() += shift_.value.row(0);
  return y;
}

Matrix LayerNorm::backward(const Matrix& dy) {
  gain_.grad.row(0) += (dy.array() * normalized_.array()).colwise().sum().matrix();
  shift_.grad.row(0) += dy.colwise().sum();
  const Matrix dnorm = dy.array().rowwise() * gain_.value.row(0).array();
  const auto n = static_cast<Real>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Real sum = dnorm.row(r).sum();
    const Real dot = dnorm.row(r).dot(normalized_.row(r));
    dx.row(r) = (inv_std_(r) / n) *
                (n * dnorm.row(r).array() - sum -
                 normalized_.row(r).array() * dot)
                    .matrix();
  }
  return dx;
}

void LayerNorm::visit(const ParameterVisitor& fn) {
  fn(gain_);
  fn(shift_);
}

FeedForward::FeedForward(const std::string& name, std::size_t dim,
                         std::size_t hidden, Rng& rng)
    : expand_(name + ".expand", dim, hidden, rng),
      contract_(name + ".contract", hidden, dim, rng) {}

Matrix FeedForward::forward(const Matrix& x) {
  hidden_ = expand_.forward(x).cwiseMax(0.0);
  return contract_.forward(hidden_);
}

Matrix FeedForward::backward(const Matrix& dy) {
  Matrix dh = contract_.backward(dy);
  dh.array() *= (hidden_.array() > 0.0).cast<Real>();
  return expand_.backward(dh);
}

void FeedForward::visit(const ParameterVisitor& fn) {
  expand_.visit(fn);
  contract_.visit(fn);
}

Embedding::Embedding(std::string name, std::size_t vocab, std::size_t dim,
                     Rng& rng)
    : table_{std::move(name), Matrix(vocab, dim), {}} {
  init_uniform(table_.value, 1.0 / std::sqrt(static_cast<Real>(dim)), rng);
}

Matrix Embedding::forward(std::span<const std::int32_t> ids) {
  const auto vocab = static_cast<std::int32_t>(table_.value.rows());
  Matrix out(static_cast<Eigen::Index>(ids.size()), table_.value.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw InvalidInput("embedding: token id " + std::to_string(ids[i]) +
                         " outside vocabulary of size " +
                         std::to_string(vocab));
    }
    out.row(static_cast<Eigen::Index>(i)) = table_.value.row(ids[i]);
  }
  ids_.assign(ids.begin(), ids.end());
  return out;
}

void Embedding::backward(const Matrix& dy) {
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    table_.grad.row(ids_[i]) += dy.row(static_cast<Eigen::Index>(i));
  }
}

void Embedding::visit(const ParameterVisitor& fn) { fn(table_); }

Matrix positional_encoding(std::size_t length, std::size_t dim) {
  if (length == 0 || dim == 0) {
    throw InvalidInput("positional_encoding: length and width must be >= 1");
  }
  if (dim % 2 != 0) {
    throw InvalidInput("positional_encoding: width must be even");
  }
  Matrix pe(length, dim);
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const Real angle =
          static_cast<Real>(p) /
          std::pow(10000.0, static_cast<Real>(i) / static_cast<Real>(dim));
      pe(p, i) = std::sin(angle);
      pe(p, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

}  // namespace homeostat
