#include "homeostat/attention.hpp"

#include <cmath>
#include <limits>

#include "homeostat/errors.hpp"

namespace homeostat {

Matrix attention_probabilities(const Matrix& q, const Matrix& k, Real scale,
                               std::span<const std::uint8_t> key_valid,
                               bool causal) {
  Matrix scores = (q * k.transpose()) * scale;
  const Eigen::Index len_q = scores.rows();
  const Eigen::Index len_k = scores.cols();
  for (Eigen::Index i = 0; i < len_q; ++i) {
    Real peak = -std::numeric_limits<Real>::infinity();
    for (Eigen::Index j = 0; j < len_k; ++j) {
      const bool allowed =
          (key_valid.empty() || key_valid[static_cast<std::size_t>(j)]) &&
          (!causal || j <= i);
      if (!allowed) {
        scores(i, j) = -std::numeric_limits<Real>::infinity();
      } else {
        peak = std::max(peak, scores(i, j));
      }
    }
    if (peak == -std::numeric_limits<Real>::infinity()) {
      throw InvalidInput("attention: query row has every key masked");
    }
    Real total = 0;
    for (Eigen::Index j = 0; j < len_k; ++j) {
      const Real e = std::exp(scores(i, j) - peak);
      scores(i, j) = e;
      total += e;
    }
    scores.row(i) /= total;
  }
  return scores;
}

Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        bool causal, std::span<const std::uint8_t> key_valid) {
  if (q.rank() != 4 || k.rank() != 4 || v.rank() != 4 || k.shape != v.shape ||
      q.shape[0] != k.shape[0] || q.shape[1] != k.shape[1] ||
      q.shape[3] != k.shape[3]) {
    throw InvalidInput("scaled_attention: expected consistent (B, H, L, D_h) tensors");
  }
  const std::size_t batch = q.shape[0], heads = q.shape[1];
  const std::size_t len_q = q.shape[2], len_k = k.shape[2];
  const std::size_t head_dim = q.shape[3];
  if (!key_valid.empty() && key_valid.size() != batch * len_k) {
    throw InvalidInput("scaled_attention: key mask must hold B * L_k entries");
  }
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(head_dim));
  Tensor out({batch, len_q, heads, head_dim});
  auto slice = [](const Tensor& t, std::size_t b, std::size_t h) {
    const std::size_t len = t.shape[2], d = t.shape[3];
    const Real* base = t.data.data() + ((b * t.shape[1] + h) * len) * d;
    return Matrix(Eigen::Map<const Matrix>(base, static_cast<Eigen::Index>(len),
                                           static_cast<Eigen::Index>(d)));
  };
  for (std::size_t b = 0; b < batch; ++b) {
    const auto valid = key_valid.empty()
                           ? std::span<const std::uint8_t>{}
                           : key_valid.subspan(b * len_k, len_k);
    for (std::size_t h = 0; h < heads; ++h) {
      const Matrix probs =
          attention_probabilities(slice(q, b, h), slice(k, b, h), scale, valid,
                                  causal);
      const Matrix o = probs * slice(v, b, h);
      for (std::size_t i = 0; i < len_q; ++i) {
        for (std::size_t d = 0; d < head_dim; ++d) {
          out.data[((b * len_q + i) * heads + h) * head_dim + d] =
              o(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d));
        }
      }
    }
  }
  return out;
}

MultiHeadAttention::MultiHeadAttention(const std::string& name, std::size_t dim,
                                       std::size_t heads,
                                       const HomeostasisConfig& insert,
                                       Rng& init_rng)
    : dim_(dim),
      heads_(heads),
      head_dim_(dim / heads),
      query_(name + ".query", dim, dim, init_rng),
      key_(name + ".key", dim, dim, init_rng),
      value_(name + ".value", dim, dim, init_rng),
      output_(name + ".output", dim, dim, init_rng),
      insert_(insert, heads, dim / heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention: model width must be divisible by heads");
  }
}

Matrix MultiHeadAttention::forward(const Matrix& x_q, const Matrix& x_kv,
                                   std::size_t batch, std::size_t len_q,
                                   std::size_t len_k, const AttentionMask& mask,
                                   bool training, Rng& rng) {
  batch_ = batch;
  len_q_ = len_q;
  len_k_ = len_k;
  q_ = query_.forward(x_q);
  k_ = key_.forward(x_kv);
  v_ = value_.forward(x_kv);
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(head_dim_));
  const auto hd = static_cast<Eigen::Index>(head_dim_);
  const auto lq = static_cast<Eigen::Index>(len_q);
  const auto lk = static_cast<Eigen::Index>(len_k);

  probs_.resize(batch * heads_);
  heads_out_.resize(x_q.rows(), static_cast<Eigen::Index>(dim_));
  for (std::size_t b = 0; b < batch; ++b) {
    const auto valid = mask.key_valid.empty()
                           ? std::span<const std::uint8_t>{}
                           : mask.key_valid.subspan(b * len_k, len_k);
    const auto rq = static_cast<Eigen::Index>(b * len_q);
    const auto rk = static_cast<Eigen::Index>(b * len_k);
    for (std::size_t h = 0; h < heads_; ++h) {
      const auto c = static_cast<Eigen::Index>(h * head_dim_);
      Matrix& probs = probs_[b * heads_ + h];
      probs = attention_probabilities(q_.block(rq, c, lq, hd),
                                      k_.block(rk, c, lk, hd), scale, valid,
                                      mask.causal);
      heads_out_.block(rq, c, lq, hd).noalias() =
          probs * v_.block(rk, c, lk, hd);
    }
  }
  insert_.forward(as_span(heads_out_), training, rng);
  return output_.forward(heads_out_);
}

MultiHeadAttention::Gradients MultiHeadAttention::backward(const Matrix& dy) {
  Matrix d_heads = output_.backward(dy);
  insert_.backward(as_span(d_heads));

  const Real scale = 1.0 / std::sqrt(static_cast<Real>(head_dim_));
  const auto hd = static_cast<Eigen::Index>(head_dim_);
  const auto lq = static_cast<Eigen::Index>(len_q_);
  const auto lk = static_cast<Eigen::Index>(len_k_);
  Matrix dq = Matrix::Zero(q_.rows(), q_.cols());
  Matrix dk = Matrix::Zero(k_.rows(), k_.cols());
  Matrix dv = Matrix::Zero(v_.rows(), v_.cols());
  for (std::size_t b = 0; b < batch_; ++b) {
    const auto rq = static_cast<Eigen::Index>(b * len_q_);
    const auto rk = static_cast<Eigen::Index>(b * len_k_);
    for (std::size_t h = 0; h < heads_; ++h) {
      const auto c = static_cast<Eigen::Index>(h * head_dim_);
      const Matrix& probs = probs_[b * heads_ + h];
      const Matrix d_out = d_heads.block(rq, c, lq, hd);
      const Matrix d_probs = d_out * v_.block(rk, c, lk, hd).transpose();
      dv.block(rk, c, lk, hd).noalias() += probs.transpose() * d_out;
      // Softmax Jacobian: dS = P * (dP - rowsum(dP * P)).
      const auto row_dot = (d_probs.array() * probs.array()).rowwise().sum();
      Matrix d_scores =
          (probs.array() * (d_probs.array().colwise() - row_dot)).matrix() *
          scale;
      dq.block(rq, c, lq, hd).noalias() += d_scores * k_.block(rk, c, lk, hd);
      dk.block(rk, c, lk, hd).noalias() +=
          d_scores.transpose() * q_.block(rq, c, lq, hd);
    }
  }
  Gradients grads;
  grads.query = query_.backward(dq);
  grads.key_value = key_.backward(dk);
  grads.key_value += value_.backward(dv);
  return grads;
}

void MultiHeadAttention::visit(const ParameterVisitor& fn) {
  query_.visit(fn);
  key_.visit(fn);
  value_.visit(fn);
  output_.visit(fn);
}

}  // namespace homeostat
