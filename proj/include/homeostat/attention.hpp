#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "homeostat/homeostasis.hpp"
#include "homeostat/layers.hpp"

namespace homeostat {

// Which keys each query may attend to. `key_valid` holds one byte per
// (batch, key position); an empty span means every key is valid.
struct AttentionMask {
  std::span<const std::uint8_t> key_valid;
  bool causal = false;
};

// softmax(q k^T * scale) over keys for one (batch, head) slice, with masked
// scores at -inf. Throws InvalidInput when a query row has no allowed key.
Matrix attention_probabilities(const Matrix& q, const Matrix& k, Real scale,
                               std::span<const std::uint8_t> key_valid,
                               bool causal);

// Scaled dot-product attention on (B, H, L, D_h) tensors, dividing scores by
// sqrt(D_h). Returns the (B, L_q, H, D_h) attention output.
// `key_valid` is empty or holds B * L_k bytes.
Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        bool causal,
                        std::span<const std::uint8_t> key_valid = {});

// Multi-head attention with a homeostatic insert on the per-head output
// (before head concatenation and the output projection).
class MultiHeadAttention {
 public:
  MultiHeadAttention(const std::string& name, std::size_t dim,
                     std::size_t heads, const HomeostasisConfig& insert,
                     Rng& init_rng);

  // x_q: (B*L_q, D), x_kv: (B*L_k, D).
  Matrix forward(const Matrix& x_q, const Matrix& x_kv, std::size_t batch,
                 std::size_t len_q, std::size_t len_k,
                 const AttentionMask& mask, bool training, Rng& rng);

  struct Gradients {
    Matrix query;
    Matrix key_value;
  };
  Gradients backward(const Matrix& dy);

  void visit(const ParameterVisitor& fn);
  InsertLayer& insert() { return insert_; }
  const InsertLayer& insert() const { return insert_; }
  // Pre-projection head outputs (B*L_q, H*D_h) after the insert.
  const Matrix& head_outputs() const { return heads_out_; }

 private:
  std::size_t dim_;
  std::size_t heads_;
  std::size_t head_dim_;
  Linear query_;
  Linear key_;
  Linear value_;
  Linear output_;
  InsertLayer insert_;

  std::size_t batch_ = 0;
  std::size_t len_q_ = 0;
  std::size_t len_k_ = 0;
  Matrix q_, k_, v_;
  std::vector<Matrix> probs_;  // one per (batch, head)
  Matrix heads_out_;
};

}  // namespace homeostat
