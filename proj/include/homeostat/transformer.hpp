#pragma once

// Post-norm encoder-decoder transformer with homeostatic inserts at two
// sites: on the per-head attention output, and after the residual + norm at
// the end of every encoder and decoder block.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "homeostat/attention.hpp"
#include "homeostat/data.hpp"
#include "homeostat/homeostasis.hpp"
#include "homeostat/layers.hpp"

namespace homeostat {

struct TransformerConfig {
  std::size_t d_model = 32;
  std::size_t heads = 2;
  std::size_t d_ff = 128;
  std::size_t blocks = 2;
  double dropout = 0.0;  // embedding and residual dropout
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  std::size_t max_len = 64;  // longest sequence fed to the model
  HomeostasisConfig attn_insert;
  HomeostasisConfig block_out_insert;
  bool insert_in_cross_attention = true;

  std::size_t head_dim() const { return heads ? d_model / heads : 0; }
  void validate() const;

  // "micro" (32/2/128/2), and the published "small", "base", "big" sizes.
  static TransformerConfig preset(const std::string& name);

  bool operator==(const TransformerConfig&) const = default;
};

class EncoderBlock {
 public:
  EncoderBlock(const std::string& name, const TransformerConfig& cfg, Rng& rng);

  Matrix forward(const Matrix& x, std::size_t batch, std::size_t len,
                 std::span<const std::uint8_t> valid, bool training, Rng& rng);
  Matrix backward(const Matrix& dy);
  void visit(const ParameterVisitor& fn);
  void collect_inserts(const std::string& name,
                       std::vector<std::pair<std::string, InsertLayer*>>& out);

  MultiHeadAttention& self_attention() { return self_attn_; }
  InsertLayer& block_output() { return block_out_; }

 private:
  MultiHeadAttention self_attn_;
  InsertLayer drop_attn_;
  LayerNorm norm_attn_;
  FeedForward ff_;
  InsertLayer drop_ff_;
  LayerNorm norm_ff_;
  InsertLayer block_out_;
};

class DecoderBlock {
 public:
  DecoderBlock(const std::string& name, const TransformerConfig& cfg, Rng& rng);

  Matrix forward(const Matrix& x, const Matrix& memory, std::size_t batch,
                 std::size_t len, std::size_t src_len,
                 std::span<const std::uint8_t> tgt_valid,
                 std::span<const std::uint8_t> src_valid, bool training,
                 Rng& rng);
  struct Gradients {
    Matrix input;
    Matrix memory;
  };
  Gradients backward(const Matrix& dy);
  void visit(const ParameterVisitor& fn);
  void collect_inserts(const std::string& name,
                       std::vector<std::pair<std::string, InsertLayer*>>& out);

  InsertLayer& block_output() { return block_out_; }

 private:
  MultiHeadAttention self_attn_;
  InsertLayer drop_self_;
  LayerNorm norm_self_;
  MultiHeadAttention cross_attn_;
  InsertLayer drop_cross_;
  LayerNorm norm_cross_;
  FeedForward ff_;
  InsertLayer drop_ff_;
  LayerNorm norm_ff_;
  InsertLayer block_out_;
};

struct LossSummary {
  double loss_sum = 0;   // summed token cross-entropy
  std::size_t tokens = 0;
  std::size_t correct = 0;  // argmax hits

  double mean_loss() const { return tokens ? loss_sum / static_cast<double>(tokens) : 0.0; }
  double accuracy() const {
    return tokens ? static_cast<double>(correct) / static_cast<double>(tokens) : 0.0;
  }
  LossSummary& operator+=(const LossSummary& o) {
    loss_sum += o.loss_sum;
    tokens += o.tokens;
    correct += o.correct;
    return *this;
  }
};

class Transformer {
 public:
  // Weights are drawn from a generator seeded with `seed`; the stochastic
  // layers use an independent stream derived from the same seed.
  Transformer(TransformerConfig cfg, std::uint64_t seed);

  const TransformerConfig& config() const { return cfg_; }

  // Parameter count implied by `cfg` without allocating any weights.
  static std::size_t parameter_count(const TransformerConfig& cfg);
  std::size_t num_parameters();

  void visit_parameters(const ParameterVisitor& fn);
  void zero_grad();
  // Every insert layer, named by its position in the network.
  std::vector<std::pair<std::string, InsertLayer*>> inserts();

  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }

  Matrix encode(const Batch& batch, bool training);
  // Logits (B*L_tgt, V) for the teacher-forced targets of `batch`.
  Matrix forward(const Batch& batch, bool training);

  // Training-mode forward, PAD-masked mean cross-entropy and backward pass.
  // Gradients accumulate into the parameters; call zero_grad() first.
  LossSummary forward_backward(const Batch& batch);
  // Eval-mode teacher-forced loss and token accuracy.
  LossSummary evaluate(const Batch& batch);

  // Argmax decoding in eval mode, one sequence per batch row. Stops at EOS
  // (included in the output) or after max_len tokens.
  std::vector<TokenSeq> greedy_decode(const Batch& batch, std::size_t max_len);

 private:
  Transformer(TransformerConfig cfg, std::uint64_t seed, Rng init);

  Matrix embed(Embedding& table, InsertLayer& dropout,
               std::span<const TokenId> ids, std::size_t batch,
               std::size_t len, bool training);
  Matrix decode(std::span<const TokenId> tgt_in, std::size_t batch,
                std::size_t tgt_len, const Matrix& memory,
                std::span<const std::uint8_t> src_valid, std::size_t src_len,
                bool training);
  const Matrix& positions(std::size_t len);

  TransformerConfig cfg_;
  Rng rng_;
  Embedding src_embed_;
  Embedding tgt_embed_;
  InsertLayer src_drop_;
  InsertLayer tgt_drop_;
  std::vector<EncoderBlock> encoder_;
  std::vector<DecoderBlock> decoder_;
  Linear generator_;
  Matrix pe_;

  // Backward-pass state from the last training forward.
  std::size_t src_len_ = 0;
  std::size_t tgt_len_ = 0;
  std::size_t batch_size_ = 0;
};

// Eval-mode logits reshaped to a (B, L_tgt, V) tensor.
Tensor seq2seq_forward(Transformer& model, const Batch& batch);

// Drops everything from the first EOS on.
TokenSeq strip_eos(const TokenSeq& seq);

}  // namespace homeostat
