#include "homeostat/transformer.hpp"

#include <cmath>
#include <limits>

#include "homeostat/errors.hpp"

namespace homeostat {

namespace {

HomeostasisConfig residual_dropout(double p) {
  HomeostasisConfig cfg;
  cfg.mechanism = p > 0.0 ? Mechanism::dropout : Mechanism::none;
  cfg.dropout_p = p;
  return cfg;
}

HomeostasisConfig cross_insert(const TransformerConfig& cfg) {
  if (cfg.insert_in_cross_attention) return cfg.attn_insert;
  HomeostasisConfig none = cfg.attn_insert;
  none.mechanism = Mechanism::none;
  return none;
}

std::vector<std::uint8_t> valid_tokens(std::span<const TokenId> ids) {
  std::vector<std::uint8_t> valid(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) valid[i] = ids[i] != kPad;
  return valid;
}

const TransformerConfig& validated(const TransformerConfig& cfg) {
  cfg.validate();
  return cfg;
}

}  // namespace

void TransformerConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("model." + key + ": " + why);
  };
  if (d_model == 0) fail("d_model", "must be >= 1");
  if (heads == 0 || d_model % heads != 0) {
    fail("heads", "d_model must be divisible by heads");
  }
  if (d_model % 2 != 0) fail("d_model", "must be even for the position table");
  if (d_ff == 0) fail("d_ff", "must be >= 1");
  if (blocks == 0) fail("blocks", "must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout", "must lie in [0, 1)");
  if (src_vocab <= kReservedTokens) fail("src_vocab", "must exceed the 4 reserved ids");
  if (tgt_vocab <= kReservedTokens) fail("tgt_vocab", "must exceed the 4 reserved ids");
  if (max_len == 0) fail("max_len", "must be >= 1");
  attn_insert.validate("attn_insert.");
  block_out_insert.validate("block_out_insert.");
  if (attn_insert.mechanism == Mechanism::rfb_kwta && head_dim() < 2) {
    fail("attn_insert", "rfb_kwta needs a head width >= 2");
  }
}

TransformerConfig TransformerConfig::preset(const std::string& name) {
  TransformerConfig cfg;
  if (name == "micro") {
    cfg.dropout = 0.0;
    return cfg;
  }
  cfg.dropout = 0.1;
  cfg.src_vocab = 16000;
  cfg.tgt_vocab = 16000;
  cfg.max_len = 128;
  cfg.blocks = 6;
  if (name == "small") {
    cfg.d_model = 256, cfg.heads = 4, cfg.d_ff = 1024;
  } else if (name == "base") {
    cfg.d_model = 512, cfg.heads = 8, cfg.d_ff = 2048;
  } else if (name == "big") {
    cfg.d_model = 1024, cfg.heads = 16, cfg.d_ff = 4096;
  } else {
    throw ConfigError("model.preset: unknown preset '" + name + "'");
  }
  return cfg;
}

EncoderBlock::EncoderBlock(const std::string& name, const TransformerConfig& cfg,
                           Rng& rng)
    : self_attn_(name + ".self_attn", cfg.d_model, cfg.heads, cfg.attn_insert, rng),
      drop_attn_(residual_dropout(cfg.dropout), 1, cfg.d_model),
      norm_attn_(name + ".norm_attn", cfg.d_model),
      ff_(name + ".ff", cfg.d_model, cfg.d_ff, rng),
      drop_ff_(residual_dropout(cfg.dropout), 1, cfg.d_model),
      norm_ff_(name + ".norm_ff", cfg.d_model),
      block_out_(cfg.block_out_insert, 1, cfg.d_model) {}

Matrix EncoderBlock::forward(const Matrix& x, std::size_t batch,
                             std::size_t len,
                             std::span<const std::uint8_t> valid, bool training,
                             Rng& rng) {
  Matrix a = self_attn_.forward(x, x, batch, len, len, {valid, false}, training, rng);
  drop_attn_.forward(as_span(a), training, rng);
  const Matrix h = norm_attn_.forward(x + a);
  Matrix f = ff_.forward(h);
  drop_ff_.forward(as_span(f), training, rng);
  Matrix out = norm_ff_.forward(h + f);
  block_out_.forward(as_span(out), training, rng);
  return out;
}

Matrix EncoderBlock::backward(const Matrix& dy) {
  Matrix d = dy;
  block_out_.backward(as_span(d));
  const Matrix d_res2 = norm_ff_.backward(d);
  Matrix d_f = d_res2;
  drop_ff_.backward(as_span(d_f));
  const Matrix d_h = d_res2 + ff_.backward(d_f);
  const Matrix d_res1 = norm_attn_.backward(d_h);
  Matrix d_a = d_res1;
  drop_attn_.backward(as_span(d_a));
  auto g = self_attn_.backward(d_a);
  return d_res1 + g.query + g.key_value;
}

void EncoderBlock::visit(const ParameterVisitor& fn) {
  self_attn_.visit(fn);
  norm_attn_.visit(fn);
  ff_.visit(fn);
  norm_ff_.visit(fn);
}

void EncoderBlock::collect_inserts(
    const std::string& name,
    std::vector<std::pair<std::string, InsertLayer*>>& out) {
  out.emplace_back(name + ".self_attn.insert", &self_attn_.insert());
  out.emplace_back(name + ".block_out", &block_out_);
}

DecoderBlock::DecoderBlock(const std::string& name, const TransformerConfig& cfg,
                           Rng& rng)
    : self_attn_(name + ".self_attn", cfg.d_model, cfg.heads, cfg.attn_insert, rng),
      drop_self_(residual_dropout(cfg.dropout), 1, cfg.d_model),
      norm_self_(name + ".norm_self", cfg.d_model),
      cross_attn_(name + ".cross_attn", cfg.d_model, cfg.heads,
                  cross_insert(cfg), rng),
      drop_cross_(residual_dropout(cfg.dropout), 1, cfg.d_model),
      norm_cross_(name + ".norm_cross", cfg.d_model),
      ff_(name + ".ff", cfg.d_model, cfg.d_ff, rng),
      drop_ff_(residual_dropout(cfg.dropout), 1, cfg.d_model),
      norm_ff_(name + ".norm_ff", cfg.d_model),
      block_out_(cfg.block_out_insert, 1, cfg.d_model) {}

Matrix DecoderBlock::forward(const Matrix& x, const Matrix& memory,
                             std::size_t batch, std::size_t len,
                             std::size_t src_len,
                             std::span<const std::uint8_t> tgt_valid,
                             std::span<const std::uint8_t> src_valid,
                             bool training, Rng& rng) {
  Matrix a = self_attn_.forward(x, x, batch, len, len, {tgt_valid, true},
                                training, rng);
  drop_self_.forward(as_span(a), training, rng);
  const Matrix h1 = norm_self_.forward(x + a);
  Matrix c = cross_attn_.forward(h1, memory, batch, len, src_len,
                                 {src_valid, false}, training, rng);
  drop_cross_.forward(as_span(c), training, rng);
  const Matrix h2 = norm_cross_.forward(h1 + c);
  Matrix f = ff_.forward(h2);
  drop_ff_.forward(as_span(f), training, rng);
  Matrix out = norm_ff_.forward(h2 + f);
  block_out_.forward(as_span(out), training, rng);
  return out;
}

DecoderBlock::Gradients DecoderBlock::backward(const Matrix& dy) {
  Matrix d = dy;
  block_out_.backward(as_span(d));
  const Matrix d_res3 = norm_ff_.backward(d);
  Matrix d_f = d_res3;
  drop_ff_.backward(as_span(d_f));
  const Matrix d_h2 = d_res3 + ff_.backward(d_f);
  const Matrix d_res2 = norm_cross_.backward(d_h2);
  Matrix d_c = d_res2;
  drop_cross_.backward(as_span(d_c));
  auto gc = cross_attn_.backward(d_c);
  const Matrix d_h1 = d_res2 + gc.query;
  const Matrix d_res1 = norm_self_.backward(d_h1);
  Matrix d_a = d_res1;
  drop_self_.backward(as_span(d_a));
  auto gs = self_attn_.backward(d_a);
  return {d_res1 + gs.query + gs.key_value, std::move(gc.key_value)};
}

void DecoderBlock::visit(const ParameterVisitor& fn) {
  self_attn_.visit(fn);
  norm_self_.visit(fn);
  cross_attn_.visit(fn);
  norm_cross_.visit(fn);
  ff_.visit(fn);
  norm_ff_.visit(fn);
}

void DecoderBlock::collect_inserts(
    const std::string& name,
    std::vector<std::pair<std::string, InsertLayer*>>& out) {
  out.emplace_back(name + ".self_attn.insert", &self_attn_.insert());
  out.emplace_back(name + ".cross_attn.insert", &cross_attn_.insert());
  out.emplace_back(name + ".block_out", &block_out_);
}

Transformer::Transformer(TransformerConfig cfg, std::uint64_t seed)
    : Transformer(validated(cfg), seed, Rng(seed)) {}

Transformer::Transformer(TransformerConfig cfg, std::uint64_t seed, Rng init)
    : cfg_(std::move(cfg)),
      rng_(derive_seed(seed, 1)),
      src_embed_("src_embed", cfg_.src_vocab, cfg_.d_model, init),
      tgt_embed_("tgt_embed", cfg_.tgt_vocab, cfg_.d_model, init),
      src_drop_(residual_dropout(cfg_.dropout), 1, cfg_.d_model),
      tgt_drop_(residual_dropout(cfg_.dropout), 1, cfg_.d_model),
      generator_("generator", cfg_.d_model, cfg_.tgt_vocab, init) {
  encoder_.reserve(cfg_.blocks);
  decoder_.reserve(cfg_.blocks);
  for (std::size_t i = 0; i < cfg_.blocks; ++i) {
    encoder_.emplace_back("encoder." + std::to_string(i), cfg_, init);
  }
  for (std::size_t i = 0; i < cfg_.blocks; ++i) {
    decoder_.emplace_back("decoder." + std::to_string(i), cfg_, init);
  }
}

std::size_t Transformer::parameter_count(const TransformerConfig& cfg) {
  const std::size_t d = cfg.d_model;
  auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };
  const std::size_t norm = 2 * d;
  const std::size_t attention = 4 * linear(d, d);
  const std::size_t ff = linear(d, cfg.d_ff) + linear(cfg.d_ff, d);
  const std::size_t encoder = attention + ff + 2 * norm;
  const std::size_t decoder = 2 * attention + ff + 3 * norm;
  return (cfg.src_vocab + cfg.tgt_vocab) * d + cfg.blocks * (encoder + decoder) +
         linear(d, cfg.tgt_vocab);
}

std::size_t Transformer::num_parameters() {
  std::size_t n = 0;
  visit_parameters([&n](Parameter& p) { n += p.size(); });
  return n;
}

void Transformer::visit_parameters(const ParameterVisitor& fn) {
  src_embed_.visit(fn);
  tgt_embed_.visit(fn);
  for (auto& block : encoder_) block.visit(fn);
  for (auto& block : decoder_) block.visit(fn);
  generator_.visit(fn);
}

void Transformer::zero_grad() {
  visit_parameters([](Parameter& p) { p.zero_grad(); });
}

std::vector<std::pair<std::string, InsertLayer*>> Transformer::inserts() {
  std::vector<std::pair<std::string, InsertLayer*>> out;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    encoder_[i].collect_inserts("encoder." + std::to_string(i), out);
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    decoder_[i].collect_inserts("decoder." + std::to_string(i), out);
  }
  return out;
}

const Matrix& Transformer::positions(std::size_t len) {
  if (static_cast<std::size_t>(pe_.rows()) < len) {
    pe_ = positional_encoding(std::max(len, cfg_.max_len + 1), cfg_.d_model);
  }
  return pe_;
}

Matrix Transformer::embed(Embedding& table, InsertLayer& dropout,
                          std::span<const TokenId> ids, std::size_t batch,
                          std::size_t len, bool training) {
  const Matrix& pe = positions(len);
  Matrix x = table.forward(ids) * std::sqrt(static_cast<Real>(cfg_.d_model));
  for (std::size_t b = 0; b < batch; ++b) {
    x.block(static_cast<Eigen::Index>(b * len), 0,
            static_cast<Eigen::Index>(len), x.cols()) +=
        pe.topRows(static_cast<Eigen::Index>(len));
  }
  dropout.forward(as_span(x), training, rng_);
  return x;
}

Matrix Transformer::encode(const Batch& batch, bool training) {
  const auto valid = batch.src_valid();
  Matrix x = embed(src_embed_, src_drop_, batch.src, batch.size, batch.src_len,
                   training);
  for (auto& block : encoder_) {
    x = block.forward(x, batch.size, batch.src_len, valid, training, rng_);
  }
  return x;
}

Matrix Transformer::decode(std::span<const TokenId> tgt_in, std::size_t batch,
                           std::size_t tgt_len, const Matrix& memory,
                           std::span<const std::uint8_t> src_valid,
                           std::size_t src_len, bool training) {
  const auto tgt_valid = valid_tokens(tgt_in);
  Matrix y = embed(tgt_embed_, tgt_drop_, tgt_in, batch, tgt_len, training);
  for (auto& block : decoder_) {
    y = block.forward(y, memory, batch, tgt_len, src_len, tgt_valid, src_valid,
                      training, rng_);
  }
  return generator_.forward(y);
}

Matrix Transformer::forward(const Batch& batch, bool training) {
  if (batch.size == 0) throw InvalidInput("transformer: empty batch");
  const Matrix memory = encode(batch, training);
  const auto src_valid = batch.src_valid();
  batch_size_ = batch.size;
  src_len_ = batch.src_len;
  tgt_len_ = batch.tgt_len;
  return decode(batch.tgt_in, batch.size, batch.tgt_len, memory, src_valid,
                batch.src_len, training);
}

namespace {

// Accumulates PAD-masked cross-entropy; when `grad` is non-null it receives
// d(mean loss)/d(logits).
LossSummary cross_entropy(const Matrix& logits, std::span<const TokenId> targets,
                          Matrix* grad) {
  LossSummary summary;
  const auto vocab = static_cast<TokenId>(logits.cols());
  if (grad) grad->setZero(logits.rows(), logits.cols());
  RowVector probs(logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const TokenId target = targets[static_cast<std::size_t>(r)];
    if (target == kPad) continue;
    if (target < 0 || target >= vocab) {
      throw InvalidInput("cross_entropy: target id out of range");
    }
    Eigen::Index best = 0;
    const Real peak = logits.row(r).maxCoeff(&best);
    probs = (logits.row(r).array() - peak).exp().matrix();
    const Real total = probs.sum();
    summary.loss_sum += std::log(total) - (logits(r, target) - peak);
    summary.tokens += 1;
    summary.correct += best == target ? 1 : 0;
    if (grad) {
      grad->row(r) = probs / total;
      (*grad)(r, target) -= 1.0;
    }
  }
  if (grad && summary.tokens > 0) *grad /= static_cast<Real>(summary.tokens);
  return summary;
}

}  // namespace

LossSummary Transformer::forward_backward(const Batch& batch) {
  const Matrix logits = forward(batch, /*training=*/true);
  Matrix d_logits;
  const LossSummary summary = cross_entropy(logits, batch.tgt_out, &d_logits);

  Matrix d_y = generator_.backward(d_logits);
  Matrix d_memory = Matrix::Zero(static_cast<Eigen::Index>(batch_size_ * src_len_),
                                 static_cast<Eigen::Index>(cfg_.d_model));
  for (auto it = decoder_.rbegin(); it != decoder_.rend(); ++it) {
    auto g = it->backward(d_y);
    d_y = std::move(g.input);
    d_memory += g.memory;
  }
  const Real embed_scale = std::sqrt(static_cast<Real>(cfg_.d_model));
  tgt_drop_.backward(as_span(d_y));
  tgt_embed_.backward(d_y * embed_scale);

  Matrix d_x = std::move(d_memory);
  for (auto it = encoder_.rbegin(); it != encoder_.rend(); ++it) {
    d_x = it->backward(d_x);
  }
  src_drop_.backward(as_span(d_x));
  src_embed_.backward(d_x * embed_scale);
  return summary;
}

LossSummary Transformer::evaluate(const Batch& batch) {
  const Matrix logits = forward(batch, /*training=*/false);
  return cross_entropy(logits, batch.tgt_out, nullptr);
}

std::vector<TokenSeq> Transformer::greedy_decode(const Batch& batch,
                                                 std::size_t max_len) {
  const std::size_t n = batch.size;
  std::vector<TokenSeq> out(n);
  if (n == 0 || max_len == 0) return out;
  const Matrix memory = encode(batch, /*training=*/false);
  const auto src_valid = batch.src_valid();
  std::vector<bool> finished(n, false);
  std::vector<TokenId> prefix(n, kBos);  // (B, t) row-major
  for (std::size_t t = 1; t <= max_len; ++t) {
    const Matrix logits =
        decode(prefix, n, t, memory, src_valid, batch.src_len, false);
    std::vector<TokenId> next(n * (t + 1));
    bool all_done = true;
    for (std::size_t b = 0; b < n; ++b) {
      Eigen::Index best = 0;
      logits.row(static_cast<Eigen::Index>(b * t + t - 1)).maxCoeff(&best);
      const auto token = static_cast<TokenId>(best);
      if (!finished[b]) {
        out[b].push_back(token);
        finished[b] = token == kEos;
      }
      all_done = all_done && finished[b];
      std::copy_n(prefix.begin() + static_cast<long>(b * t), t,
                  next.begin() + static_cast<long>(b * (t + 1)));
      next[b * (t + 1) + t] = finished[b] ? kEos : token;
    }
    if (all_done) break;
    prefix = std::move(next);
  }
  return out;
}

Tensor seq2seq_forward(Transformer& model, const Batch& batch) {
  const Matrix logits = model.forward(batch, /*training=*/false);
  Tensor out({batch.size, batch.tgt_len, static_cast<std::size_t>(logits.cols())});
  std::copy(logits.data(), logits.data() + logits.size(), out.data.begin());
  return out;
}

TokenSeq strip_eos(const TokenSeq& seq) {
  TokenSeq out;
  for (TokenId t : seq) {
    if (t == kEos) break;
    out.push_back(t);
  }
  return out;
}

}  // namespace homeostat
