#include "doctest.h"

#include <cmath>
#include <map>
#include <random>

#include "homeostat/errors.hpp"
#include "homeostat/transformer.hpp"

using namespace homeostat;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& gen) {
  std::normal_distribution<double> n01;
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n01(gen);
  return m;
}

// Attention computed with explicit loops over a (L, D_h) slice.
std::vector<double> loop_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   std::size_t len, std::size_t dh, bool causal) {
  std::vector<double> out(len * dh, 0.0);
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<double> scores;
    for (std::size_t j = 0; j < len; ++j) {
      if (causal && j > i) continue;
      double dot = 0;
      for (std::size_t d = 0; d < dh; ++d) dot += q.data[i * dh + d] * k.data[j * dh + d];
      scores.push_back(dot / std::sqrt(static_cast<double>(dh)));
    }
    double peak = *std::max_element(scores.begin(), scores.end());
    double total = 0;
    for (auto& s : scores) total += (s = std::exp(s - peak));
    for (std::size_t j = 0; j < scores.size(); ++j)
      for (std::size_t d = 0; d < dh; ++d)
        out[i * dh + d] += scores[j] / total * v.data[j * dh + d];
  }
  return out;
}

std::map<std::string, Parameter*> parameters(MultiHeadAttention& mha) {
  std::map<std::string, Parameter*> out;
  mha.visit([&out](Parameter& p) { out[p.name] = &p; });
  return out;
}

ParallelCorpus copy_corpus(std::size_t symbols, std::size_t count, std::uint64_t seed,
                           std::size_t max_len = 6) {
  return synthetic_task(SyntheticKind::copy, symbols, 1, max_len, count, seed);
}

TransformerConfig tiny_config(std::size_t vocab) {
  TransformerConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.d_ff = 16;
  cfg.blocks = 2;
  cfg.dropout = 0.0;
  cfg.src_vocab = vocab;
  cfg.tgt_vocab = vocab;
  cfg.max_len = 16;
  return cfg;
}

Batch first_batch(const ParallelCorpus& corpus, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return make_batch(corpus, idx, 16);
}

}  // namespace

TEST_CASE("positional encoding values") {
  const Matrix pe = positional_encoding(5, 6);
  for (Eigen::Index i = 0; i < 3; ++i) {
    CHECK(pe(0, 2 * i) == 0.0);
    CHECK(pe(0, 2 * i + 1) == 1.0);
  }
  CHECK(pe(1, 0) == doctest::Approx(0.841471).epsilon(1e-6));
  CHECK(pe(3, 2) == doctest::Approx(std::sin(3.0 / std::pow(10000.0, 2.0 / 6.0))));
  CHECK(pe.maxCoeff() <= 1.0);
  CHECK(pe.minCoeff() >= -1.0);
  CHECK_THROWS_AS(positional_encoding(4, 5), InvalidInput);
}

TEST_CASE("attention probabilities sum to one over allowed keys") {
  std::mt19937_64 gen(1);
  const Matrix q = random_matrix(4, 3, gen), k = random_matrix(5, 3, gen);
  const std::vector<std::uint8_t> valid{1, 1, 0, 1, 0};
  const Matrix p = attention_probabilities(q, k, 0.5, valid, false);
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    CHECK(std::abs(p.row(r).sum() - 1.0) < 1e-6);
    CHECK(p(r, 2) == 0.0);
    CHECK(p(r, 4) == 0.0);
  }
  const Matrix causal = attention_probabilities(q, random_matrix(4, 3, gen), 0.5, {}, true);
  CHECK(causal(0, 1) == 0.0);
  CHECK(causal(0, 0) == 1.0);
  const std::vector<std::uint8_t> none{0, 0, 0, 0, 0};
  CHECK_THROWS_AS(attention_probabilities(q, k, 0.5, none, false), InvalidInput);
}

TEST_CASE("scaled attention: single key returns V") {
  Tensor q({1, 1, 1, 3}, {0.2, -1, 4}), k({1, 1, 1, 3}, {1, 2, 3}),
      v({1, 1, 1, 3}, {7, 8, 9});
  CHECK(scaled_attention(q, k, v, false).data == v.data);
}

TEST_CASE("scaled attention: equal scores average the unmasked rows") {
  Tensor q({1, 1, 2, 2}, {0, 0, 0, 0});
  Tensor k({1, 1, 3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor v({1, 1, 3, 2}, {1, 10, 2, 20, 30, 300});
  const std::vector<std::uint8_t> valid{1, 1, 0};
  const auto out = scaled_attention(q, k, v, false, valid);
  CHECK(out.data[0] == doctest::Approx(1.5));
  CHECK(out.data[1] == doctest::Approx(15));
}

TEST_CASE("scaled attention matches the loop oracle") {
  std::mt19937_64 gen(2);
  std::normal_distribution<double> n01;
  for (bool causal : {false, true}) {
    Tensor q({1, 1, 3, 4}), k({1, 1, 3, 4}), v({1, 1, 3, 4});
    for (auto* t : {&q, &k, &v})
      for (auto& x : t->data) x = n01(gen);
    const auto got = scaled_attention(q, k, v, causal);
    const auto want = loop_attention(q, k, v, 3, 4, causal);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got.data[i] - want[i]) < 1e-6);
  }
}

TEST_CASE("scaled attention output layout is (B, L, H, D_h)") {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> n01;
  Tensor q({2, 3, 4, 5}), k({2, 3, 6, 5}), v({2, 3, 6, 5});
  for (auto* t : {&q, &k, &v})
    for (auto& x : t->data) x = n01(gen);
  const auto out = scaled_attention(q, k, v, false);
  CHECK(out.shape == Shape{2, 4, 3, 5});
  // Head 2 of batch 1 against a slice-level oracle.
  Tensor qs({1, 1, 4, 5}), ks({1, 1, 6, 5}), vs({1, 1, 6, 5});
  auto slice = [](const Tensor& t, Tensor& s, std::size_t len) {
    const std::size_t base = (1 * 3 + 2) * len * 5;
    std::copy_n(t.data.begin() + static_cast<long>(base), len * 5, s.data.begin());
  };
  slice(q, qs, 4);
  slice(k, ks, 6);
  slice(v, vs, 6);
  const auto ref = scaled_attention(qs, ks, vs, false);
  for (std::size_t l = 0; l < 4; ++l)
    for (std::size_t d = 0; d < 5; ++d)
      CHECK(out.data[((1 * 4 + l) * 3 + 2) * 5 + d] == doctest::Approx(ref.data[l * 5 + d]));
}

TEST_CASE("multi-head attention without insert is the classical layer") {
  Rng init(4), rng(5);
  MultiHeadAttention mha("mha", 8, 2, HomeostasisConfig{}, init);
  std::mt19937_64 gen(6);
  const Matrix x = random_matrix(2 * 3, 8, gen);
  const Matrix y = mha.forward(x, x, 2, 3, 3, {}, true, rng);

  auto p = parameters(mha);
  auto lin = [&](const std::string& n, const Matrix& in) {
    Matrix out = in * p["mha." + n + ".weight"]->value;
    out.rowwise() += p["mha." + n + ".bias"]->value.row(0);
    return out;
  };
  const Matrix q = lin("query", x), k = lin("key", x), v = lin("value", x);
  Matrix heads(6, 8);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t h = 0; h < 2; ++h) {
      Tensor qs({1, 1, 3, 4}), ks({1, 1, 3, 4}), vs({1, 1, 3, 4});
      for (std::size_t l = 0; l < 3; ++l)
        for (std::size_t d = 0; d < 4; ++d) {
          const auto r = static_cast<Eigen::Index>(b * 3 + l), c = static_cast<Eigen::Index>(h * 4 + d);
          qs.data[l * 4 + d] = q(r, c);
          ks.data[l * 4 + d] = k(r, c);
          vs.data[l * 4 + d] = v(r, c);
        }
      const auto o = loop_attention(qs, ks, vs, 3, 4, false);
      for (std::size_t l = 0; l < 3; ++l)
        for (std::size_t d = 0; d < 4; ++d)
          heads(static_cast<Eigen::Index>(b * 3 + l), static_cast<Eigen::Index>(h * 4 + d)) = o[l * 4 + d];
    }
  const Matrix want = lin("output", heads);
  CHECK((y - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("multi-head attention with kwta keeps half of each head") {
  HomeostasisConfig insert;
  insert.mechanism = Mechanism::kwta;
  insert.s = 0.5;
  Rng init(7), rng(8);
  MultiHeadAttention mha("mha", 8, 2, insert, init);
  std::mt19937_64 gen(9);
  const Matrix x = random_matrix(5, 8, gen);
  mha.forward(x, x, 1, 5, 5, {}, false, rng);
  const Matrix& heads = mha.head_outputs();
  for (Eigen::Index r = 0; r < heads.rows(); ++r)
    for (Eigen::Index h = 0; h < 2; ++h) {
      int nonzero = 0;
      for (Eigen::Index d = 0; d < 4; ++d) nonzero += heads(r, h * 4 + d) != 0.0;
      CHECK(nonzero == 2);
    }
}

TEST_CASE("rfb-kwta attention with an empty cache equals kwta attention") {
  HomeostasisConfig kwta;
  kwta.mechanism = Mechanism::kwta;
  kwta.s = 0.25;
  HomeostasisConfig rfb = kwta;
  rfb.mechanism = Mechanism::rfb_kwta;
  Rng init_a(10), init_b(10), rng(11);
  MultiHeadAttention a("mha", 8, 1, kwta, init_a), b("mha", 8, 1, rfb, init_b);
  std::mt19937_64 gen(12);
  const Matrix x = random_matrix(4, 8, gen);
  CHECK(a.forward(x, x, 1, 4, 4, {}, false, rng) == b.forward(x, x, 1, 4, 4, {}, false, rng));
}

TEST_CASE("config validation") {
  auto cfg = tiny_config(10);
  CHECK_NOTHROW(cfg.validate());
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config(10);
  cfg.blocks = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config(0);
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(TransformerConfig::preset("huge"), ConfigError);
}

TEST_CASE("untrained model produces finite logits of shape (B, L_tgt, V)") {
  const auto corpus = copy_corpus(6, 8, 1);
  Transformer model(tiny_config(10), 3);
  const Batch batch = first_batch(corpus, 4);
  const Tensor logits = seq2seq_forward(model, batch);
  CHECK(logits.shape == Shape{4, batch.tgt_len, 10});
  for (Real v : logits.data) CHECK(std::isfinite(v));
}

TEST_CASE("out-of-range token ids are rejected") {
  const auto corpus = copy_corpus(6, 4, 1);
  Transformer model(tiny_config(10), 3);
  Batch batch = first_batch(corpus, 2);
  batch.src[0] = 10;
  CHECK_THROWS_AS(seq2seq_forward(model, batch), InvalidInput);
}

TEST_CASE("extra source padding does not change the outputs") {
  const auto corpus = copy_corpus(6, 6, 2);
  Transformer model(tiny_config(10), 4);
  const Batch batch = first_batch(corpus, 3);
  Batch padded = batch;
  const std::size_t extra = 3, len = batch.src_len + extra;
  padded.src.assign(batch.size * len, kPad);
  for (std::size_t b = 0; b < batch.size; ++b)
    std::copy_n(batch.src.begin() + static_cast<long>(b * batch.src_len), batch.src_len,
                padded.src.begin() + static_cast<long>(b * len));
  padded.src_len = len;
  const Tensor a = seq2seq_forward(model, batch), b = seq2seq_forward(model, padded);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data[i] == doctest::Approx(b.data[i]).epsilon(1e-12));
}

TEST_CASE("eval-mode smart inhibition and block-output none give the same model") {
  const auto corpus = copy_corpus(6, 6, 3);
  auto plain = tiny_config(10);
  auto smart = plain;
  smart.block_out_insert.mechanism = Mechanism::smart_inhibition;
  smart.attn_insert.mechanism = Mechanism::smart_inhibition;
  Transformer a(plain, 5), b(smart, 5);
  const Batch batch = first_batch(corpus, 3);
  CHECK(a.forward(batch, false) == b.forward(batch, false));
}

TEST_CASE("block-output dropout matches a same-seed masked computation") {
  auto base = tiny_config(10);
  auto with_dropout = base;
  with_dropout.block_out_insert.mechanism = Mechanism::dropout;
  with_dropout.block_out_insert.dropout_p = 0.1;
  Rng init_a(6), init_b(6), rng_a(7), rng_b(7), reference(7);
  EncoderBlock plain("enc", base, init_a), dropped("enc", with_dropout, init_b);
  std::mt19937_64 gen(8);
  const Matrix x = random_matrix(2 * 4, 8, gen);
  const Matrix y = plain.forward(x, 2, 4, {}, true, rng_a);
  const Matrix z = dropped.forward(x, 2, 4, {}, true, rng_b);
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const bool keep = reference.uniform() < 0.9;
    CHECK(z.data()[i] == (keep ? y.data()[i] * (1.0 / 0.9) : 0.0));
  }
}

TEST_CASE("inserts are registered at both sites in every block") {
  auto cfg = tiny_config(10);
  cfg.attn_insert.mechanism = Mechanism::rfb_kwta;
  cfg.block_out_insert.mechanism = Mechanism::smart_inhibition;
  cfg.block_out_insert.capacity = 16;
  Transformer model(cfg, 1);
  std::map<std::string, InsertLayer*> inserts;
  for (auto& [name, layer] : model.inserts()) inserts[name] = layer;
  REQUIRE(inserts.count("encoder.0.self_attn.insert"));
  REQUIRE(inserts.count("decoder.1.cross_attn.insert"));
  REQUIRE(inserts.count("decoder.1.block_out"));
  const auto* attn = inserts["encoder.1.self_attn.insert"];
  CHECK(attn->heads() == 2);
  CHECK(attn->features() == 4);
  CHECK(attn->cache().capacity() == cfg.attn_insert.capacity);
  const auto* out = inserts["decoder.0.block_out"];
  CHECK(out->heads() == 1);
  CHECK(out->features() == 8);
  CHECK(out->cache().capacity() == 16);

  cfg.insert_in_cross_attention = false;
  Transformer no_cross(cfg, 1);
  for (auto& [name, layer] : no_cross.inserts()) {
    if (name.find("cross_attn") != std::string::npos) CHECK(layer->config().mechanism == Mechanism::none);
  }
}

TEST_CASE("training forwards update caches, eval forwards do not") {
  auto cfg = tiny_config(10);
  cfg.attn_insert.mechanism = Mechanism::rfb_kwta;
  cfg.block_out_insert.mechanism = Mechanism::smart_inhibition;
  Transformer model(cfg, 2);
  const Batch batch = first_batch(copy_corpus(6, 4, 4), 4);
  model.forward(batch, false);
  for (auto& [name, layer] : model.inserts())
    if (layer->has_cache()) CHECK(layer->cache().fill() == 0);
  model.zero_grad();
  model.forward_backward(batch);
  for (auto& [name, layer] : model.inserts())
    if (layer->has_cache()) CHECK(layer->cache().fill() == 1);
}

TEST_CASE("loss at initialization is close to ln(V)") {
  const std::size_t vocab = 256;
  auto cfg = TransformerConfig::preset("micro");
  cfg.src_vocab = cfg.tgt_vocab = vocab;
  Transformer model(cfg, 11);
  std::mt19937_64 gen(12);
  std::uniform_int_distribution<TokenId> token(4, vocab - 1);
  ParallelCorpus corpus;
  for (int i = 0; i < 64; ++i) {
    SentencePair pair;
    for (int j = 0; j < 10; ++j) {
      pair.source.push_back(token(gen));
      pair.target.push_back(token(gen));
    }
    corpus.pairs.push_back(pair);
  }
  const Batch batch = first_batch(corpus, 64);
  const double loss = model.evaluate(batch).mean_loss();
  CHECK(std::abs(loss - std::log(static_cast<double>(vocab))) / std::log(static_cast<double>(vocab)) < 0.05);
}

TEST_CASE("padding positions receive exactly zero gradient") {
  const auto corpus = copy_corpus(6, 8, 5);
  Transformer model(tiny_config(10), 6);
  const Batch batch = first_batch(corpus, 8);
  REQUIRE(std::count(batch.tgt_out.begin(), batch.tgt_out.end(), kPad) > 0);
  model.zero_grad();
  model.forward_backward(batch);
  model.visit_parameters([](Parameter& p) {
    if (p.name == "src_embed.table" || p.name == "tgt_embed.table") {
      CHECK(p.grad.row(kPad).cwiseAbs().maxCoeff() == 0.0);
    }
  });
}

TEST_CASE("model is a pure function of weights and inputs without inserts") {
  const auto corpus = copy_corpus(6, 4, 6);
  Transformer model(tiny_config(10), 7);
  const Batch batch = first_batch(corpus, 4);
  const Matrix a = model.forward(batch, true);
  const Matrix b = model.forward(batch, true);
  CHECK(a == b);
}

TEST_CASE("greedy decoding") {
  const auto corpus = copy_corpus(6, 4, 7);
  Transformer model(tiny_config(10), 8);
  const Batch batch = first_batch(corpus, 4);
  const auto one = model.greedy_decode(batch, 1);
  for (const auto& seq : one) CHECK(seq.size() == 1);
  const auto a = model.greedy_decode(batch, 12);
  const auto b = model.greedy_decode(batch, 12);
  CHECK(a == b);
  for (const auto& seq : a) {
    CHECK(seq.size() <= 12);
    if (seq.size() < 12) CHECK(seq.back() == kEos);
  }
  CHECK(strip_eos({5, 6, kEos, 7}) == TokenSeq{5, 6});
}

TEST_CASE("micro transformer gradients match central finite differences") {
  const auto corpus = copy_corpus(6, 4, 8, 4);
  Transformer model(tiny_config(10), 9);
  const Batch batch = first_batch(corpus, 4);
  model.zero_grad();
  model.forward_backward(batch);
  double worst = 0;
  std::size_t checked = 0;
  model.visit_parameters([&](Parameter& p) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      Real& w = p.value.data()[i];
      const Real saved = w;
      w = saved + 1e-4;
      const double up = model.evaluate(batch).mean_loss();
      w = saved - 1e-4;
      const double down = model.evaluate(batch).mean_loss();
      w = saved;
      const double numeric = (up - down) / 2e-4;
      const double analytic = p.grad.data()[i];
      const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      worst = std::max(worst, std::abs(numeric - analytic) / scale);
      ++checked;
    }
  });
  MESSAGE("checked " << checked << " parameters, max relative error " << worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("parameter counts match the closed form") {
  auto cfg = tiny_config(10);
  Transformer model(cfg, 1);
  CHECK(model.num_parameters() == Transformer::parameter_count(cfg));
}
