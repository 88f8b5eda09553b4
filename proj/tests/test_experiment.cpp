#include "doctest.h"

#include "homeostat/errors.hpp"
#include "homeostat/experiment.hpp"

using namespace homeostat;
using nlohmann::json;

TEST_CASE("variant families map to insert mechanisms") {
  struct Row {
    Variant v;
    Mechanism attn, block;
  };
  const Row rows[] = {
      {Variant::A, Mechanism::none, Mechanism::none},
      {Variant::B, Mechanism::rfb_kwta, Mechanism::dropout},
      {Variant::C, Mechanism::dropout, Mechanism::dropout},
      {Variant::D, Mechanism::smart_inhibition, Mechanism::smart_inhibition},
      {Variant::E, Mechanism::rfb_kwta, Mechanism::smart_inhibition},
  };
  for (const auto& row : rows) {
    ExperimentConfig cfg;
    cfg.variant = row.v;
    CHECK(cfg.attention_insert().mechanism == row.attn);
    CHECK(cfg.block_output_insert().mechanism == row.block);
    const auto model = cfg.resolved_model(20, 21);
    CHECK(model.attn_insert.mechanism == row.attn);
    CHECK(model.block_out_insert.mechanism == row.block);
    CHECK(model.src_vocab == 20);
    CHECK(model.tgt_vocab == 21);
    CHECK(parse_variant(to_string(row.v)) == row.v);
  }
  CHECK_THROWS_AS(parse_variant("F"), ConfigError);
}

TEST_CASE("best-row flags resolve to smart inhibition with Q 256/16 and s 0.9") {
  const auto cfg = experiment_from_json(
      json{{"variant", "D"}, {"q_att", 256}, {"q_bo", 16}, {"s", 0.9}});
  CHECK(cfg.variant == Variant::D);
  const auto attn = cfg.attention_insert(), block = cfg.block_output_insert();
  CHECK(attn.mechanism == Mechanism::smart_inhibition);
  CHECK(block.mechanism == Mechanism::smart_inhibition);
  CHECK(attn.capacity == 256);
  CHECK(block.capacity == 16);
  CHECK(attn.s == 0.9);
  CHECK(block.s == 0.9);
}

TEST_CASE("homeostasis fields reach both inserts") {
  ExperimentConfig cfg;
  cfg.variant = Variant::E;
  cfg.a = 0.9;
  cfg.b = 0.05;
  cfg.gamma = 1.5;
  cfg.delta = 0.01;
  cfg.insert_dropout = 0.3;
  for (const auto& ins : {cfg.attention_insert(), cfg.block_output_insert()}) {
    CHECK(ins.a == 0.9);
    CHECK(ins.b == 0.05);
    CHECK(ins.gamma == 1.5);
    CHECK(ins.delta == 0.01);
    CHECK(ins.dropout_p == 0.3);
  }
  cfg.attn_mechanism = Mechanism::kwta;
  CHECK(cfg.attention_insert().mechanism == Mechanism::kwta);
  CHECK(cfg.block_output_insert().mechanism == Mechanism::smart_inhibition);
}

TEST_CASE("config JSON round trip") {
  ExperimentConfig cfg;
  cfg.id = "trial-7";
  cfg.variant = Variant::B;
  cfg.s = 0.35;
  cfg.q_att = 64;
  cfg.steps = 123;
  cfg.seed = 42;
  cfg.boost_reference = BoostReference::statistics;
  cfg.block_out_mechanism = Mechanism::kwta;
  cfg.data.task = "reverse";
  cfg.data.symbols = 9;
  cfg.optimizer.lr = 3e-4;
  const auto back = experiment_from_json(to_json(cfg));
  CHECK(back == cfg);
  CHECK(to_json(back) == to_json(cfg));
}

TEST_CASE("unknown keys are rejected by name") {
  auto expect_key = [](const json& j, const std::string& key) {
    try {
      experiment_from_json(j);
      FAIL("accepted unknown key " << key);
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(key) != std::string::npos);
    }
  };
  expect_key(json{{"learning_rate", 0.1}}, "learning_rate");
  expect_key(json{{"model", {{"depth", 3}}}}, "depth");
  expect_key(json{{"training", {{"epochs", 3}}}}, "epochs");
  expect_key(json{{"data", {{"path", "x"}}}}, "path");
}

TEST_CASE("invalid values are rejected") {
  auto invalid = [](const json& j) {
    CHECK_THROWS_AS(experiment_from_json(j).validate(), ConfigError);
  };
  invalid(json{{"s", 1.5}});
  invalid(json{{"s", 0.0}});
  invalid(json{{"insert_dropout", 1.0}});
  invalid(json{{"a", 0.005}});
  invalid(json{{"training", {{"batch_size", 0}}}});
  invalid(json{{"variant", "D"}, {"q_bo", 0}});
  invalid(json{{"data", {{"task", "sort"}}}});
  invalid(json{{"data", {{"task", "text"}}}});
  invalid(json{{"model", {{"heads", 5}}}});
  CHECK_NOTHROW(experiment_from_json(json{{"variant", "E"}}).validate());
  CHECK_THROWS_AS(experiment_from_json(json{{"s", "high"}}), ConfigError);
  CHECK_THROWS_AS(experiment_from_json(json{{"variant", "Z"}}), ConfigError);
  CHECK_THROWS_AS(experiment_from_json(json::array()), ConfigError);
}

TEST_CASE("patches apply on top of a base configuration") {
  ExperimentConfig base;
  base.variant = Variant::C;
  base.steps = 10;
  const auto cfg = experiment_from_json(json{{"training", {{"steps", 20}}}}, base);
  CHECK(cfg.variant == Variant::C);
  CHECK(cfg.steps == 20);
}

TEST_CASE("model presets") {
  const auto cfg = experiment_from_json(json{{"model", {{"preset", "base"}}}});
  CHECK(cfg.model.d_model == 512);
  CHECK(cfg.model.heads == 8);
  CHECK(cfg.model.d_ff == 2048);
  CHECK(cfg.model.blocks == 6);
  const auto small = TransformerConfig::preset("small");
  CHECK(small.d_model == 256);
  const auto big = TransformerConfig::preset("big");
  CHECK(big.d_model == 1024);
  CHECK(big.heads == 16);
  CHECK(big.d_ff == 4096);
  const auto micro = TransformerConfig::preset("micro");
  CHECK(micro.d_model == 32);
  CHECK(micro.heads == 2);
  CHECK(micro.blocks == 2);
}

TEST_CASE("corpora from a data config") {
  DataConfig data;
  data.symbols = 5;
  data.train_pairs = 30;
  data.val_pairs = 7;
  const auto splits = load_corpora(data, 3);
  CHECK(splits.train.size() == 30);
  REQUIRE(splits.val);
  CHECK(splits.val->size() == 7);
  CHECK(splits.val->source_vocab == splits.train.source_vocab);
  CHECK(load_corpora(data, 3).train.pairs == splits.train.pairs);
  data.val_pairs = 0;
  CHECK_FALSE(load_corpora(data, 3).val);
  data.task = "text";
  CHECK_THROWS_AS(load_corpora(data, 3), FormatError);
}
