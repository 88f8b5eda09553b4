#pragma once

// Experiment configuration: the variant families (A-E), optimizer, training
// schedule and data source, with strict JSON (de)serialization.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include "json.hpp"

#include "homeostat/data.hpp"
#include "homeostat/homeostasis.hpp"
#include "homeostat/transformer.hpp"

namespace homeostat {

// A: baseline. B: RFB-kWTA in attention + dropout at block output.
// C: dropout at both sites. D: Smart Inhibition at both sites.
// E: RFB-kWTA in attention + Smart Inhibition at block output.
enum class Variant { A, B, C, D, E };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool operator==(const AdamConfig&) const = default;
};

struct DataConfig {
  std::string task = "copy";  // copy | reverse | text
  // Synthetic tasks.
  std::size_t symbols = 16;
  std::size_t min_len = 1;
  std::size_t max_len = 10;
  std::size_t train_pairs = 1000;
  std::size_t val_pairs = 100;
  // Text corpora: either line-aligned source/target files or a TSV.
  std::string train_src, train_tgt, train_tsv;
  std::string val_src, val_tgt, val_tsv;
  std::size_t min_frequency = 2;
  bool operator==(const DataConfig&) const = default;
};

struct ExperimentConfig {
  std::string id = "run";
  Variant variant = Variant::A;
  double s = 0.9;
  std::size_t q_att = 256;
  std::size_t q_bo = 16;
  double a = 0.99;
  double b = 0.01;
  double gamma = 0.83;
  double delta = 0.05;
  double insert_dropout = 0.1;  // drop probability of dropout inserts
  BoostReference boost_reference = BoostReference::numerator;
  InhibitionDirection inhibition_direction = InhibitionDirection::rarity;
  bool cross_attention_insert = true;
  // Explicit overrides of the variant's mechanisms (e.g. plain kwta).
  std::optional<Mechanism> attn_mechanism;
  std::optional<Mechanism> block_out_mechanism;

  std::string model_preset = "micro";
  // Inserts and vocabulary sizes are filled in by resolved_model().
  TransformerConfig model = TransformerConfig::preset("micro");

  AdamConfig optimizer;
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  std::size_t max_len = 64;  // truncation length for training sequences
  std::uint64_t seed = 0;
  std::size_t checkpoint_interval_epochs = 30;
  std::size_t eval_interval_epochs = 1;
  std::size_t eval_bleu_pairs = 256;  // 0 = whole split

  DataConfig data;

  // Insert configurations implied by the variant and homeostasis fields.
  HomeostasisConfig attention_insert() const;
  HomeostasisConfig block_output_insert() const;

  // Model config with inserts and the given vocabulary sizes applied.
  TransformerConfig resolved_model(std::size_t src_vocab,
                                   std::size_t tgt_vocab) const;

  // Throws ConfigError naming the offending key.
  void validate() const;

  bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
// Starts from `base` and applies the keys present in `j`. Unknown keys are
// rejected with a ConfigError naming them.
ExperimentConfig experiment_from_json(const nlohmann::json& j,
                                      ExperimentConfig base = {});

nlohmann::json to_json(const TransformerConfig& cfg);
TransformerConfig transformer_from_json(const nlohmann::json& j);

// Training and validation corpora described by a data config. The
// validation split shares the training vocabularies; it is empty-optional
// when the config names no validation data.
struct CorpusSplits {
  ParallelCorpus train;
  std::optional<ParallelCorpus> val;
};
CorpusSplits load_corpora(const DataConfig& data, std::uint64_t seed);

}  // namespace homeostat
