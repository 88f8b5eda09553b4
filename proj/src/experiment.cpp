#include "homeostat/experiment.hpp"

#include <set>

#include "homeostat/errors.hpp"

namespace homeostat {

using nlohmann::json;

namespace {

// Reads keys from one JSON object, rejecting any key that is not consumed.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  template <typename T, typename Parse>
  void read_with(const std::string& key, T& out, Parse parse) {
    std::string text;
    read(key, text);
    if (!j_.contains(key)) return;
    try {
      out = parse(text);
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(where(key) + ": unknown key");
    }
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json mechanism_or_null(const std::optional<Mechanism>& m) {
  return m ? json(to_string(*m)) : json(nullptr);
}

void read_optional_mechanism(StrictObject& obj, const json& j,
                             const std::string& key,
                             std::optional<Mechanism>& out) {
  const json* value = obj.child(key);
  if (!value) return;
  if (value->is_null()) {
    out.reset();
    return;
  }
  if (!value->is_string()) throw ConfigError(obj.where(key) + ": expected a string");
  try {
    out = parse_mechanism(value->get<std::string>());
  } catch (const ConfigError& e) {
    throw ConfigError(obj.where(key) + ": " + e.what());
  }
  (void)j;
}

}  // namespace

std::string to_string(Variant v) {
  static const char* names[] = {"A", "B", "C", "D", "E"};
  return names[static_cast<int>(v)];
}

Variant parse_variant(const std::string& name) {
  if (name.size() == 1) {
    const char c = static_cast<char>(name[0] >= 'a' ? name[0] - 32 : name[0]);
    if (c >= 'A' && c <= 'E') return static_cast<Variant>(c - 'A');
  }
  throw ConfigError("variant: expected one of A, B, C, D, E, got '" + name + "'");
}

HomeostasisConfig ExperimentConfig::attention_insert() const {
  HomeostasisConfig cfg;
  cfg.s = s;
  cfg.capacity = q_att;
  cfg.a = a;
  cfg.b = b;
  cfg.gamma = gamma;
  cfg.delta = delta;
  cfg.dropout_p = insert_dropout;
  cfg.boost_reference = boost_reference;
  cfg.direction = inhibition_direction;
  switch (variant) {
    case Variant::A: cfg.mechanism = Mechanism::none; break;
    case Variant::B: cfg.mechanism = Mechanism::rfb_kwta; break;
    case Variant::C: cfg.mechanism = Mechanism::dropout; break;
    case Variant::D: cfg.mechanism = Mechanism::smart_inhibition; break;
    case Variant::E: cfg.mechanism = Mechanism::rfb_kwta; break;
  }
  if (attn_mechanism) cfg.mechanism = *attn_mechanism;
  return cfg;
}

HomeostasisConfig ExperimentConfig::block_output_insert() const {
  HomeostasisConfig cfg = attention_insert();
  cfg.capacity = q_bo;
  switch (variant) {
    case Variant::A: cfg.mechanism = Mechanism::none; break;
    case Variant::B: cfg.mechanism = Mechanism::dropout; break;
    case Variant::C: cfg.mechanism = Mechanism::dropout; break;
    case Variant::D: cfg.mechanism = Mechanism::smart_inhibition; break;
    case Variant::E: cfg.mechanism = Mechanism::smart_inhibition; break;
  }
  if (block_out_mechanism) cfg.mechanism = *block_out_mechanism;
  return cfg;
}

TransformerConfig ExperimentConfig::resolved_model(std::size_t src_vocab,
                                                   std::size_t tgt_vocab) const {
  TransformerConfig cfg = model;
  cfg.src_vocab = src_vocab;
  cfg.tgt_vocab = tgt_vocab;
  cfg.attn_insert = attention_insert();
  cfg.block_out_insert = block_output_insert();
  cfg.insert_in_cross_attention = cross_attention_insert;
  cfg.max_len = std::max(cfg.max_len, max_len + 1);
  return cfg;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError(key + ": " + why);
  };
  if (id.empty()) fail("id", "must not be empty");
  if (!(s > 0.0 && s < 1.0)) fail("s", "must lie in (0, 1)");
  if (q_att == 0) fail("q_att", "must be >= 1");
  if (q_bo == 0) fail("q_bo", "must be >= 1");
  if (!(b > 0.0 && b < a && a < 1.0)) fail("a", "require 0 < b < a < 1");
  if (!(gamma > 0.0)) fail("gamma", "must be > 0");
  if (!(delta >= 0.0)) fail("delta", "must be >= 0");
  if (!(insert_dropout >= 0.0 && insert_dropout < 1.0)) {
    fail("insert_dropout", "must lie in [0, 1)");
  }
  if (!(optimizer.lr > 0.0)) fail("optimizer.lr", "must be > 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0)) {
    fail("optimizer.beta1", "must lie in [0, 1)");
  }
  if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    fail("optimizer.beta2", "must lie in [0, 1)");
  }
  if (!(optimizer.eps > 0.0)) fail("optimizer.eps", "must be > 0");
  if (batch_size == 0) fail("training.batch_size", "must be >= 1");
  if (max_len == 0) fail("training.max_len", "must be >= 1");
  if (checkpoint_interval_epochs == 0) {
    fail("training.checkpoint_interval_epochs", "must be >= 1");
  }
  if (eval_interval_epochs == 0) fail("training.eval_interval_epochs", "must be >= 1");
  if (data.task != "copy" && data.task != "reverse" && data.task != "text") {
    fail("data.task", "expected copy, reverse or text");
  }
  if (data.task == "text") {
    if (data.train_tsv.empty() && (data.train_src.empty() || data.train_tgt.empty())) {
      fail("data.train_src", "text task needs train_src and train_tgt, or train_tsv");
    }
  } else {
    if (data.symbols < 2) fail("data.symbols", "must be >= 2");
    if (data.min_len == 0 || data.min_len > data.max_len) {
      fail("data.min_len", "require 1 <= min_len <= max_len");
    }
    if (data.train_pairs == 0) fail("data.train_pairs", "must be >= 1");
  }
  // Vocabulary sizes are placeholders here; they come from the corpus.
  resolved_model(kReservedTokens + 2, kReservedTokens + 2).validate();
}

json to_json(const TransformerConfig& cfg) {
  return json{{"d_model", cfg.d_model},   {"heads", cfg.heads},
              {"d_ff", cfg.d_ff},         {"blocks", cfg.blocks},
              {"dropout", cfg.dropout},   {"max_len", cfg.max_len},
              {"src_vocab", cfg.src_vocab}, {"tgt_vocab", cfg.tgt_vocab}};
}

TransformerConfig transformer_from_json(const json& j) {
  TransformerConfig cfg;
  StrictObject obj(j, "model");
  std::string preset;
  obj.read("preset", preset);
  if (!preset.empty()) cfg = TransformerConfig::preset(preset);
  obj.read("d_model", cfg.d_model);
  obj.read("heads", cfg.heads);
  obj.read("d_ff", cfg.d_ff);
  obj.read("blocks", cfg.blocks);
  obj.read("dropout", cfg.dropout);
  obj.read("max_len", cfg.max_len);
  obj.read("src_vocab", cfg.src_vocab);
  obj.read("tgt_vocab", cfg.tgt_vocab);
  obj.finish();
  return cfg;
}

json to_json(const ExperimentConfig& cfg) {
  json model = to_json(cfg.model);
  model["preset"] = cfg.model_preset;
  return json{
      {"id", cfg.id},
      {"variant", to_string(cfg.variant)},
      {"s", cfg.s},
      {"q_att", cfg.q_att},
      {"q_bo", cfg.q_bo},
      {"a", cfg.a},
      {"b", cfg.b},
      {"gamma", cfg.gamma},
      {"delta", cfg.delta},
      {"insert_dropout", cfg.insert_dropout},
      {"boost_reference", to_string(cfg.boost_reference)},
      {"inhibition_direction", to_string(cfg.inhibition_direction)},
      {"cross_attention_insert", cfg.cross_attention_insert},
      {"attn_mechanism", mechanism_or_null(cfg.attn_mechanism)},
      {"block_out_mechanism", mechanism_or_null(cfg.block_out_mechanism)},
      {"model", model},
      {"optimizer",
       {{"lr", cfg.optimizer.lr},
        {"beta1", cfg.optimizer.beta1},
        {"beta2", cfg.optimizer.beta2},
        {"eps", cfg.optimizer.eps}}},
      {"training",
       {{"steps", cfg.steps},
        {"batch_size", cfg.batch_size},
        {"max_len", cfg.max_len},
        {"seed", cfg.seed},
        {"checkpoint_interval_epochs", cfg.checkpoint_interval_epochs},
        {"eval_interval_epochs", cfg.eval_interval_epochs},
        {"eval_bleu_pairs", cfg.eval_bleu_pairs}}},
      {"data",
       {{"task", cfg.data.task},
        {"symbols", cfg.data.symbols},
        {"min_len", cfg.data.min_len},
        {"max_len", cfg.data.max_len},
        {"train_pairs", cfg.data.train_pairs},
        {"val_pairs", cfg.data.val_pairs},
        {"train_src", cfg.data.train_src},
        {"train_tgt", cfg.data.train_tgt},
        {"train_tsv", cfg.data.train_tsv},
        {"val_src", cfg.data.val_src},
        {"val_tgt", cfg.data.val_tgt},
        {"val_tsv", cfg.data.val_tsv},
        {"min_frequency", cfg.data.min_frequency}}},
  };
}

ExperimentConfig experiment_from_json(const json& j, ExperimentConfig base) {
  ExperimentConfig cfg = std::move(base);
  StrictObject obj(j, "");
  obj.read("id", cfg.id);
  obj.read_with("variant", cfg.variant, parse_variant);
  obj.read("s", cfg.s);
  obj.read("q_att", cfg.q_att);
  obj.read("q_bo", cfg.q_bo);
  obj.read("a", cfg.a);
  obj.read("b", cfg.b);
  obj.read("gamma", cfg.gamma);
  obj.read("delta", cfg.delta);
  obj.read("insert_dropout", cfg.insert_dropout);
  obj.read_with("boost_reference", cfg.boost_reference, parse_boost_reference);
  obj.read_with("inhibition_direction", cfg.inhibition_direction,
                parse_inhibition_direction);
  obj.read("cross_attention_insert", cfg.cross_attention_insert);
  read_optional_mechanism(obj, j, "attn_mechanism", cfg.attn_mechanism);
  read_optional_mechanism(obj, j, "block_out_mechanism", cfg.block_out_mechanism);

  if (const json* model = obj.child("model")) {
    // Preset first, then explicit fields, on top of the current values.
    StrictObject m(*model, "model");
    std::string preset;
    m.read("preset", preset);
    if (!preset.empty()) {
      try {
        cfg.model = TransformerConfig::preset(preset);
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("model.preset: ") + e.what());
      }
      cfg.model_preset = preset;
    }
    m.read("d_model", cfg.model.d_model);
    m.read("heads", cfg.model.heads);
    m.read("d_ff", cfg.model.d_ff);
    m.read("blocks", cfg.model.blocks);
    m.read("dropout", cfg.model.dropout);
    m.read("max_len", cfg.model.max_len);
    m.read("src_vocab", cfg.model.src_vocab);
    m.read("tgt_vocab", cfg.model.tgt_vocab);
    m.finish();
  }
  if (const json* opt = obj.child("optimizer")) {
    StrictObject o(*opt, "optimizer");
    o.read("lr", cfg.optimizer.lr);
    o.read("beta1", cfg.optimizer.beta1);
    o.read("beta2", cfg.optimizer.beta2);
    o.read("eps", cfg.optimizer.eps);
    o.finish();
  }
  if (const json* training = obj.child("training")) {
    StrictObject t(*training, "training");
    t.read("steps", cfg.steps);
    t.read("batch_size", cfg.batch_size);
    t.read("max_len", cfg.max_len);
    t.read("seed", cfg.seed);
    t.read("checkpoint_interval_epochs", cfg.checkpoint_interval_epochs);
    t.read("eval_interval_epochs", cfg.eval_interval_epochs);
    t.read("eval_bleu_pairs", cfg.eval_bleu_pairs);
    t.finish();
  }
  if (const json* data = obj.child("data")) {
    StrictObject d(*data, "data");
    d.read("task", cfg.data.task);
    d.read("symbols", cfg.data.symbols);
    d.read("min_len", cfg.data.min_len);
    d.read("max_len", cfg.data.max_len);
    d.read("train_pairs", cfg.data.train_pairs);
    d.read("val_pairs", cfg.data.val_pairs);
    d.read("train_src", cfg.data.train_src);
    d.read("train_tgt", cfg.data.train_tgt);
    d.read("train_tsv", cfg.data.train_tsv);
    d.read("val_src", cfg.data.val_src);
    d.read("val_tgt", cfg.data.val_tgt);
    d.read("val_tsv", cfg.data.val_tsv);
    d.read("min_frequency", cfg.data.min_frequency);
    d.finish();
  }
  obj.finish();
  return cfg;
}

CorpusSplits load_corpora(const DataConfig& data, std::uint64_t seed) {
  if (data.task == "copy" || data.task == "reverse") {
    const auto kind = parse_synthetic_kind(data.task);
    CorpusSplits splits{synthetic_task(kind, data.symbols, data.min_len,
                                       data.max_len, data.train_pairs,
                                       derive_seed(seed, 100)),
                        std::nullopt};
    if (data.val_pairs > 0) {
      splits.val = synthetic_task(kind, data.symbols, data.min_len, data.max_len,
                                  data.val_pairs, derive_seed(seed, 101));
    }
    return splits;
  }
  CorpusOptions options;
  options.min_frequency = data.min_frequency;
  CorpusSplits splits{data.train_tsv.empty()
                          ? load_parallel_corpus(data.train_src, data.train_tgt,
                                                 options)
                          : load_tsv_corpus(data.train_tsv, options),
                      std::nullopt};
  options.source_vocab = &splits.train.source_vocab;
  options.target_vocab = &splits.train.target_vocab;
  if (!data.val_tsv.empty()) {
    splits.val = load_tsv_corpus(data.val_tsv, options);
  } else if (!data.val_src.empty() && !data.val_tgt.empty()) {
    splits.val = load_parallel_corpus(data.val_src, data.val_tgt, options);
  }
  return splits;
}

}  // namespace homeostat
