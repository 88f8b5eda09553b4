#include "homeostat/cli.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <functional>
#include <memory>

#include "CLI11.hpp"

#include "homeostat/errors.hpp"
#include "homeostat/metrics.hpp"
#include "homeostat/report.hpp"
#include "homeostat/trainer.hpp"

namespace homeostat {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Collects options that were given on the command line into a JSON patch.
class PatchBuilder {
 public:
  template <typename T>
  CLI::Option* add(CLI::App& app, const std::string& flag,
                   const std::string& pointer, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app.add_option(flag, *value, help);
    writers_.push_back([opt, value, pointer](json& patch) {
      if (opt->count() > 0) patch[json::json_pointer(pointer)] = *value;
    });
    return opt;
  }

  json build() const {
    json patch = json::object();
    for (const auto& write : writers_) write(patch);
    return patch;
  }

 private:
  std::vector<std::function<void(json&)>> writers_;
};

std::string utc_timestamp() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

json record_json(const EpochRecord& r) {
  return json{{"epoch", r.epoch},
              {"loss", r.loss},
              {"bleu", r.bleu},
              {"accuracy", r.accuracy}};
}

json final_metrics(const Trainer& trainer) {
  json metrics = json::object();
  std::vector<double> train_bleu;
  for (const auto& r : trainer.records()) {
    metrics[r.split] = record_json(r);  // last record per split wins
    if (r.split == "train") train_bleu.push_back(r.bleu);
  }
  metrics["steps"] = trainer.global_step();
  metrics["epochs"] = trainer.epochs_completed();
  metrics["imi_train"] =
      train_bleu.size() >= 2 ? json(imi(train_bleu)) : json(nullptr);
  return metrics;
}

struct TrainArgs {
  std::string config;
  std::string out;
  PatchBuilder patch;
};

void add_train_options(CLI::App& cmd, TrainArgs& args) {
  cmd.add_option("--config", args.config, "JSON experiment config")
      ->check(CLI::ExistingFile);
  cmd.add_option("--out", args.out, "Run directory")->required();
  auto& p = args.patch;
  p.add<std::string>(cmd, "--id", "/id", "Experiment id (default: run directory name)");
  p.add<std::string>(cmd, "--variant", "/variant", "A|B|C|D|E");
  p.add<double>(cmd, "--s", "/s", "Sparsity coefficient in (0,1)");
  p.add<std::size_t>(cmd, "--q-att", "/q_att", "Attention cache capacity");
  p.add<std::size_t>(cmd, "--q-bo", "/q_bo", "Block-output cache capacity");
  p.add<double>(cmd, "--a", "/a", "Inhibition upper bound");
  p.add<double>(cmd, "--b", "/b", "Inhibition lower bound");
  p.add<double>(cmd, "--gamma", "/gamma", "Inhibition exponent");
  p.add<double>(cmd, "--delta", "/delta", "Median adjustment tolerance");
  p.add<double>(cmd, "--insert-dropout", "/insert_dropout",
                "Drop probability of dropout inserts");
  p.add<std::string>(cmd, "--boost-reference", "/boost_reference",
                     "numerator|statistics");
  p.add<std::string>(cmd, "--inhibition-direction", "/inhibition_direction",
                     "rarity|frequency");
  p.add<bool>(cmd, "--cross-attention-insert", "/cross_attention_insert",
              "Use the attention insert in cross-attention");
  p.add<std::string>(cmd, "--attn-mechanism", "/attn_mechanism",
                     "Override the attention insert");
  p.add<std::string>(cmd, "--block-out-mechanism", "/block_out_mechanism",
                     "Override the block-output insert");
  p.add<std::string>(cmd, "--model", "/model/preset", "micro|small|base|big");
  p.add<std::size_t>(cmd, "--d-model", "/model/d_model", "Model width");
  p.add<std::size_t>(cmd, "--heads", "/model/heads", "Attention heads");
  p.add<std::size_t>(cmd, "--d-ff", "/model/d_ff", "Feed-forward width");
  p.add<std::size_t>(cmd, "--blocks", "/model/blocks", "Encoder/decoder blocks");
  p.add<double>(cmd, "--dropout", "/model/dropout", "Dropout rate");
  p.add<double>(cmd, "--lr", "/optimizer/lr", "Adam learning rate");
  p.add<std::size_t>(cmd, "--steps", "/training/steps", "Optimizer steps");
  p.add<std::size_t>(cmd, "--batch-size", "/training/batch_size", "Sentence pairs per batch");
  p.add<std::size_t>(cmd, "--max-len", "/training/max_len", "Sequence truncation length");
  p.add<std::uint64_t>(cmd, "--seed", "/training/seed", "Random seed");
  p.add<std::size_t>(cmd, "--checkpoint-interval", "/training/checkpoint_interval_epochs",
                     "Epochs between checkpoint saves");
  p.add<std::size_t>(cmd, "--eval-interval", "/training/eval_interval_epochs",
                     "Epochs between evaluations");
  p.add<std::size_t>(cmd, "--eval-bleu-pairs", "/training/eval_bleu_pairs",
                     "Pairs decoded for BLEU (0 = all)");
  p.add<std::string>(cmd, "--task", "/data/task", "copy|reverse|text");
  p.add<std::size_t>(cmd, "--symbols", "/data/symbols", "Synthetic alphabet size");
  p.add<std::size_t>(cmd, "--min-seq-len", "/data/min_len", "Synthetic minimum length");
  p.add<std::size_t>(cmd, "--max-seq-len", "/data/max_len", "Synthetic maximum length");
  p.add<std::size_t>(cmd, "--train-pairs", "/data/train_pairs", "Synthetic training pairs");
  p.add<std::size_t>(cmd, "--val-pairs", "/data/val_pairs", "Synthetic validation pairs");
  p.add<std::string>(cmd, "--train-src", "/data/train_src", "Training source file");
  p.add<std::string>(cmd, "--train-tgt", "/data/train_tgt", "Training target file");
  p.add<std::string>(cmd, "--train-tsv", "/data/train_tsv", "Training TSV file");
  p.add<std::string>(cmd, "--val-src", "/data/val_src", "Validation source file");
  p.add<std::string>(cmd, "--val-tgt", "/data/val_tgt", "Validation target file");
  p.add<std::string>(cmd, "--val-tsv", "/data/val_tsv", "Validation TSV file");
  p.add<std::size_t>(cmd, "--min-frequency", "/data/min_frequency",
                     "Vocabulary frequency cutoff");
}

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  const json patch = args.patch.build();
  std::optional<fs::path> config_file;
  if (!args.config.empty()) config_file = args.config;
  ExperimentConfig cfg = resolve_experiment(config_file, patch);

  const fs::path out_dir = args.out;
  bool id_given = patch.contains("id");
  if (!id_given && config_file) {
    std::ifstream in(*config_file);
    id_given = json::parse(in, nullptr, false).contains("id");
  }
  if (!id_given) {
    const std::string name = fs::absolute(out_dir).lexically_normal().filename().string();
    if (!name.empty()) cfg.id = name;
  }
  cfg.validate();

  CorpusSplits corpora = load_corpora(cfg.data, cfg.seed);
  fs::create_directories(out_dir);
  corpora.train.source_vocab.save(out_dir / "src_vocab.txt");
  corpora.train.target_vocab.save(out_dir / "tgt_vocab.txt");

  json manifest{{"experiment_id", cfg.id},
                {"config", to_json(cfg)},
                {"corpus_fingerprint", corpora.train.fingerprint()},
                {"val_fingerprint", corpora.val ? json(corpora.val->fingerprint())
                                                : json(nullptr)},
                {"started_at", utc_timestamp()},
                {"finished_at", nullptr},
                {"status", "running"}};
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");

  Trainer trainer(cfg, std::move(corpora.train), std::move(corpora.val));
  manifest["parameters"] = trainer.model().num_parameters();
  err << "training " << cfg.id << ": variant " << to_string(cfg.variant) << ", "
      << trainer.model().num_parameters() << " parameters, "
      << trainer.batches_per_epoch() << " batches/epoch, " << cfg.steps
      << " steps\n";
  const auto result = trainer.run(out_dir, [&](const EpochRecord& r) {
    err << "epoch " << r.epoch << ' ' << r.split << " loss=" << r.loss
        << " bleu=" << r.bleu << " acc=" << r.accuracy << '\n';
  });

  manifest["finished_at"] = utc_timestamp();
  manifest["status"] = "complete";
  manifest["final_metrics"] = final_metrics(trainer);
  json slots = json::object();
  for (const auto& slot : result.checkpoints.slots) {
    slots[slot.name] = json{{"file", "ckpt_" + slot.name + ".bin"},
                            {"epoch", slot.epoch},
                            {"step", slot.step},
                            {"value", slot.value ? json(*slot.value) : json(nullptr)}};
  }
  manifest["checkpoints"] = slots;
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
  out << json{{"experiment_id", cfg.id}, {"out", out_dir.string()},
              {"final_metrics", manifest["final_metrics"]}}.dump()
      << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string split = "val";
  std::string src, tgt, tsv;
  std::size_t bleu_pairs = 0;
  std::size_t batch_size = 64;
};

// Corpus named by the eval arguments, encoded with the checkpoint's
// vocabularies.
ParallelCorpus eval_corpus(const EvalArgs& args, const LoadedModel& loaded) {
  CorpusOptions options;
  options.source_vocab = &loaded.source_vocab;
  options.target_vocab = &loaded.target_vocab;
  if (!args.tsv.empty()) return load_tsv_corpus(args.tsv, options);
  if (!args.src.empty() || !args.tgt.empty()) {
    if (args.src.empty() || args.tgt.empty()) {
      throw ConfigError("--src and --tgt must be given together");
    }
    return load_parallel_corpus(args.src, args.tgt, options);
  }
  const DataConfig& data = loaded.config.data;
  if (args.split != "train" && args.split != "val") {
    throw ConfigError("--split must be train or val");
  }
  if (data.task != "text") {
    auto splits = load_corpora(data, loaded.config.seed);
    if (args.split == "train") return std::move(splits.train);
    if (!splits.val) throw ConfigError("the run has no validation split");
    return std::move(*splits.val);
  }
  if (args.split == "train") {
    return data.train_tsv.empty()
               ? load_parallel_corpus(data.train_src, data.train_tgt, options)
               : load_tsv_corpus(data.train_tsv, options);
  }
  if (!data.val_tsv.empty()) return load_tsv_corpus(data.val_tsv, options);
  if (data.val_src.empty()) throw ConfigError("the run has no validation split");
  return load_parallel_corpus(data.val_src, data.val_tgt, options);
}

int cmd_eval(const EvalArgs& args, std::ostream& out) {
  LoadedModel loaded = load_model(args.checkpoint);
  const ParallelCorpus corpus = eval_corpus(args, loaded);
  EvalOptions options;
  options.batch_size = args.batch_size;
  options.max_len = loaded.config.max_len;
  options.bleu_pairs = args.bleu_pairs;
  const EvalResult r = evaluate(*loaded.model, corpus, options);
  out << json{{"pairs", corpus.size()},
              {"loss", r.loss},
              {"bleu", r.bleu},
              {"token_accuracy", r.accuracy}}.dump()
      << '\n';
  return kExitOk;
}

struct DecodeArgs {
  std::string checkpoint;
  std::string input;
  std::size_t max_len = 0;
  std::size_t batch_size = 32;
};

int cmd_decode(const DecodeArgs& args, std::ostream& out) {
  LoadedModel loaded = load_model(args.checkpoint);
  std::ifstream in(args.input);
  if (!in) throw FormatError("cannot open " + args.input);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  const std::size_t max_len = args.max_len ? args.max_len : loaded.config.max_len;
  ParallelCorpus corpus;
  corpus.source_vocab = loaded.source_vocab;
  corpus.target_vocab = loaded.target_vocab;
  for (const auto& line : lines) {
    corpus.pairs.push_back({loaded.source_vocab.encode(tokenize(line)), {}});
  }
  std::vector<std::string> translations(lines.size());
  std::vector<std::size_t> pending;
  auto flush = [&] {
    if (pending.empty()) return;
    const Batch batch = make_batch(corpus, pending, max_len);
    const auto decoded = loaded.model->greedy_decode(batch, max_len + 1);
    for (std::size_t i = 0; i < pending.size(); ++i) {
      translations[pending[i]] = detokenize(loaded.target_vocab.decode(decoded[i]));
    }
    pending.clear();
  };
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (corpus.pairs[i].source.empty()) continue;
    pending.push_back(i);
    if (pending.size() == args.batch_size) flush();
  }
  flush();
  for (std::size_t i = 0; i < lines.size(); ++i) {
    out << json{{"line", i + 1}, {"source", lines[i]},
                {"translation", translations[i]}}.dump()
        << '\n';
  }
  return kExitOk;
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string csv = "report.csv";
  std::string svg = "report.svg";
  std::string split = "val";
};

int cmd_report(const ReportArgs& args, std::ostream& out, std::ostream& err) {
  std::vector<fs::path> paths(args.runs.begin(), args.runs.end());
  const auto runs = discover_runs(paths);
  if (runs.empty()) {
    err << "report: no runs found\n";
    return kExitFailure;
  }
  if (args.split != "train" && args.split != "val") {
    throw ConfigError("--split must be train or val");
  }
  write_text(args.csv, report_csv(runs, args.split));
  write_text(args.svg, report_svg(runs, args.split));
  out << json{{"runs", runs.size()}, {"csv", args.csv}, {"svg", args.svg}}.dump()
      << '\n';
  return kExitOk;
}

}  // namespace

ExperimentConfig resolve_experiment(const std::optional<fs::path>& config_file,
                                    const json& flag_patch) {
  ExperimentConfig cfg;
  if (config_file) {
    std::ifstream in(*config_file);
    if (!in) throw ConfigError("cannot open config " + config_file->string());
    json file;
    try {
      file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError(config_file->string() + ": " + e.what());
    }
    cfg = experiment_from_json(file, cfg);
  }
  return experiment_from_json(flag_patch, cfg);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"Homeostatic sparsity for Transformer training"};
  app.name(args.empty() ? "homeostat" : args.front());
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train one experiment");
  add_train_options(*train_cmd, train);

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--ckpt", eval.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--split", eval.split, "train|val from the run's data config");
  eval_cmd->add_option("--src", eval.src, "Source file");
  eval_cmd->add_option("--tgt", eval.tgt, "Target file");
  eval_cmd->add_option("--tsv", eval.tsv, "TSV file");
  eval_cmd->add_option("--bleu-pairs", eval.bleu_pairs, "Pairs decoded for BLEU (0 = all)");
  eval_cmd->add_option("--batch-size", eval.batch_size, "Evaluation batch size")
      ->check(CLI::PositiveNumber);

  DecodeArgs decode;
  auto* decode_cmd = app.add_subcommand("decode", "Greedy-decode sentences");
  decode_cmd->add_option("--ckpt", decode.checkpoint, "Checkpoint file")->required();
  decode_cmd->add_option("--input", decode.input, "One source sentence per line")
      ->required();
  decode_cmd->add_option("--max-len", decode.max_len, "Maximum output length");
  decode_cmd->add_option("--batch-size", decode.batch_size, "Decoding batch size")
      ->check(CLI::PositiveNumber);

  ReportArgs report;
  auto* report_cmd = app.add_subcommand("report", "Summarize runs");
  report_cmd->add_option("runs", report.runs, "Run directories or their parents")
      ->required();
  report_cmd->add_option("--csv", report.csv, "CSV output path");
  report_cmd->add_option("--svg", report.svg, "SVG output path");
  report_cmd->add_option("--split", report.split, "BLEU split to plot: train|val");

  std::vector<std::string> reversed(args.size() > 1 ? args.begin() + 1 : args.end(),
                                    args.end());
  std::reverse(reversed.begin(), reversed.end());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train, out, err);
    if (eval_cmd->parsed()) return cmd_eval(eval, out);
    if (decode_cmd->parsed()) return cmd_decode(decode, out);
    if (report_cmd->parsed()) return cmd_report(report, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace homeostat
