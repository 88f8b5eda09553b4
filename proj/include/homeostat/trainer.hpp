#pragma once

// Training loop: Adam with a fixed learning rate, PAD-masked cross-entropy,
// per-epoch evaluation (teacher-forced loss, greedy-decode BLEU) and the
// five-slot checkpoint policy.

#include <array>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "homeostat/data.hpp"
#include "homeostat/experiment.hpp"
#include "homeostat/transformer.hpp"

namespace homeostat {

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  // Bias-corrected update of every parameter from its accumulated gradient.
  void step(Transformer& model);
  std::uint64_t steps() const { return t_; }

  std::string encode(Transformer& model) const;
  void decode(const std::string& payload, Transformer& model);

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

struct EvalOptions {
  std::size_t batch_size = 64;
  std::size_t max_len = 64;
  std::size_t bleu_pairs = 0;  // first N pairs used for BLEU; 0 = all
};

struct EvalResult {
  double loss = 0;
  double bleu = 0;
  double accuracy = 0;  // teacher-forced token accuracy
};

// Eval-mode loss and accuracy over the whole split, BLEU of greedy decodes
// against the (truncated) references.
EvalResult evaluate(Transformer& model, const ParallelCorpus& corpus,
                    const EvalOptions& options);

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;  // "train" or "val"
  double loss = 0;
  double bleu = 0;
  double accuracy = 0;
  std::optional<double> imi_running;  // IMI of the BLEU series so far
  double wall_time_s = 0;
};

// CSV with columns epoch,split,loss,bleu,imi_running,wall_time_s.
void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<EpochRecord>& records);
std::vector<EpochRecord> read_metrics_csv(const std::filesystem::path& path);

struct CheckpointSlot {
  std::string name;
  std::optional<double> value;  // criterion value at the saved epoch
  std::size_t epoch = 0;
  std::size_t step = 0;
  bool saved = false;
};

// best_train_loss, best_val_loss, best_train_bleu, best_val_bleu, last_epoch.
struct CheckpointSet {
  std::array<CheckpointSlot, 5> slots;
  CheckpointSet();
  CheckpointSlot& slot(const std::string& name);
  const CheckpointSlot& slot(const std::string& name) const;
};

struct TrainResult {
  CheckpointSet checkpoints;
  std::vector<double> train_bleu;  // per evaluated epoch
  std::vector<double> val_bleu;
  std::vector<EpochRecord> records;
};

class Trainer {
 public:
  Trainer(ExperimentConfig cfg, ParallelCorpus train,
          std::optional<ParallelCorpus> val = std::nullopt);

  // Trainer restored from a checkpoint written by save(), using the given
  // corpora (whose vocabularies must match the stored ones).
  static std::unique_ptr<Trainer> from_checkpoint(
      const std::filesystem::path& path, ParallelCorpus train,
      std::optional<ParallelCorpus> val = std::nullopt);

  // One optimizer step on the next batch. Throws NonFiniteLoss on
  // divergence.
  LossSummary step();

  // Runs until cfg.steps optimizer steps, evaluating on epoch boundaries and
  // maintaining the checkpoint slots. Files (checkpoints, metrics.csv) go to
  // `out_dir` when given.
  using Progress = std::function<void(const EpochRecord&)>;
  TrainResult run(const std::optional<std::filesystem::path>& out_dir,
                  const Progress& progress = {});

  void save(const std::filesystem::path& path);
  // Restores weights, optimizer, caches, generator and loop position.
  void load(const std::filesystem::path& path);

  Transformer& model() { return *model_; }
  const ExperimentConfig& config() const { return cfg_; }
  const ParallelCorpus& train_corpus() const { return train_; }
  std::size_t global_step() const { return step_; }
  std::size_t epochs_completed() const { return epoch_; }
  std::size_t batches_per_epoch() const;
  // Mean training-batch loss of every step so far.
  const std::vector<double>& loss_trajectory() const { return losses_; }
  const std::vector<EpochRecord>& records() const { return records_; }
  const CheckpointSet& checkpoints() const { return slots_; }

 private:
  void evaluate_epoch(std::size_t epoch, double wall_time);
  void save_point(const std::optional<std::filesystem::path>& out_dir,
                  std::size_t epoch);
  TrainResult result() const;
  double elapsed() const;

  ExperimentConfig cfg_;
  ParallelCorpus train_;
  std::optional<ParallelCorpus> val_;
  std::unique_ptr<Transformer> model_;
  Adam adam_;
  std::optional<BatchIterator> iterator_;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
  std::size_t batch_in_epoch_ = 0;
  std::vector<double> losses_;
  std::vector<EpochRecord> records_;
  CheckpointSet slots_;
  double wall_offset_ = 0;
  std::chrono::steady_clock::time_point started_;
};

// Model, vocabularies and configuration from a checkpoint, for evaluation
// and decoding.
struct LoadedModel {
  ExperimentConfig config;
  Vocabulary source_vocab;
  Vocabulary target_vocab;
  std::unique_ptr<Transformer> model;
};
LoadedModel load_model(const std::filesystem::path& path);

inline constexpr const char* kSlotNames[5] = {
    "best_train_loss", "best_val_loss", "best_train_bleu", "best_val_bleu",
    "last_epoch"};

}  // namespace homeostat
