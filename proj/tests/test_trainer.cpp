#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "homeostat/checkpoint.hpp"
#include "homeostat/errors.hpp"
#include "homeostat/trainer.hpp"

using namespace homeostat;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("homeostat_trainer_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ExperimentConfig small_config(Variant v = Variant::E) {
  ExperimentConfig cfg;
  cfg.variant = v;
  cfg.model.d_model = 8;
  cfg.model.heads = 2;
  cfg.model.d_ff = 16;
  cfg.model.blocks = 1;
  cfg.q_att = 4;
  cfg.q_bo = 3;
  cfg.batch_size = 4;
  cfg.steps = 10;
  cfg.seed = 5;
  cfg.checkpoint_interval_epochs = 2;
  cfg.eval_bleu_pairs = 0;
  return cfg;
}

ParallelCorpus small_corpus(std::size_t n = 12) {
  return synthetic_task(SyntheticKind::copy, 6, 1, 5, n, 1);
}

std::vector<Matrix> weights(Transformer& model) {
  std::vector<Matrix> out;
  model.visit_parameters([&](Parameter& p) { out.push_back(p.value); });
  return out;
}

}  // namespace

TEST_CASE("adam matches the bias-corrected update rule") {
  auto cfg = small_config(Variant::A);
  cfg.optimizer.lr = 0.01;
  const auto corpus = small_corpus();
  Transformer model(cfg.resolved_model(corpus.source_vocab.size(), corpus.target_vocab.size()), 1);
  Adam adam(cfg.optimizer);
  const Batch batch = make_batch(corpus, {0, 1, 2, 3}, 16);

  std::vector<Matrix> m, v;
  model.visit_parameters([&](Parameter& p) {
    m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  });
  for (int t = 1; t <= 3; ++t) {
    model.zero_grad();
    model.forward_backward(batch);
    std::vector<Matrix> expected;
    std::size_t i = 0;
    model.visit_parameters([&](Parameter& p) {
      m[i] = 0.9 * m[i] + 0.1 * p.grad;
      v[i] = 0.999 * v[i] + 0.001 * p.grad.cwiseProduct(p.grad);
      const Matrix mhat = m[i] / (1 - std::pow(0.9, t));
      const Matrix vhat = v[i] / (1 - std::pow(0.999, t));
      expected.push_back(p.value.array() - 0.01 * mhat.array() / (vhat.array().sqrt() + 1e-8));
      ++i;
    });
    adam.step(model);
    CHECK(adam.steps() == static_cast<std::uint64_t>(t));
    const auto got = weights(model);
    for (std::size_t k = 0; k < got.size(); ++k)
      CHECK((got[k] - expected[k]).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("checkpoint weights round trip bit-exactly") {
  TempDir dir;
  const auto cfg = small_config();
  Trainer trainer(cfg, small_corpus());
  for (int i = 0; i < 3; ++i) trainer.step();
  trainer.save(dir.path / "c.bin");

  Trainer other(cfg, small_corpus());
  other.load(dir.path / "c.bin");
  CHECK(weights(other.model()) == weights(trainer.model()));
  CHECK(encode_caches(other.model()) == encode_caches(trainer.model()));
  CHECK(other.model().rng().state() == trainer.model().rng().state());
  CHECK(other.global_step() == 3);
}

TEST_CASE("loading into a different shape is a checkpoint error") {
  TempDir dir;
  const auto cfg = small_config();
  Trainer trainer(cfg, small_corpus());
  trainer.save(dir.path / "c.bin");
  const auto file = CheckpointFile::read(dir.path / "c.bin");
  auto wide = cfg;
  wide.model.d_model = 12;
  Trainer other(wide, small_corpus());
  try {
    decode_weights(file.get("weights"), other.model());
    FAIL("shape mismatch not detected");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("shape mismatch") != std::string::npos);
  }
}

TEST_CASE("damaged checkpoint files are rejected") {
  TempDir dir;
  Trainer trainer(small_config(), small_corpus());
  const auto path = dir.path / "c.bin";
  trainer.save(path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& data) {
    std::ofstream(path, std::ios::binary | std::ios::trunc) << data;
  };
  std::string flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  write(flipped);
  CHECK_THROWS_AS(CheckpointFile::read(path), CheckpointError);
  write(bytes.substr(0, bytes.size() - 9));
  CHECK_THROWS_AS(CheckpointFile::read(path), CheckpointError);
  write("not a checkpoint at all");
  CHECK_THROWS_AS(CheckpointFile::read(path), CheckpointError);
  CHECK_THROWS_AS(CheckpointFile::read(dir.path / "missing.bin"), CheckpointError);
  CHECK_THROWS_AS(load_model(path), CheckpointError);
}

TEST_CASE("resumed training continues the same trajectory") {
  for (Variant v : {Variant::A, Variant::B, Variant::D, Variant::E}) {
    CAPTURE(to_string(v));
    TempDir dir;
    auto cfg = small_config(v);
    cfg.steps = 100;
    Trainer straight(cfg, small_corpus());
    for (int i = 0; i < 100; ++i) straight.step();

    Trainer first(cfg, small_corpus());
    for (int i = 0; i < 50; ++i) first.step();
    first.save(dir.path / "half.bin");
    auto resumed = Trainer::from_checkpoint(dir.path / "half.bin", small_corpus());
    for (int i = 0; i < 50; ++i) resumed->step();

    CHECK(weights(resumed->model()) == weights(straight.model()));
    CHECK(encode_caches(resumed->model()) == encode_caches(straight.model()));
    CHECK(resumed->loss_trajectory() == straight.loss_trajectory());
  }
}

TEST_CASE("resuming with a different corpus vocabulary fails") {
  TempDir dir;
  Trainer trainer(small_config(), small_corpus());
  trainer.save(dir.path / "c.bin");
  CHECK_THROWS_AS(Trainer::from_checkpoint(dir.path / "c.bin",
                                           synthetic_task(SyntheticKind::copy, 7, 1, 5, 12, 1)),
                  CheckpointError);
}

TEST_CASE("zero steps keeps the initial weights and records nothing") {
  TempDir dir;
  auto cfg = small_config();
  cfg.steps = 0;
  Trainer trainer(cfg, small_corpus());
  const auto initial = weights(trainer.model());
  const auto result = trainer.run(dir.path);
  CHECK(weights(trainer.model()) == initial);
  CHECK(result.train_bleu.empty());
  CHECK(result.records.empty());
  CHECK(fs::exists(dir.path / "ckpt_last_epoch.bin"));
  CHECK(fs::exists(dir.path / "metrics.csv"));
}

TEST_CASE("same seed gives identical runs") {
  auto cfg = small_config(Variant::D);
  cfg.steps = 20;
  Trainer a(cfg, small_corpus()), b(cfg, small_corpus());
  a.run(std::nullopt);
  b.run(std::nullopt);
  CHECK(weights(a.model()) == weights(b.model()));
  CHECK(a.loss_trajectory() == b.loss_trajectory());
  cfg.seed = 6;
  Trainer c(cfg, small_corpus());
  c.run(std::nullopt);
  CHECK(weights(c.model()) != weights(a.model()));
}

TEST_CASE("evaluation is deterministic and leaves the model untouched") {
  Trainer trainer(small_config(Variant::E), small_corpus());
  for (int i = 0; i < 5; ++i) trainer.step();
  const auto before = encode_caches(trainer.model());
  const auto state = trainer.model().rng().state();
  const EvalOptions opts{.batch_size = 5, .max_len = 16, .bleu_pairs = 0};
  const auto x = evaluate(trainer.model(), trainer.train_corpus(), opts);
  const auto y = evaluate(trainer.model(), trainer.train_corpus(), opts);
  CHECK(x.loss == y.loss);
  CHECK(x.bleu == y.bleu);
  CHECK(x.accuracy == y.accuracy);
  CHECK(encode_caches(trainer.model()) == before);
  CHECK(trainer.model().rng().state() == state);
  // The batch size only changes how work is grouped.
  const auto z = evaluate(trainer.model(), trainer.train_corpus(), {.batch_size = 3, .max_len = 16});
  CHECK(z.loss == doctest::Approx(x.loss).epsilon(1e-12));
  CHECK(z.bleu == doctest::Approx(x.bleu).epsilon(1e-12));
}

TEST_CASE("untrained model scores near zero BLEU") {
  const auto corpus = synthetic_task(SyntheticKind::copy, 16, 4, 10, 64, 2);
  auto cfg = small_config(Variant::A);
  cfg.model = TransformerConfig::preset("micro");
  Trainer trainer(cfg, corpus);
  CHECK(evaluate(trainer.model(), corpus, {}).bleu < 0.05);
}

TEST_CASE("a memorizing model scores near one BLEU on its training data") {
  const auto corpus = synthetic_task(SyntheticKind::copy, 6, 2, 5, 8, 3);
  auto cfg = small_config(Variant::A);
  cfg.model = TransformerConfig::preset("micro");
  cfg.optimizer.lr = 3e-3;
  cfg.batch_size = 8;
  cfg.steps = 400;
  Trainer trainer(cfg, corpus);
  trainer.run(std::nullopt);
  const auto result = evaluate(trainer.model(), corpus, {});
  CHECK(result.bleu >= 0.95);
  CHECK(result.accuracy >= 0.99);
}

TEST_CASE("run writes five checkpoint slots and the metrics log") {
  TempDir dir;
  auto cfg = small_config(Variant::E);
  cfg.steps = 21;  // 3 batches per epoch: 7 epochs
  const auto val = synthetic_task(SyntheticKind::copy, 6, 1, 5, 5, 9);
  ParallelCorpus val_split = val;
  val_split.source_vocab = small_corpus().source_vocab;
  val_split.target_vocab = small_corpus().target_vocab;
  Trainer trainer(cfg, small_corpus(), val_split);
  REQUIRE(trainer.batches_per_epoch() == 3);
  std::vector<EpochRecord> seen;
  const auto result = trainer.run(dir.path, [&](const EpochRecord& r) { seen.push_back(r); });
  for (const char* name : kSlotNames) {
    CHECK(fs::exists(dir.path / (std::string("ckpt_") + name + ".bin")));
    CHECK(result.checkpoints.slot(name).saved);
  }
  CHECK(result.checkpoints.slot("last_epoch").epoch == 7);
  CHECK(result.train_bleu.size() == 7);
  CHECK(result.val_bleu.size() == 7);
  CHECK(seen.size() == result.records.size());

  const auto records = read_metrics_csv(dir.path / "metrics.csv");
  REQUIRE(records.size() == result.records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(records[i].epoch == result.records[i].epoch);
    CHECK(records[i].split == result.records[i].split);
    CHECK(records[i].loss == doctest::Approx(result.records[i].loss));
    CHECK(records[i].bleu == doctest::Approx(result.records[i].bleu));
  }
  std::ifstream csv(dir.path / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "epoch,split,loss,bleu,imi_running,wall_time_s");

  // Best-loss slot holds the minimum train loss among the saving epochs.
  double best = 1e300;
  for (const auto& r : result.records)
    if (r.split == "train" && (r.epoch % 2 == 0 || r.epoch == 7)) best = std::min(best, r.loss);
  CHECK(*result.checkpoints.slot("best_train_loss").value == best);

  const auto loaded = load_model(dir.path / "ckpt_last_epoch.bin");
  CHECK(weights(*loaded.model) == weights(trainer.model()));
  // The stored configuration records the vocabulary sizes of the corpus.
  auto expected = cfg;
  expected.model.src_vocab = expected.model.tgt_vocab = 10;
  CHECK(loaded.config == expected);
}
