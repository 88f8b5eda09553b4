#include "homeostat/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "homeostat/checkpoint.hpp"
#include "homeostat/errors.hpp"
#include "homeostat/metrics.hpp"

namespace homeostat {

using nlohmann::json;

namespace {

json vocab_json(const Vocabulary& src, const Vocabulary& tgt) {
  return json{{"source", src.content_tokens()}, {"target", tgt.content_tokens()}};
}

std::pair<Vocabulary, Vocabulary> vocab_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    return {Vocabulary::from_tokens(j.at("source").get<std::vector<std::string>>()),
            Vocabulary::from_tokens(j.at("target").get<std::vector<std::string>>())};
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("malformed vocabulary section: ") + e.what());
  }
}

ExperimentConfig config_from_checkpoint(const CheckpointFile& file) {
  try {
    return experiment_from_json(json::parse(file.get("config")));
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("malformed config section: ") + e.what());
  }
}

json record_json(const EpochRecord& r) {
  return json{{"epoch", r.epoch},
              {"split", r.split},
              {"loss", r.loss},
              {"bleu", r.bleu},
              {"accuracy", r.accuracy},
              {"imi_running", r.imi_running ? json(*r.imi_running) : json(nullptr)},
              {"wall_time_s", r.wall_time_s}};
}

EpochRecord record_from_json(const json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.split = j.at("split").get<std::string>();
  r.loss = j.at("loss").get<double>();
  r.bleu = j.at("bleu").get<double>();
  r.accuracy = j.at("accuracy").get<double>();
  if (!j.at("imi_running").is_null()) r.imi_running = j.at("imi_running").get<double>();
  r.wall_time_s = j.at("wall_time_s").get<double>();
  return r;
}

std::string parameter_norms(Transformer& model) {
  std::vector<std::pair<double, std::string>> norms;
  model.visit_parameters([&norms](Parameter& p) {
    norms.emplace_back(p.value.norm(), p.name);
  });
  std::sort(norms.begin(), norms.end(), [](const auto& a, const auto& b) {
    return !(a.first <= b.first);  // NaN first, then descending
  });
  std::ostringstream out;
  for (std::size_t i = 0; i < std::min<std::size_t>(norms.size(), 5); ++i) {
    out << (i ? ", " : "") << norms[i].second << "=" << norms[i].first;
  }
  return out.str();
}

std::vector<double> bleu_series(const std::vector<EpochRecord>& records,
                                const std::string& split) {
  std::vector<double> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r.bleu);
  }
  return out;
}

}  // namespace

void Adam::step(Transformer& model) {
  ++t_;
  const double correction1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double correction2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::size_t i = 0;
  model.visit_parameters([&](Parameter& p) {
    if (m_.size() <= i) {
      m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
    Matrix& m = m_[i];
    Matrix& v = v_[i];
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * p.grad;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= cfg_.lr * (m.array() / correction1) /
                       ((v.array() / correction2).sqrt() + cfg_.eps);
    ++i;
  });
}

std::string Adam::encode(Transformer& model) const {
  ByteWriter w;
  w.u64(t_);
  w.u32(static_cast<std::uint32_t>(m_.size()));
  std::size_t i = 0;
  model.visit_parameters([&](Parameter& p) {
    if (i < m_.size()) {
      w.matrix("m/" + p.name, m_[i]);
      w.matrix("v/" + p.name, v_[i]);
    }
    ++i;
  });
  return w.take();
}

void Adam::decode(const std::string& payload, Transformer& model) {
  ByteReader r(payload, "optimizer");
  t_ = r.u64();
  const std::uint32_t count = r.u32();
  m_.clear();
  v_.clear();
  std::size_t i = 0;
  model.visit_parameters([&](Parameter& p) {
    if (i++ >= count) return;
    m_.emplace_back(p.value.rows(), p.value.cols());
    v_.emplace_back(p.value.rows(), p.value.cols());
    r.matrix_into("m/" + p.name, m_.back());
    r.matrix_into("v/" + p.name, v_.back());
  });
  if (m_.size() != count || !r.done()) {
    throw CheckpointError("optimizer state does not match the model");
  }
}

EvalResult evaluate(Transformer& model, const ParallelCorpus& corpus,
                    const EvalOptions& options) {
  EvalResult result;
  if (corpus.size() == 0) return result;
  LossSummary total;
  BatchIterator batches(corpus, options.batch_size, options.max_len, std::nullopt);
  while (auto batch = batches.next()) total += model.evaluate(*batch);
  result.loss = total.mean_loss();
  result.accuracy = total.accuracy();

  const std::size_t n = options.bleu_pairs == 0
                            ? corpus.size()
                            : std::min(options.bleu_pairs, corpus.size());
  std::vector<TokenSeq> hyps;
  std::vector<TokenSeq> refs;
  for (std::size_t start = 0; start < n; start += options.batch_size) {
    std::vector<std::size_t> indices;
    for (std::size_t i = start; i < std::min(n, start + options.batch_size); ++i) {
      indices.push_back(i);
    }
    const Batch batch = make_batch(corpus, indices, options.max_len);
    // Room for EOS; hypotheses far longer than the source only lose BLEU.
    const std::size_t limit = std::min(options.max_len, 2 * batch.src_len + 10) + 1;
    for (auto& seq : model.greedy_decode(batch, limit)) {
      hyps.push_back(strip_eos(seq));
    }
    for (std::size_t i : indices) {
      const auto& target = corpus.pairs[i].target;
      refs.emplace_back(target.begin(),
                        target.begin() + static_cast<long>(std::min(
                                             target.size(), options.max_len)));
    }
  }
  result.bleu = bleu(hyps, refs);
  return result;
}

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<EpochRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,split,loss,bleu,imi_running,wall_time_s\n";
  out.precision(17);
  for (const auto& r : records) {
    out << r.epoch << ',' << r.split << ',' << r.loss << ',' << r.bleu << ',';
    if (r.imi_running) out << *r.imi_running;
    out << ',' << r.wall_time_s << '\n';
  }
}

std::vector<EpochRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "epoch,split,loss,bleu,imi_running,wall_time_s") {
    throw FormatError(path.string() + ": unexpected metrics header");
  }
  std::vector<EpochRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 6) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 6 columns");
    }
    try {
      EpochRecord r;
      r.epoch = std::stoul(cells[0]);
      r.split = cells[1];
      r.loss = std::stod(cells[2]);
      r.bleu = std::stod(cells[3]);
      if (!cells[4].empty()) r.imi_running = std::stod(cells[4]);
      r.wall_time_s = std::stod(cells[5]);
      records.push_back(r);
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": malformed number");
    }
  }
  return records;
}

CheckpointSet::CheckpointSet() {
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i].name = kSlotNames[i];
}

CheckpointSlot& CheckpointSet::slot(const std::string& name) {
  for (auto& s : slots) {
    if (s.name == name) return s;
  }
  throw InvalidInput("unknown checkpoint slot '" + name + "'");
}

const CheckpointSlot& CheckpointSet::slot(const std::string& name) const {
  return const_cast<CheckpointSet*>(this)->slot(name);
}

Trainer::Trainer(ExperimentConfig cfg, ParallelCorpus train,
                 std::optional<ParallelCorpus> val)
    : cfg_(std::move(cfg)),
      train_(std::move(train)),
      val_(std::move(val)),
      adam_(cfg_.optimizer),
      started_(std::chrono::steady_clock::now()) {
  cfg_.validate();
  if (train_.size() == 0) throw InvalidInput("trainer: training corpus is empty");
  cfg_.model.src_vocab = train_.source_vocab.size();
  cfg_.model.tgt_vocab = train_.target_vocab.size();
  model_ = std::make_unique<Transformer>(
      cfg_.resolved_model(cfg_.model.src_vocab, cfg_.model.tgt_vocab), cfg_.seed);
}

std::size_t Trainer::batches_per_epoch() const {
  return (train_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
}

LossSummary Trainer::step() {
  if (!iterator_) {
    iterator_.emplace(train_, cfg_.batch_size, cfg_.max_len,
                      derive_seed(cfg_.seed, 1000 + epoch_));
    iterator_->skip(batch_in_epoch_);
  }
  auto batch = iterator_->next();
  model_->zero_grad();
  const LossSummary summary = model_->forward_backward(*batch);
  const double loss = summary.mean_loss();
  if (!std::isfinite(loss)) {
    throw NonFiniteLoss("non-finite loss at step " + std::to_string(step_) +
                        " (epoch " + std::to_string(epoch_) +
                        "); largest parameter norms: " + parameter_norms(*model_));
  }
  adam_.step(*model_);
  losses_.push_back(loss);
  ++step_;
  if (++batch_in_epoch_ == batches_per_epoch()) {
    ++epoch_;
    batch_in_epoch_ = 0;
    iterator_.reset();
  }
  return summary;
}

double Trainer::elapsed() const {
  return wall_offset_ + std::chrono::duration<double>(
                            std::chrono::steady_clock::now() - started_)
                            .count();
}

void Trainer::evaluate_epoch(std::size_t epoch, double wall_time) {
  const EvalOptions options{cfg_.batch_size, cfg_.max_len, cfg_.eval_bleu_pairs};
  auto add = [&](const std::string& split, const ParallelCorpus& corpus) {
    const EvalResult r = evaluate(*model_, corpus, options);
    EpochRecord record{epoch, split, r.loss, r.bleu, r.accuracy, std::nullopt,
                       wall_time};
    auto series = bleu_series(records_, split);
    series.push_back(r.bleu);
    if (series.size() >= 2) record.imi_running = imi(series);
    records_.push_back(record);
  };
  add("train", train_);
  if (val_) add("val", *val_);
}

void Trainer::save_point(const std::optional<std::filesystem::path>& out_dir,
                         std::size_t epoch) {
  auto latest = [this](const std::string& split) -> const EpochRecord* {
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->split == split) return &*it;
    }
    return nullptr;
  };
  const EpochRecord* train = latest("train");
  const EpochRecord* val = latest("val");
  if (!val) val = train;  // no validation split: score on training data

  struct Criterion {
    const char* slot;
    std::optional<double> value;
    bool lower_is_better;
  };
  const Criterion criteria[] = {
      {"best_train_loss", train ? std::optional(train->loss) : std::nullopt, true},
      {"best_val_loss", val ? std::optional(val->loss) : std::nullopt, true},
      {"best_train_bleu", train ? std::optional(train->bleu) : std::nullopt, false},
      {"best_val_bleu", val ? std::optional(val->bleu) : std::nullopt, false},
      {"last_epoch", std::nullopt, false},
  };
  std::vector<std::string> to_write;
  for (const auto& c : criteria) {
    CheckpointSlot& slot = slots_.slot(c.slot);
    bool improve = !slot.saved || slot.name == std::string("last_epoch");
    if (!improve && c.value && slot.value) {
      improve = c.lower_is_better ? *c.value < *slot.value : *c.value > *slot.value;
    } else if (!improve && c.value && !slot.value) {
      improve = true;
    }
    if (!improve) continue;
    slot.value = c.value;
    slot.epoch = epoch;
    slot.step = step_;
    slot.saved = true;
    to_write.emplace_back(c.slot);
  }
  if (!out_dir) return;
  for (const auto& name : to_write) {
    save(*out_dir / ("ckpt_" + name + ".bin"));
  }
}

TrainResult Trainer::result() const {
  return {slots_, bleu_series(records_, "train"), bleu_series(records_, "val"),
          records_};
}

TrainResult Trainer::run(const std::optional<std::filesystem::path>& out_dir,
                         const Progress& progress) {
  if (out_dir) std::filesystem::create_directories(*out_dir);
  started_ = std::chrono::steady_clock::now();
  auto publish = [&](std::size_t from) {
    if (progress) {
      for (std::size_t i = from; i < records_.size(); ++i) progress(records_[i]);
    }
    if (out_dir) write_metrics_csv(*out_dir / "metrics.csv", records_);
  };

  if (cfg_.steps == 0 || step_ >= cfg_.steps) {
    if (step_ == 0) save_point(out_dir, 0);
    if (out_dir) write_metrics_csv(*out_dir / "metrics.csv", records_);
    return result();
  }

  std::size_t last_eval_step = static_cast<std::size_t>(-1);
  std::size_t last_save_step = static_cast<std::size_t>(-1);
  while (step_ < cfg_.steps) {
    step();
    if (batch_in_epoch_ != 0) continue;
    const std::size_t epoch = epoch_;
    const bool save = epoch % cfg_.checkpoint_interval_epochs == 0;
    if (save || epoch % cfg_.eval_interval_epochs == 0) {
      const std::size_t before = records_.size();
      evaluate_epoch(epoch, elapsed());
      last_eval_step = step_;
      publish(before);
    }
    if (save) {
      save_point(out_dir, epoch);
      last_save_step = step_;
    }
  }
  if (last_save_step != step_) {
    const std::size_t epoch = epoch_ + (batch_in_epoch_ > 0 ? 1 : 0);
    if (last_eval_step != step_) {
      const std::size_t before = records_.size();
      evaluate_epoch(epoch, elapsed());
      publish(before);
    }
    save_point(out_dir, epoch);
  }
  return result();
}

void Trainer::save(const std::filesystem::path& path) {
  CheckpointFile file;
  file.set("config", to_json(cfg_).dump());
  file.set("vocab", vocab_json(train_.source_vocab, train_.target_vocab).dump());
  file.set("weights", encode_weights(*model_));
  file.set("optimizer", adam_.encode(*model_));
  file.set("caches", encode_caches(*model_));
  file.set("rng", model_->rng().state());
  json slots = json::array();
  for (const auto& s : slots_.slots) {
    slots.push_back({{"name", s.name},
                     {"value", s.value ? json(*s.value) : json(nullptr)},
                     {"epoch", s.epoch},
                     {"step", s.step},
                     {"saved", s.saved}});
  }
  json records = json::array();
  for (const auto& r : records_) records.push_back(record_json(r));
  file.set("trainer", json{{"step", step_},
                           {"epoch", epoch_},
                           {"batch_in_epoch", batch_in_epoch_},
                           {"wall_time_s", elapsed()},
                           {"losses", losses_},
                           {"records", records},
                           {"slots", slots}}
                          .dump());
  file.write(path);
}

void Trainer::load(const std::filesystem::path& path) {
  const CheckpointFile file = CheckpointFile::read(path);
  const auto [src, tgt] = vocab_from_json(file.get("vocab"));
  if (!(src == train_.source_vocab) || !(tgt == train_.target_vocab)) {
    throw CheckpointError("vocabulary differs from the training corpus");
  }
  decode_weights(file.get("weights"), *model_);
  adam_.decode(file.get("optimizer"), *model_);
  decode_caches(file.get("caches"), *model_);
  try {
    model_->rng().set_state(file.get("rng"));
    const json t = json::parse(file.get("trainer"));
    step_ = t.at("step").get<std::size_t>();
    epoch_ = t.at("epoch").get<std::size_t>();
    batch_in_epoch_ = t.at("batch_in_epoch").get<std::size_t>();
    wall_offset_ = t.at("wall_time_s").get<double>();
    losses_ = t.at("losses").get<std::vector<double>>();
    records_.clear();
    for (const auto& r : t.at("records")) records_.push_back(record_from_json(r));
    const auto& slots = t.at("slots");
    for (std::size_t i = 0; i < slots_.slots.size(); ++i) {
      auto& s = slots_.slots[i];
      const auto& j = slots.at(i);
      s.value = j.at("value").is_null() ? std::nullopt
                                        : std::optional(j.at("value").get<double>());
      s.epoch = j.at("epoch").get<std::size_t>();
      s.step = j.at("step").get<std::size_t>();
      s.saved = j.at("saved").get<bool>();
    }
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("malformed trainer state: ") + e.what());
  }
  iterator_.reset();
  started_ = std::chrono::steady_clock::now();
}

std::unique_ptr<Trainer> Trainer::from_checkpoint(
    const std::filesystem::path& path, ParallelCorpus train,
    std::optional<ParallelCorpus> val) {
  const ExperimentConfig cfg = config_from_checkpoint(CheckpointFile::read(path));
  auto trainer = std::make_unique<Trainer>(cfg, std::move(train), std::move(val));
  trainer->load(path);
  return trainer;
}

LoadedModel load_model(const std::filesystem::path& path) {
  const CheckpointFile file = CheckpointFile::read(path);
  LoadedModel loaded;
  loaded.config = config_from_checkpoint(file);
  auto [src, tgt] = vocab_from_json(file.get("vocab"));
  loaded.source_vocab = std::move(src);
  loaded.target_vocab = std::move(tgt);
  TransformerConfig model_cfg;
  try {
    model_cfg = loaded.config.resolved_model(loaded.source_vocab.size(),
                                             loaded.target_vocab.size());
    loaded.model = std::make_unique<Transformer>(model_cfg, loaded.config.seed);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("invalid stored config: ") + e.what());
  }
  decode_weights(file.get("weights"), *loaded.model);
  decode_caches(file.get("caches"), *loaded.model);
  try {
    loaded.model->rng().set_state(file.get("rng"));
  } catch (const InvalidInput& e) {
    throw CheckpointError(e.what());
  }
  return loaded;
}

}  // namespace homeostat
