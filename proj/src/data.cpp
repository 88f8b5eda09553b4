#include "homeostat/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

#include "homeostat/errors.hpp"

namespace homeostat {

namespace {

const std::vector<std::string> kReservedNames = {"<pad>", "<bos>", "<eos>",
                                                 "<unk>"};

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' ||
         c == '\f';
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  if (lines.empty()) throw FormatError(path.string() + " is empty");
  return lines;
}

class Fnv1a {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  void text(const std::string& s) {
    bytes(s.data(), s.size());
    bytes("\n", 1);
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

}  // namespace

std::vector<std::string> tokenize(std::string_view line) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : line) {
    if (is_space(c)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
      continue;
    }
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    current.push_back(c);
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

Vocabulary::Vocabulary() : tokens_(kReservedNames) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    index_.emplace(tokens_[i], static_cast<TokenId>(i));
  }
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  Vocabulary vocab;
  for (const auto& t : tokens) {
    if (t.empty() || std::any_of(t.begin(), t.end(), is_space)) {
      throw FormatError("vocabulary: token '" + t + "' is empty or contains whitespace");
    }
    const auto id = static_cast<TokenId>(vocab.tokens_.size());
    if (!vocab.index_.emplace(t, id).second) {
      throw FormatError("vocabulary: duplicate or reserved token '" + t + "'");
    }
    vocab.tokens_.push_back(t);
  }
  return vocab;
}

Vocabulary Vocabulary::build(
    const std::vector<std::vector<std::string>>& sentences,
    std::size_t min_frequency) {
  std::map<std::string, std::size_t> counts;
  for (const auto& sentence : sentences) {
    for (const auto& t : sentence) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [token, n] : counts) {
    const bool reserved = std::find(kReservedNames.begin(), kReservedNames.end(),
                                    token) != kReservedNames.end();
    if (n >= min_frequency && !reserved) kept.emplace_back(token, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second > b.second;
  });
  std::vector<std::string> tokens;
  tokens.reserve(kept.size());
  for (auto& [token, n] : kept) tokens.push_back(token);
  return from_tokens(tokens);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(tokens);
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write vocabulary " + path.string());
  for (std::size_t i = kReservedTokens; i < tokens_.size(); ++i) {
    out << tokens_[i] << '\n';
  }
}

TokenId Vocabulary::id(const std::string& token) const {
  const auto it = index_.find(token);
  if (it == index_.end() || it->second < static_cast<TokenId>(kReservedTokens)) {
    return kUnk;
  }
  return it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InvalidInput("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> Vocabulary::content_tokens() const {
  return {tokens_.begin() + kReservedTokens, tokens_.end()};
}

TokenSeq Vocabulary::encode(const std::vector<std::string>& tokens) const {
  TokenSeq ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const TokenSeq& ids) const {
  std::vector<std::string> out;
  for (TokenId id : ids) {
    if (id == kEos) break;
    if (id == kPad || id == kBos) continue;
    out.push_back(token(id));
  }
  return out;
}

std::string ParallelCorpus::fingerprint() const {
  Fnv1a h;
  for (const auto& t : source_vocab.content_tokens()) h.text(t);
  h.text("<|>");
  for (const auto& t : target_vocab.content_tokens()) h.text(t);
  for (const auto& pair : pairs) {
    const std::uint64_t sizes[2] = {pair.source.size(), pair.target.size()};
    h.bytes(sizes, sizeof(sizes));
    h.bytes(pair.source.data(), pair.source.size() * sizeof(TokenId));
    h.bytes(pair.target.data(), pair.target.size() * sizeof(TokenId));
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h.value()));
  return buf;
}

ParallelCorpus corpus_from_lines(const std::vector<std::string>& source_lines,
                                 const std::vector<std::string>& target_lines,
                                 const CorpusOptions& options) {
  if (source_lines.size() != target_lines.size()) {
    throw FormatError("line-count mismatch: " +
                      std::to_string(source_lines.size()) + " source vs " +
                      std::to_string(target_lines.size()) + " target lines");
  }
  std::vector<std::vector<std::string>> src, tgt;
  for (std::size_t i = 0; i < source_lines.size(); ++i) {
    auto s = tokenize(source_lines[i]);
    auto t = tokenize(target_lines[i]);
    if (s.empty() || t.empty()) continue;
    src.push_back(std::move(s));
    tgt.push_back(std::move(t));
  }
  if (src.empty()) throw FormatError("corpus has no non-empty sentence pairs");

  ParallelCorpus corpus;
  corpus.source_vocab = options.source_vocab
                            ? *options.source_vocab
                            : Vocabulary::build(src, options.min_frequency);
  corpus.target_vocab = options.target_vocab
                            ? *options.target_vocab
                            : Vocabulary::build(tgt, options.min_frequency);
  corpus.pairs.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    corpus.pairs.push_back({corpus.source_vocab.encode(src[i]),
                            corpus.target_vocab.encode(tgt[i])});
  }
  return corpus;
}

ParallelCorpus load_parallel_corpus(const std::filesystem::path& source_path,
                                    const std::filesystem::path& target_path,
                                    const CorpusOptions& options) {
  return corpus_from_lines(read_lines(source_path), read_lines(target_path),
                           options);
}

ParallelCorpus load_tsv_corpus(const std::filesystem::path& path,
                               const CorpusOptions& options) {
  std::vector<std::string> src, tgt;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    if (tokenize(line).empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(i + 1) +
                        ": expected two tab-separated columns");
    }
    src.push_back(line.substr(0, tab));
    tgt.push_back(line.substr(tab + 1));
  }
  if (src.empty()) throw FormatError(path.string() + " has no sentence pairs");
  return corpus_from_lines(src, tgt, options);
}

std::vector<std::uint8_t> Batch::src_valid() const {
  std::vector<std::uint8_t> valid(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) valid[i] = src[i] != kPad;
  return valid;
}

std::size_t Batch::target_tokens() const {
  return static_cast<std::size_t>(
      std::count_if(tgt_out.begin(), tgt_out.end(),
                    [](TokenId t) { return t != kPad; }));
}

Batch make_batch(const ParallelCorpus& corpus,
                 const std::vector<std::size_t>& indices, std::size_t max_len) {
  if (max_len == 0) throw InvalidInput("batch: max_len must be >= 1");
  Batch batch;
  batch.size = indices.size();
  batch.pair_indices = indices;
  for (std::size_t i : indices) {
    const auto& pair = corpus.pairs.at(i);
    batch.src_len = std::max(batch.src_len, std::min(pair.source.size(), max_len));
    batch.tgt_len =
        std::max(batch.tgt_len, std::min(pair.target.size(), max_len) + 1);
  }
  batch.src.assign(batch.size * batch.src_len, kPad);
  batch.tgt_in.assign(batch.size * batch.tgt_len, kPad);
  batch.tgt_out.assign(batch.size * batch.tgt_len, kPad);
  for (std::size_t b = 0; b < batch.size; ++b) {
    const auto& pair = corpus.pairs[indices[b]];
    const std::size_t ls = std::min(pair.source.size(), max_len);
    const std::size_t lt = std::min(pair.target.size(), max_len);
    std::copy_n(pair.source.begin(), ls, batch.src.begin() + b * batch.src_len);
    auto in = batch.tgt_in.begin() + b * batch.tgt_len;
    auto out = batch.tgt_out.begin() + b * batch.tgt_len;
    in[0] = kBos;
    std::copy_n(pair.target.begin(), lt, in + 1);
    std::copy_n(pair.target.begin(), lt, out);
    out[lt] = kEos;
  }
  return batch;
}

BatchIterator::BatchIterator(const ParallelCorpus& corpus,
                             std::size_t batch_size, std::size_t max_len,
                             std::optional<std::uint64_t> shuffle_seed)
    : corpus_(&corpus), batch_size_(batch_size), max_len_(max_len) {
  if (batch_size == 0) throw InvalidInput("batch iterator: batch size must be >= 1");
  order_.resize(corpus.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::swap(order_[i - 1], order_[rng.below(i)]);
    }
  }
}

std::size_t BatchIterator::batch_count() const {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

void BatchIterator::skip(std::size_t batches) {
  position_ = std::min(order_.size(), position_ + batches * batch_size_);
}

std::optional<Batch> BatchIterator::next() {
  if (position_ >= order_.size()) return std::nullopt;
  const std::size_t end = std::min(order_.size(), position_ + batch_size_);
  std::vector<std::size_t> indices(order_.begin() + static_cast<long>(position_),
                                   order_.begin() + static_cast<long>(end));
  position_ = end;
  return make_batch(*corpus_, indices, max_len_);
}

SyntheticKind parse_synthetic_kind(const std::string& name) {
  if (name == "copy") return SyntheticKind::copy;
  if (name == "reverse") return SyntheticKind::reverse;
  throw ConfigError("task: unknown synthetic task '" + name + "'");
}

std::string to_string(SyntheticKind kind) {
  return kind == SyntheticKind::copy ? "copy" : "reverse";
}

ParallelCorpus synthetic_task(SyntheticKind kind, std::size_t symbols,
                              std::size_t min_len, std::size_t max_len,
                              std::size_t count, std::uint64_t seed) {
  if (symbols < 2) throw InvalidInput("synthetic task: need at least 2 symbols");
  if (min_len == 0 || min_len > max_len) {
    throw InvalidInput("synthetic task: need 1 <= min_len <= max_len");
  }
  std::vector<std::string> names(symbols);
  for (std::size_t i = 0; i < symbols; ++i) names[i] = std::to_string(i);
  ParallelCorpus corpus;
  corpus.source_vocab = Vocabulary::from_tokens(names);
  corpus.target_vocab = corpus.source_vocab;
  corpus.pairs.reserve(count);
  Rng rng(seed);
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    TokenSeq seq(len);
    for (auto& t : seq) {
      t = static_cast<TokenId>(kReservedTokens + rng.below(symbols));
    }
    TokenSeq target = seq;
    if (kind == SyntheticKind::reverse) std::reverse(target.begin(), target.end());
    corpus.pairs.push_back({std::move(seq), std::move(target)});
  }
  return corpus;
}

}  // namespace homeostat
