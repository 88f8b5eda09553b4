#pragma once

// Parallel corpora, vocabularies, batching and synthetic tasks.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "homeostat/random.hpp"

namespace homeostat {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::size_t kReservedTokens = 4;

// Lowercases ASCII letters and splits on whitespace.
std::vector<std::string> tokenize(std::string_view line);
std::string detokenize(const std::vector<std::string>& tokens);

class Vocabulary {
 public:
  // Only reserved tokens.
  Vocabulary();

  // Tokens occurring at least `min_frequency` times, ordered by descending
  // frequency and then lexicographically.
  static Vocabulary build(const std::vector<std::vector<std::string>>& sentences,
                          std::size_t min_frequency = 2);
  // Uses `tokens` verbatim, in order, as ids 4, 5, ...
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);

  // One non-reserved token per line; line i holds id i + 4.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  TokenId id(const std::string& token) const;  // UNK when absent
  const std::string& token(TokenId id) const;
  // Non-reserved tokens in id order.
  std::vector<std::string> content_tokens() const;

  TokenSeq encode(const std::vector<std::string>& tokens) const;
  // Drops PAD/BOS and stops at EOS.
  std::vector<std::string> decode(const TokenSeq& ids) const;

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct SentencePair {
  TokenSeq source;
  TokenSeq target;
  bool operator==(const SentencePair&) const = default;
};

struct ParallelCorpus {
  std::vector<SentencePair> pairs;
  Vocabulary source_vocab;
  Vocabulary target_vocab;

  std::size_t size() const { return pairs.size(); }
  // Content hash (FNV-1a over vocabularies and token ids), hex encoded.
  std::string fingerprint() const;
};

struct CorpusOptions {
  std::size_t min_frequency = 2;
  // Encode with these vocabularies instead of building new ones (for
  // validation/test splits).
  const Vocabulary* source_vocab = nullptr;
  const Vocabulary* target_vocab = nullptr;
};

// Two line-aligned UTF-8 files, one sentence per line.
ParallelCorpus load_parallel_corpus(const std::filesystem::path& source_path,
                                    const std::filesystem::path& target_path,
                                    const CorpusOptions& options = {});
// One file with "source<TAB>target" per line.
ParallelCorpus load_tsv_corpus(const std::filesystem::path& path,
                               const CorpusOptions& options = {});
ParallelCorpus corpus_from_lines(const std::vector<std::string>& source_lines,
                                 const std::vector<std::string>& target_lines,
                                 const CorpusOptions& options = {});

// Padded (B, L) id matrices, row-major. tgt_in is BOS + target, tgt_out is
// target + EOS.
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<TokenId> src;
  std::vector<TokenId> tgt_in;
  std::vector<TokenId> tgt_out;
  std::vector<std::size_t> pair_indices;

  std::vector<std::uint8_t> src_valid() const;
  std::size_t target_tokens() const;  // non-PAD entries of tgt_out
};

Batch make_batch(const ParallelCorpus& corpus,
                 const std::vector<std::size_t>& indices, std::size_t max_len);

// Deterministic epoch iterator. Pair order is a Fisher-Yates shuffle driven
// by `shuffle_seed`, or corpus order when the seed is empty.
class BatchIterator {
 public:
  BatchIterator(const ParallelCorpus& corpus, std::size_t batch_size,
                std::size_t max_len, std::optional<std::uint64_t> shuffle_seed);

  std::optional<Batch> next();
  std::size_t batch_count() const;
  // Skips ahead without building batches.
  void skip(std::size_t batches);

 private:
  const ParallelCorpus* corpus_;
  std::size_t batch_size_;
  std::size_t max_len_;
  std::vector<std::size_t> order_;
  std::size_t position_ = 0;
};

enum class SyntheticKind { copy, reverse };

SyntheticKind parse_synthetic_kind(const std::string& name);
std::string to_string(SyntheticKind kind);

// Random sequences over `symbols` content tokens (ids 4 .. 4+symbols-1, token
// strings "0", "1", ...), lengths uniform in [min_len, max_len].
ParallelCorpus synthetic_task(SyntheticKind kind, std::size_t symbols,
                              std::size_t min_len, std::size_t max_len,
                              std::size_t count, std::uint64_t seed);

}  // namespace homeostat
