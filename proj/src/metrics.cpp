#include "homeostat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "homeostat/errors.hpp"

namespace homeostat {

namespace {

using NGramCounts = std::map<std::vector<TokenId>, std::size_t>;

NGramCounts count_ngrams(const TokenSeq& seq, std::size_t n) {
  NGramCounts counts;
  if (seq.size() < n) return counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    ++counts[std::vector<TokenId>(seq.begin() + static_cast<long>(i),
                                  seq.begin() + static_cast<long>(i + n))];
  }
  return counts;
}

}  // namespace

double BleuStats::precision(std::size_t n) const {
  if (n < 1 || n > 4) throw InvalidInput("bleu: n-gram order must be 1..4");
  const std::size_t total = totals[n - 1];
  return total ? static_cast<double>(matches[n - 1]) / static_cast<double>(total)
               : 0.0;
}

double BleuStats::brevity_penalty() const {
  if (hypothesis_length == 0) return 0.0;
  if (hypothesis_length >= reference_length) return 1.0;
  return std::exp(1.0 - static_cast<double>(reference_length) /
                            static_cast<double>(hypothesis_length));
}

double BleuStats::score() const {
  double log_sum = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const double p = precision(n);
    if (p == 0.0) return 0.0;
    log_sum += std::log(p);
  }
  return brevity_penalty() * std::exp(log_sum / 4.0);
}

BleuStats bleu_stats(std::span<const TokenSeq> hypotheses,
                     std::span<const TokenSeq> references) {
  if (hypotheses.size() != references.size()) {
    throw InvalidInput("bleu: hypothesis and reference counts differ");
  }
  if (hypotheses.empty()) throw InvalidInput("bleu: empty corpus");
  BleuStats stats;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& hyp = hypotheses[i];
    const auto& ref = references[i];
    stats.hypothesis_length += hyp.size();
    stats.reference_length += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto hyp_counts = count_ngrams(hyp, n);
      const auto ref_counts = count_ngrams(ref, n);
      for (const auto& [gram, count] : hyp_counts) {
        const auto it = ref_counts.find(gram);
        const std::size_t allowed = it == ref_counts.end() ? 0 : it->second;
        stats.matches[n - 1] += std::min(count, allowed);
        stats.totals[n - 1] += count;
      }
    }
  }
  return stats;
}

double bleu(std::span<const TokenSeq> hypotheses,
            std::span<const TokenSeq> references) {
  return bleu_stats(hypotheses, references).score();
}

double imi(std::span<const double> series) {
  if (series.size() < 2) {
    throw InvalidInput("imi: need metric values for at least two epochs");
  }
  double area = 0;
  for (std::size_t i = 0; i + 1 < series.size(); ++i) {
    area += series[i] + series[i + 1];
  }
  return area / (2.0 * static_cast<double>(series.size() - 1));
}

}  // namespace homeostat
