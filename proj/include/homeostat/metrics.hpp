#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "homeostat/data.hpp"

namespace homeostat {

// Corpus-level n-gram statistics behind BLEU-4.
struct BleuStats {
  std::array<std::size_t, 4> matches{};  // clipped n-gram matches, n = 1..4
  std::array<std::size_t, 4> totals{};   // hypothesis n-grams, n = 1..4
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;

  double precision(std::size_t n) const;  // n in 1..4
  double brevity_penalty() const;
  // Geometric mean of the four precisions times the brevity penalty; zero
  // when any precision is zero.
  double score() const;
};

BleuStats bleu_stats(std::span<const TokenSeq> hypotheses,
                     std::span<const TokenSeq> references);

// Single-reference corpus BLEU-4 without smoothing.
double bleu(std::span<const TokenSeq> hypotheses,
            std::span<const TokenSeq> references);

// Area under a per-epoch metric curve (trapezoid rule) relative to a model
// scoring 1 every epoch. Needs at least two values.
double imi(std::span<const double> series);

}  // namespace homeostat
