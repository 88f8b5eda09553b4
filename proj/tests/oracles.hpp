#pragma once

// Reference implementations used only by tests. They favour obviousness
// over speed and share no code with the library paths they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <numeric>
#include <vector>

namespace oracle {

// Indices of the k largest values: full stable sort by value descending.
inline std::vector<std::uint8_t> full_sort_mask(const std::vector<double>& x,
                                                std::size_t k) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] > x[b]; });
  std::vector<std::uint8_t> mask(x.size(), 0);
  for (std::size_t i = 0; i < k && i < idx.size(); ++i) mask[idx[i]] = 1;
  return mask;
}

inline std::size_t winners(double s, std::size_t n) {
  const auto k = static_cast<std::size_t>(std::round(s * static_cast<double>(n)));
  return std::max<std::size_t>(k, 1);
}

// Boost factors of one head evaluated directly from the definition:
// N = max - t + min, divided by the k-th largest N.
inline std::vector<double> direct_boost(const std::vector<std::int64_t>& t,
                                        double s) {
  const auto hi = *std::max_element(t.begin(), t.end());
  const auto lo = *std::min_element(t.begin(), t.end());
  if (hi == lo) return std::vector<double>(t.size(), 1.0);
  std::vector<double> n(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    n[i] = static_cast<double>(hi - t[i] + lo);
  }
  std::vector<double> sorted = n;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double v = sorted[winners(s, t.size()) - 1];
  if (v == 0) return std::vector<double>(t.size(), 1.0);
  for (auto& x : n) x /= v;
  return n;
}

// Keeps every pushed frame in a list and sums the newest `capacity`.
class ListFifo {
 public:
  explicit ListFifo(std::size_t capacity) : capacity_(capacity) {}
  void push(std::vector<std::int64_t> frame) {
    frames_.push_back(std::move(frame));
  }
  std::vector<std::int64_t> aggregate(std::size_t width) const {
    std::vector<std::int64_t> sum(width, 0);
    const std::size_t n = std::min(capacity_, frames_.size());
    for (std::size_t i = frames_.size() - n; i < frames_.size(); ++i) {
      for (std::size_t j = 0; j < width; ++j) sum[j] += frames_[i][j];
    }
    return sum;
  }

 private:
  std::size_t capacity_;
  std::vector<std::vector<std::int64_t>> frames_;
};

// Corpus BLEU-4 with n-grams counted in ordered maps.
inline double bleu(const std::vector<std::vector<int>>& hyps,
                   const std::vector<std::vector<int>>& refs) {
  double log_p = 0;
  std::size_t hyp_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    hyp_len += hyps[i].size();
    ref_len += refs[i].size();
  }
  for (int n = 1; n <= 4; ++n) {
    double match = 0, total = 0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      std::map<std::vector<int>, int> h, r;
      for (std::size_t p = 0; p + n <= hyps[i].size(); ++p) {
        ++h[std::vector<int>(hyps[i].begin() + p, hyps[i].begin() + p + n)];
      }
      for (std::size_t p = 0; p + n <= refs[i].size(); ++p) {
        ++r[std::vector<int>(refs[i].begin() + p, refs[i].begin() + p + n)];
      }
      for (const auto& [gram, c] : h) {
        total += c;
        auto it = r.find(gram);
        if (it != r.end()) match += std::min(c, it->second);
      }
    }
    if (match == 0 || total == 0) return 0.0;
    log_p += std::log(match / total) / 4.0;
  }
  const double bp = hyp_len > ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(ref_len) /
                                             static_cast<double>(hyp_len));
  return bp * std::exp(log_p);
}

}  // namespace oracle
