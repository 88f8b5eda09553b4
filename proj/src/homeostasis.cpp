#include "homeostat/homeostasis.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "homeostat/errors.hpp"

namespace homeostat {

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(const std::string& name,
                const std::pair<const char*, Enum> (&table)[N],
                const char* what) {
  for (const auto& [text, value] : table) {
    if (name == text) return value;
  }
  throw ConfigError(std::string("unknown ") + what + " '" + name + "'");
}

constexpr std::pair<const char*, Mechanism> kMechanisms[] = {
    {"none", Mechanism::none},
    {"kwta", Mechanism::kwta},
    {"rfb_kwta", Mechanism::rfb_kwta},
    {"smart_inhibition", Mechanism::smart_inhibition},
    {"dropout", Mechanism::dropout},
};
constexpr std::pair<const char*, BoostReference> kReferences[] = {
    {"numerator", BoostReference::numerator},
    {"statistics", BoostReference::statistics},
};
constexpr std::pair<const char*, InhibitionDirection> kDirections[] = {
    {"rarity", InhibitionDirection::rarity},
    {"frequency", InhibitionDirection::frequency},
};

template <typename Enum, std::size_t N>
std::string enum_name(Enum value,
                      const std::pair<const char*, Enum> (&table)[N]) {
  for (const auto& [text, v] : table) {
    if (v == value) return text;
  }
  return "?";
}

// Checks that the trailing axes of x are (H, F) for the cache layout.
void check_layout(const Tensor& x, std::size_t heads, std::size_t features) {
  const bool ok =
      x.rank() >= 1 && x.last_dim() == features &&
      (heads == 1 || (x.rank() >= 2 && x.shape[x.rank() - 2] == heads));
  if (!ok) {
    throw InvalidInput("homeostasis: tensor trailing axes do not match the "
                       "stats cache layout (H=" + std::to_string(heads) +
                       ", F=" + std::to_string(features) + ")");
  }
}

void check_buffer(std::span<const Real> x, std::size_t heads,
                  std::size_t features) {
  if (x.size() % (heads * features) != 0) {
    throw InvalidInput("homeostasis: buffer size is not a multiple of H*F");
  }
}

// Winner selection on boosted activations; writes the mask and zeroes the
// losers of x in place. Returns nothing: surviving values are the original x.
void rfb_kernel(std::span<Real> x, const StatsCache& cache,
                const HomeostasisConfig& cfg, std::span<std::uint8_t> mask,
                std::vector<std::uint32_t>& scratch,
                std::vector<Real>& boosted) {
  const std::size_t heads = cache.heads();
  const std::size_t features = cache.features();
  const SparsityCoefficient s(cfg.s);
  const std::size_t k = s.winners(features);
  const BoostFactors factors =
      boost_factors(cache.aggregate(), s, cfg.boost_reference);
  boosted.resize(features);
  const std::size_t slices = x.size() / features;
  for (std::size_t r = 0; r < slices; ++r) {
    const auto factor = factors.head(r % heads);
    std::span<Real> slice = x.subspan(r * features, features);
    for (std::size_t f = 0; f < features; ++f) boosted[f] = slice[f] * factor[f];
    auto bits = mask.subspan(r * features, features);
    select_top_k(boosted, k, bits, scratch);
    for (std::size_t f = 0; f < features; ++f) {
      if (!bits[f]) slice[f] = 0;
    }
  }
}

void kwta_kernel(std::span<Real> x, std::size_t features, SparsityCoefficient s,
                 std::span<std::uint8_t> mask,
                 std::vector<std::uint32_t>& scratch) {
  const std::size_t k = s.winners(features);
  const std::size_t slices = x.size() / features;
  for (std::size_t r = 0; r < slices; ++r) {
    std::span<Real> slice = x.subspan(r * features, features);
    auto bits = mask.subspan(r * features, features);
    select_top_k(slice, k, bits, scratch);
    for (std::size_t f = 0; f < features; ++f) {
      if (!bits[f]) slice[f] = 0;
    }
  }
}

ProbabilityMatrix adjusted_probs(const StatsCache& cache,
                                 const HomeostasisConfig& cfg) {
  ProbabilityMatrix p = inhibition_probs(cache.aggregate(), cfg);
  for (std::size_t h = 0; h < p.heads; ++h) {
    auto row = p.head(h);
    const auto shifted = median_adjust(row, cfg.s, cfg.delta);
    std::copy(shifted.begin(), shifted.end(), row.begin());
  }
  return p;
}

void smart_kernel(std::span<Real> x, const StatsCache& cache,
                  const HomeostasisConfig& cfg, Rng& rng,
                  std::span<std::uint8_t> mask) {
  const std::size_t frame = cache.heads() * cache.features();
  const ProbabilityMatrix p = adjusted_probs(cache, cfg);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool keep = rng.bernoulli(p.values[i % frame]);
    mask[i] = keep ? 1 : 0;
    if (!keep) x[i] = 0;
  }
}

// Moves the two central order statistics of `v` by single ulps until their
// mean is exactly `target`, without changing the order of `v`.
void center_pair(std::vector<Real>& v, Real target) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  Real& lo = v[idx[n / 2 - 1]];
  Real& hi = v[idx[n / 2]];
  const Real floor = n >= 4 ? v[idx[n / 2 - 2]] : -INFINITY;
  const Real ceil = n >= 4 ? v[idx[n / 2 + 1]] : INFINITY;
  for (int step = 0; step < 256; ++step) {
    const Real mid = (lo + hi) / 2;
    if (mid == target) return;
    if (mid < target) {
      const Real up = std::nextafter(lo, INFINITY);
      if (up <= hi) {
        lo = up;
      } else if (std::nextafter(hi, INFINITY) <= ceil) {
        hi = std::nextafter(hi, INFINITY);
      } else {
        return;
      }
    } else {
      const Real down = std::nextafter(lo, -INFINITY);
      if (down >= floor) {
        lo = down;
      } else if (std::nextafter(hi, -INFINITY) >= lo) {
        hi = std::nextafter(hi, -INFINITY);
      } else {
        return;
      }
    }
  }
}

SparsityMask mask_of(const Shape& shape, std::vector<std::uint8_t> bits) {
  return SparsityMask{shape, std::move(bits)};
}

}  // namespace

std::string to_string(Mechanism m) { return enum_name(m, kMechanisms); }
Mechanism parse_mechanism(const std::string& name) {
  return parse_enum(name, kMechanisms, "mechanism");
}
std::string to_string(BoostReference r) { return enum_name(r, kReferences); }
BoostReference parse_boost_reference(const std::string& name) {
  return parse_enum(name, kReferences, "boost reference");
}
std::string to_string(InhibitionDirection d) {
  return enum_name(d, kDirections);
}
InhibitionDirection parse_inhibition_direction(const std::string& name) {
  return parse_enum(name, kDirections, "inhibition direction");
}

void HomeostasisConfig::validate(const std::string& prefix) const {
  auto fail = [&prefix](const std::string& key, const std::string& why) {
    throw ConfigError(prefix + key + ": " + why);
  };
  if (!(s > 0.0 && s < 1.0)) fail("s", "must lie in (0, 1)");
  if (uses_stats() && capacity == 0) fail("capacity", "must be >= 1");
  if (!(b > 0.0 && b < a && a < 1.0)) fail("a", "require 0 < b < a < 1");
  if (!(gamma > 0.0)) fail("gamma", "must be > 0");
  if (!(delta >= 0.0)) fail("delta", "must be >= 0");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    fail("dropout_p", "must lie in [0, 1)");
  }
}

BoostFactors boost_factors(const CountMatrix& stats, SparsityCoefficient s,
                           BoostReference reference) {
  if (stats.features < 2) {
    throw InvalidInput("boost_factors: need at least two features per head");
  }
  const std::size_t features = stats.features;
  const std::size_t k = s.winners(features);
  BoostFactors out;
  out.heads = stats.heads;
  out.features = features;
  out.values.assign(stats.heads * features, 1.0);
  out.degenerate.assign(stats.heads, false);

  std::vector<Real> numerator(features);
  std::vector<Real> sorted(features);
  for (std::size_t h = 0; h < stats.heads; ++h) {
    const auto t = stats.head(h);
    const auto [lo_it, hi_it] = std::minmax_element(t.begin(), t.end());
    const Count lo = *lo_it;
    const Count hi = *hi_it;
    if (lo == hi) {
      out.degenerate[h] = true;
      continue;
    }
    for (std::size_t f = 0; f < features; ++f) {
      numerator[f] = static_cast<Real>(hi - t[f] + lo);
    }
    if (reference == BoostReference::numerator) {
      sorted = numerator;
    } else {
      for (std::size_t f = 0; f < features; ++f) {
        sorted[f] = static_cast<Real>(t[f]);
      }
    }
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(k - 1),
                     sorted.end(), std::greater<>());
    const Real v = sorted[k - 1];
    if (v == 0) {
      out.degenerate[h] = true;
      continue;
    }
    for (std::size_t f = 0; f < features; ++f) {
      out.values[h * features + f] = numerator[f] / v;
    }
  }
  return out;
}

ProbabilityMatrix inhibition_probs(const CountMatrix& stats,
                                   const HomeostasisConfig& cfg) {
  ProbabilityMatrix p;
  p.heads = stats.heads;
  p.features = stats.features;
  p.values.assign(stats.heads * stats.features, cfg.s);
  const double span = cfg.a - cfg.b;
  for (std::size_t h = 0; h < stats.heads; ++h) {
    const auto t = stats.head(h);
    const auto [lo_it, hi_it] = std::minmax_element(t.begin(), t.end());
    const Count lo = *lo_it;
    const Count hi = *hi_it;
    if (lo == hi) continue;
    const Real range = static_cast<Real>(hi - lo);
    auto row = p.head(h);
    for (std::size_t f = 0; f < stats.features; ++f) {
      const Real r = cfg.direction == InhibitionDirection::rarity
                         ? static_cast<Real>(hi - t[f]) / range
                         : static_cast<Real>(t[f] - lo) / range;
      row[f] = std::pow(span * r, cfg.gamma);
    }
  }
  return p;
}

Real median(std::span<const Real> values) {
  if (values.empty()) throw InvalidInput("median: empty input");
  std::vector<Real> v(values.begin(), values.end());
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  const Real upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const Real lower =
      *std::max_element(v.begin(), v.begin() + static_cast<long>(mid));
  return (lower + upper) / 2;
}

std::vector<Real> median_adjust(std::span<const Real> p, double s,
                                double delta) {
  if (p.empty()) throw InvalidInput("median_adjust: empty probability vector");
  std::vector<Real> out(p.begin(), p.end());
  const Real m = median(p);
  if (std::abs(m - s) <= delta) return out;
  // s + (p - m) lands the central element of an odd-length vector exactly
  // on s; an even-length vector may need its central pair nudged by ulps.
  for (Real& v : out) v = s + (v - m);
  if (out.size() % 2 == 0) center_pair(out, s);
  for (Real& v : out) v = std::clamp(v, Real{0}, Real{1});
  return out;
}

Tensor rfb_kwta_forward(const Tensor& x, StatsCache& cache,
                        const HomeostasisConfig& cfg, bool training,
                        SparsityMask* mask_out) {
  check_layout(x, cache.heads(), cache.features());
  Tensor out = x;
  std::vector<std::uint8_t> bits(x.size());
  std::vector<std::uint32_t> scratch;
  std::vector<Real> boosted;
  rfb_kernel(out.data, cache, cfg, bits, scratch, boosted);
  if (training) cache.push(reduce_mask(bits, cache.heads(), cache.features()));
  if (mask_out) *mask_out = mask_of(x.shape, std::move(bits));
  return out;
}

Tensor smart_inhibition_forward(const Tensor& x, StatsCache& cache,
                                const HomeostasisConfig& cfg, bool training,
                                Rng& rng, SparsityMask* mask_out) {
  check_layout(x, cache.heads(), cache.features());
  if (!training) {
    if (mask_out) {
      *mask_out = mask_of(x.shape, std::vector<std::uint8_t>(x.size(), 1));
    }
    return x;
  }
  Tensor out = x;
  std::vector<std::uint8_t> bits(x.size());
  smart_kernel(out.data, cache, cfg, rng, bits);
  cache.push(reduce_mask(bits, cache.heads(), cache.features()));
  if (mask_out) *mask_out = mask_of(x.shape, std::move(bits));
  return out;
}

Tensor dropout_forward(const Tensor& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw InvalidInput("dropout: drop probability must lie in [0, 1)");
  }
  if (!training || p == 0.0) return x;
  Tensor out = x;
  const Real scale = 1.0 / (1.0 - p);
  for (Real& v : out.data) v = rng.uniform() < 1.0 - p ? v * scale : Real{0};
  return out;
}

InsertLayer::InsertLayer(HomeostasisConfig cfg, std::size_t heads,
                         std::size_t features)
    : cfg_(cfg), heads_(heads), features_(features) {
  cfg_.validate();
  if (heads == 0 || features == 0) {
    throw ConfigError("insert: heads and features must be >= 1");
  }
  if (cfg_.mechanism == Mechanism::rfb_kwta && features < 2) {
    throw ConfigError("insert: rfb_kwta needs a feature axis of length >= 2");
  }
  if (cfg_.uses_stats()) cache_.emplace(heads, cfg_.capacity, features);
}

void InsertLayer::forward(std::span<Real> x, bool training, Rng& rng) {
  check_buffer(x, heads_, features_);
  mask_.clear();
  identity_ = true;
  scale_ = 1.0;
  switch (cfg_.mechanism) {
    case Mechanism::none:
      return;
    case Mechanism::kwta:
      mask_.resize(x.size());
      kwta_kernel(x, features_, SparsityCoefficient(cfg_.s), mask_, scratch_);
      identity_ = false;
      return;
    case Mechanism::rfb_kwta:
      mask_.resize(x.size());
      rfb_kernel(x, *cache_, cfg_, mask_, scratch_, boosted_);
      if (training) cache_->push(reduce_mask(mask_, heads_, features_));
      identity_ = false;
      return;
    case Mechanism::smart_inhibition:
      if (!training) return;
      mask_.resize(x.size());
      smart_kernel(x, *cache_, cfg_, rng, mask_);
      cache_->push(reduce_mask(mask_, heads_, features_));
      identity_ = false;
      return;
    case Mechanism::dropout: {
      if (!training || cfg_.dropout_p == 0.0) return;
      mask_.resize(x.size());
      const double keep = 1.0 - cfg_.dropout_p;
      scale_ = 1.0 / keep;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const bool kept = rng.uniform() < keep;
        mask_[i] = kept ? 1 : 0;
        x[i] = kept ? x[i] * scale_ : Real{0};
      }
      identity_ = false;
      return;
    }
  }
}

void InsertLayer::backward(std::span<Real> grad) const {
  if (identity_) return;
  if (grad.size() != mask_.size()) {
    throw InvalidInput("insert backward: gradient size differs from last forward");
  }
  for (std::size_t i = 0; i < grad.size(); ++i) {
    grad[i] = mask_[i] ? grad[i] * scale_ : Real{0};
  }
}

}  // namespace homeostat
