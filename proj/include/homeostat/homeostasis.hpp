#pragma once

// Homeostatic insert layers: statistics-boosted kWTA (RFB-kWTA), Smart
// Inhibition, plain kWTA and inverted dropout. Each layer works on
// activations whose trailing axes are (H, F): H = heads inside attention,
// H = 1 at the block output.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "homeostat/random.hpp"
#include "homeostat/sparsity.hpp"
#include "homeostat/stats_cache.hpp"
#include "homeostat/tensor.hpp"

namespace homeostat {

enum class Mechanism { none, kwta, rfb_kwta, smart_inhibition, dropout };

// Which sorted sequence supplies the RFB normalizer v: the boost numerator
// (default) or the raw aggregated statistics.
enum class BoostReference { numerator, statistics };

// Smart Inhibition keep-probability direction. `rarity` keeps rarely active
// features more often; `frequency` is the opposite ordering.
enum class InhibitionDirection { rarity, frequency };

std::string to_string(Mechanism m);
Mechanism parse_mechanism(const std::string& name);
std::string to_string(BoostReference r);
BoostReference parse_boost_reference(const std::string& name);
std::string to_string(InhibitionDirection d);
InhibitionDirection parse_inhibition_direction(const std::string& name);

struct HomeostasisConfig {
  Mechanism mechanism = Mechanism::none;
  double s = 0.5;             // kept fraction
  std::size_t capacity = 256; // stats cache length Q
  double a = 0.99;            // max keep probability
  double b = 0.01;            // min keep probability (enters only via a - b)
  double gamma = 0.83;
  double delta = 0.05;        // median tolerance
  double dropout_p = 0.1;
  BoostReference boost_reference = BoostReference::numerator;
  InhibitionDirection direction = InhibitionDirection::rarity;

  // Throws ConfigError naming the offending field. `prefix` is prepended to
  // field names in the message.
  void validate(const std::string& prefix = "") const;

  bool uses_stats() const {
    return mechanism == Mechanism::rfb_kwta ||
           mechanism == Mechanism::smart_inhibition;
  }

  bool operator==(const HomeostasisConfig&) const = default;
};

struct BoostFactors {
  std::size_t heads = 0;
  std::size_t features = 0;
  std::vector<Real> values;       // heads x features multipliers
  std::vector<bool> degenerate;   // per head: fell back to all-ones

  std::span<const Real> head(std::size_t h) const {
    return {values.data() + h * features, features};
  }
};

// Per head: N = max(t) - t + min(t), v = k-th largest entry (1-based,
// k = round(s*F)) of N (or of t, per `reference`), factors = N / v.
// All-equal statistics or v == 0 give factors of one for that head.
BoostFactors boost_factors(const CountMatrix& stats, SparsityCoefficient s,
                           BoostReference reference = BoostReference::numerator);

struct ProbabilityMatrix {
  std::size_t heads = 0;
  std::size_t features = 0;
  std::vector<Real> values;

  std::span<const Real> head(std::size_t h) const {
    return {values.data() + h * features, features};
  }
  std::span<Real> head(std::size_t h) {
    return {values.data() + h * features, features};
  }
};

// Keep probabilities ((a - b) * r)^gamma, r the min-max normalized rarity of
// each feature within its head. A head with all-equal statistics gets s.
ProbabilityMatrix inhibition_probs(const CountMatrix& stats,
                                   const HomeostasisConfig& cfg);

// Median with the even-length convention (mean of the two central values).
Real median(std::span<const Real> values);

// Shifts P by s - median(P) when the median is farther than delta from s,
// then clamps to [0, 1].
std::vector<Real> median_adjust(std::span<const Real> p, double s,
                                double delta);

// Tensor-level forwards. `x` has trailing axes (H, F) matching the cache.
// When `mask_out` is non-null it receives the applied binary mask.
Tensor rfb_kwta_forward(const Tensor& x, StatsCache& cache,
                        const HomeostasisConfig& cfg, bool training,
                        SparsityMask* mask_out = nullptr);
Tensor smart_inhibition_forward(const Tensor& x, StatsCache& cache,
                                const HomeostasisConfig& cfg, bool training,
                                Rng& rng, SparsityMask* mask_out = nullptr);
// One uniform draw per element in row-major order; kept when u < 1 - p.
Tensor dropout_forward(const Tensor& x, double p, bool training, Rng& rng);

// Stateful insert used inside the transformer. Forward works in place on a
// row-major buffer whose size is a multiple of heads * features and keeps
// the applied mask for the backward pass.
class InsertLayer {
 public:
  InsertLayer(HomeostasisConfig cfg, std::size_t heads, std::size_t features);

  void forward(std::span<Real> x, bool training, Rng& rng);
  // Multiplies `grad` by the mask (and dropout scale) of the last forward.
  void backward(std::span<Real> grad) const;

  const HomeostasisConfig& config() const { return cfg_; }
  std::size_t heads() const { return heads_; }
  std::size_t features() const { return features_; }
  bool has_cache() const { return cache_.has_value(); }
  const StatsCache& cache() const { return *cache_; }
  StatsCache& cache() { return *cache_; }
  // Mask of the last forward (empty when the layer acted as identity).
  const std::vector<std::uint8_t>& last_mask() const { return mask_; }

 private:
  HomeostasisConfig cfg_;
  std::size_t heads_;
  std::size_t features_;
  std::optional<StatsCache> cache_;
  std::vector<std::uint8_t> mask_;
  Real scale_ = 1.0;
  bool identity_ = true;
  std::vector<std::uint32_t> scratch_;
  std::vector<Real> boosted_;
};

}  // namespace homeostat
