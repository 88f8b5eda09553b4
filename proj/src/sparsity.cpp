#include "homeostat/sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "homeostat/errors.hpp"

namespace homeostat {

SparsityCoefficient::SparsityCoefficient(double kept_fraction)
    : s_(kept_fraction) {
  if (!(kept_fraction > 0.0 && kept_fraction < 1.0)) {
    throw InvalidInput("sparsity coefficient must lie in (0, 1), got " +
                       std::to_string(kept_fraction));
  }
}

std::size_t SparsityCoefficient::winners(std::size_t n) const {
  // std::llround rounds halfway cases away from zero.
  const auto k = static_cast<std::size_t>(
      std::llround(s_ * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(n, 1));
}

void select_top_k(std::span<const Real> x, std::size_t k,
                  std::span<std::uint8_t> out,
                  std::vector<std::uint32_t>& scratch) {
  const std::size_t n = x.size();
  if (n == 0) throw InvalidInput("kwta: empty vector");
  if (out.size() != n) throw InvalidInput("kwta: output span size mismatch");
  for (Real v : x) {
    if (!std::isfinite(v)) throw InvalidInput("kwta: non-finite element");
  }
  k = std::min(k, n);

  std::fill(out.begin(), out.end(), std::uint8_t{0});
  if (k == n) {
    std::fill(out.begin(), out.end(), std::uint8_t{1});
    return;
  }
  scratch.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) scratch[i] = i;
  // Strict total order: larger value first, lower index on ties. Partial
  // selection under a total order yields the same set as a full sort.
  auto before = [&x](std::uint32_t a, std::uint32_t b) {
    return x[a] > x[b] || (x[a] == x[b] && a < b);
  };
  std::nth_element(scratch.begin(), scratch.begin() + static_cast<long>(k - 1),
                   scratch.end(), before);
  for (std::size_t i = 0; i < k; ++i) out[scratch[i]] = 1;
}

SparsityMask kwta_mask(std::span<const Real> x, SparsityCoefficient s) {
  SparsityMask mask{{x.size()}, std::vector<std::uint8_t>(x.size())};
  std::vector<std::uint32_t> scratch;
  select_top_k(x, s.winners(x.size()), mask.bits, scratch);
  return mask;
}

std::pair<Tensor, SparsityMask> kwta_apply(const Tensor& x,
                                           SparsityCoefficient s) {
  if (x.rank() == 0 || x.last_dim() == 0) {
    throw InvalidInput("kwta: tensor must have rank >= 1 and a non-empty last axis");
  }
  const std::size_t n = x.last_dim();
  const std::size_t k = s.winners(n);
  SparsityMask mask{x.shape, std::vector<std::uint8_t>(x.size())};
  Tensor out(x.shape);
  std::vector<std::uint32_t> scratch;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::span<std::uint8_t> bits(mask.bits.data() + r * n, n);
    select_top_k(x.row(r), k, bits, scratch);
    auto src = x.row(r);
    auto dst = out.row(r);
    for (std::size_t i = 0; i < n; ++i) dst[i] = bits[i] ? src[i] : Real{0};
  }
  return {std::move(out), std::move(mask)};
}

Tensor kwta_gradient(const Tensor& upstream, const SparsityMask& mask) {
  if (upstream.shape != mask.shape) {
    throw InvalidInput("kwta_gradient: upstream and mask shapes differ");
  }
  Tensor grad(upstream.shape);
  for (std::size_t i = 0; i < upstream.size(); ++i) {
    grad.data[i] = mask.bits[i] ? upstream.data[i] : Real{0};
  }
  return grad;
}

}  // namespace homeostat
