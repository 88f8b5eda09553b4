#include "doctest.h"

#include <random>

#include "homeostat/errors.hpp"
#include "homeostat/sparsity.hpp"
#include "oracles.hpp"

using namespace homeostat;

namespace {

std::vector<std::uint8_t> mask_of(std::vector<double> x, double s) {
  return kwta_mask(x, SparsityCoefficient(s)).bits;
}

}  // namespace

TEST_CASE("sparsity coefficient rejects values outside (0, 1)") {
  CHECK_THROWS_AS(SparsityCoefficient(0.0), InvalidInput);
  CHECK_THROWS_AS(SparsityCoefficient(1.0), InvalidInput);
  CHECK_THROWS_AS(SparsityCoefficient(-0.2), InvalidInput);
  CHECK_NOTHROW(SparsityCoefficient(0.5));
}

TEST_CASE("winner count rounds half away from zero and clamps to one") {
  CHECK(SparsityCoefficient(0.5).winners(5) == 3);   // 2.5 -> 3
  CHECK(SparsityCoefficient(0.25).winners(6) == 2);  // 1.5 -> 2
  CHECK(SparsityCoefficient(0.67).winners(3) == 2);
  CHECK(SparsityCoefficient(0.1).winners(4) == 1);   // 0.4 -> 0 -> 1
  CHECK(SparsityCoefficient(0.01).winners(1) == 1);
}

TEST_CASE("kwta mask examples") {
  CHECK(mask_of({3, 1, 2, 0.5}, 0.5) == std::vector<std::uint8_t>{1, 0, 1, 0});
  CHECK(mask_of({7, 7, 7}, 0.67) == std::vector<std::uint8_t>{1, 1, 0});
  CHECK(mask_of({-1, -2, -3, -4}, 0.5) == std::vector<std::uint8_t>{1, 1, 0, 0});
}

TEST_CASE("kwta mask rejects empty and non-finite input") {
  CHECK_THROWS_AS(mask_of({}, 0.5), InvalidInput);
  CHECK_THROWS_AS(mask_of({1.0, std::nan("")}, 0.5), InvalidInput);
  CHECK_THROWS_AS(mask_of({1.0, INFINITY}, 0.5), InvalidInput);
}

TEST_CASE("64 random values at s=0.2 match the full-sort oracle") {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> x(64);
  for (auto& v : x) v = u(gen);
  const auto mask = mask_of(x, 0.2);
  CHECK(std::count(mask.begin(), mask.end(), 1) == 13);
  CHECK(mask == oracle::full_sort_mask(x, 13));
}

TEST_CASE("ties resolve toward lower indices like a stable sort") {
  std::mt19937_64 gen(3);
  std::uniform_int_distribution<int> small(0, 3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(1 + trial % 40);
    for (auto& v : x) v = small(gen);
    const double s = 0.1 + 0.8 * (trial % 9) / 8.0;
    CHECK(mask_of(x, s) == oracle::full_sort_mask(x, oracle::winners(s, x.size())));
  }
}

TEST_CASE("kwta_apply keeps exactly k per slice and matches oracle rows") {
  std::mt19937_64 gen(11);
  std::normal_distribution<double> n01;
  Tensor x({2, 3, 4, 8});
  for (auto& v : x.data) v = n01(gen);
  const auto [y, mask] = kwta_apply(x, SparsityCoefficient(0.5));
  CHECK(y.shape == x.shape);
  CHECK(mask.shape == x.shape);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    std::vector<double> slice(row.begin(), row.end());
    const auto expected = oracle::full_sort_mask(slice, 4);
    std::size_t nonzero = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(mask.bits[r * 8 + j] == expected[j]);
      CHECK(y.data[r * 8 + j] == (expected[j] ? slice[j] : 0.0));
      nonzero += y.data[r * 8 + j] != 0.0;
    }
    CHECK(nonzero == 4);
  }
}

TEST_CASE("kwta_apply on a (4,16) matrix at s=0.25 equals X times oracle masks") {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(-3, 3);
  Tensor x({4, 16});
  for (auto& v : x.data) v = u(gen);
  const auto [y, mask] = kwta_apply(x, SparsityCoefficient(0.25));
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> slice(x.data.begin() + r * 16, x.data.begin() + (r + 1) * 16);
    const auto m = oracle::full_sort_mask(slice, 4);
    for (std::size_t j = 0; j < 16; ++j) CHECK(y.data[r * 16 + j] == slice[j] * m[j]);
  }
}

TEST_CASE("kwta is idempotent and invariant under increasing maps") {
  std::mt19937_64 gen(9);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x({3, 10});
    for (auto& v : x.data) v = u(gen);
    const SparsityCoefficient s(0.1 + 0.08 * (trial % 10));
    const auto once = kwta_apply(x, s);
    const auto twice = kwta_apply(once.first, s);
    CHECK(twice.first == once.first);

    Tensor warped = x;
    for (auto& v : warped.data) v = std::exp(3 * v) - 7;
    CHECK(kwta_apply(warped, s).second == once.second);
  }
}

TEST_CASE("kwta gradient is upstream times mask") {
  SparsityMask mask{{4}, {1, 0, 1, 0}};
  Tensor ones({4}, {1, 1, 1, 1});
  CHECK(kwta_gradient(ones, mask).data == std::vector<Real>{1, 0, 1, 0});

  Tensor up({2, 2}, {0.3, -1.5, 2.0, 4.0});
  SparsityMask all{{2, 2}, {1, 1, 1, 1}};
  CHECK(kwta_gradient(up, all) == up);

  SparsityMask wrong{{3}, {1, 1, 1}};
  CHECK_THROWS_AS(kwta_gradient(ones, wrong), InvalidInput);
}

TEST_CASE("kwta gradient matches central finite differences away from ties") {
  std::mt19937_64 gen(21);
  std::uniform_real_distribution<double> u(-1, 1);
  // Values on a grid with spacing 0.01 so pairwise gaps exceed 1e-3.
  std::vector<double> grid(200);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = -1.0 + 0.01 * static_cast<double>(i);
  std::shuffle(grid.begin(), grid.end(), gen);
  Tensor x({3, 8});
  std::copy_n(grid.begin(), x.data.size(), x.data.begin());
  Tensor w({3, 8});
  for (auto& v : w.data) v = u(gen);
  const SparsityCoefficient s(0.4);

  auto loss = [&](const Tensor& in) {
    const auto y = kwta_apply(in, s).first;
    double total = 0;
    for (std::size_t i = 0; i < y.data.size(); ++i) total += w.data[i] * y.data[i];
    return total;
  };
  const auto analytic = kwta_gradient(w, kwta_apply(x, s).second);
  const double h = 1e-4;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    Tensor plus = x, minus = x;
    plus.data[i] += h;
    minus.data[i] -= h;
    const double numeric = (loss(plus) - loss(minus)) / (2 * h);
    const double scale = std::max({std::abs(numeric), std::abs(analytic.data[i]), 1e-12});
    CHECK(std::abs(numeric - analytic.data[i]) / scale < 1e-5);
  }
}
