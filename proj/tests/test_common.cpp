#include <algorithm>
#include <atomic>
#include <numeric>
#include <set>

#include "doctest.h"
#include "hwids/common.hpp"

using namespace hwids;

TEST_CASE("uniform_int stays inside the inclusive range and hits both ends") {
  Rng rng(1);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto v = uniform_int(rng, -3, 3);
    CHECK(v >= -3);
    CHECK(v <= 3);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
  CHECK(uniform_int(rng, 5, 5) == 5);
}

TEST_CASE("uniform01 lies in [0, 1)") {
  Rng rng(2);
  for (int i = 0; i < 10000; ++i) {
    const double u = uniform01(rng);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("shuffle is a seeded permutation") {
  std::vector<int> a(50), b(50);
  std::iota(a.begin(), a.end(), 0);
  std::iota(b.begin(), b.end(), 0);
  Rng r1(9), r2(9);
  shuffle(std::span<int>(a), r1);
  shuffle(std::span<int>(b), r2);
  CHECK(a == b);
  std::vector<int> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("derive_seed separates paths") {
  std::set<std::uint64_t> seeds;
  for (std::uint64_t g = 0; g < 20; ++g) {
    for (std::uint64_t c = 0; c < 20; ++c) seeds.insert(derive_seed(7, {g, c}));
  }
  CHECK(seeds.size() == 400);
  CHECK(derive_seed(7, {1, 2}) == derive_seed(7, {1, 2}));
  CHECK(derive_seed(7, {1, 2}) != derive_seed(7, {2, 1}));
  CHECK(derive_seed(7, {1}) != derive_seed(8, {1}));
}

TEST_CASE("parallel_for visits every index once and rethrows") {
  for (std::size_t workers : {1u, 3u}) {
    std::vector<std::atomic<int>> hits(100);
    parallel_for(100, workers, [&](std::size_t i) { ++hits[i]; });
    for (auto& h : hits) CHECK(h.load() == 1);
  }
  CHECK_THROWS_AS(parallel_for(10, 2,
                               [](std::size_t i) {
                                 if (i == 4) throw DataError("boom");
                               }),
                  DataError);
}

TEST_CASE("format_g") {
  CHECK(format_g(0.1, 10) == "0.1");
  CHECK(format_g(64240, 10) == "64240");
  CHECK(format_g(2.0 / 3.0, 10) == "0.6666666667");
}
