// Copyright 2026 The Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "doctest.h"
#include "selrel/random.hpp"

#include <cmath>
#include <set>

using namespace selrel;

TEST_CASE("mix64 matches the published SplitMix64 stream") {
  // First outputs of SplitMix64 seeded with 0 (state advanced then mixed).
  CHECK(mix64(0) == 0xE220A8397B1DCDAFULL);
  CHECK(mix64(0x9E3779B97F4A7C15ULL) == 0x6E789E6AA1B965F4ULL);
}

TEST_CASE("hash_words folds left") {
  CHECK(hash_words({}) == 0);
  CHECK(hash_words({5}) == mix64(5));
  CHECK(hash_words({5, 9}) == mix64(mix64(5) ^ 9));
  CHECK(hash_words({1, 2}) != hash_words({2, 1}));
}

TEST_CASE("hash_string is FNV-1a") {
  CHECK(hash_string("") == 0xCBF29CE484222325ULL);
  CHECK(hash_string("a") == 0xAF63DC4C8601EC8CULL);
}

TEST_CASE("CounterRng draws") {
  CounterRng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());

  CounterRng r(7);
  double sum = 0.0, sq = 0.0;
  std::set<std::uint64_t> seen;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    const std::uint64_t k = r.below(6);
    REQUIRE(k < 6);
    seen.insert(k);
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(seen.size() == 6);
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}
