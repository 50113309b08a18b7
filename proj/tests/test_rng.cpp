#include <doctest.h>

#include <cmath>
#include <map>

#include "udaseg/rng.hpp"

using udaseg::RngStream;

TEST_CASE("streams with distinct ids diverge, same ids agree") {
  RngStream a(7, 1), b(7, 1), c(7, 2);
  CHECK(a.next_u64() == b.next_u64());
  RngStream a2(7, 1), c2(7, 2);
  bool all_equal = true;
  for (int i = 0; i < 16; ++i)
    if (a2.next_u64() != c2.next_u64()) all_equal = false;
  CHECK_FALSE(all_equal);
}

TEST_CASE("uniform is in the open interval and roughly unbiased") {
  RngStream rng(1, 0);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u > 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  CHECK(sum / 100000 == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("uniform_below is unbiased over a small modulus") {
  RngStream rng(3, 0);
  std::map<int, int> hist;
  const int n = 60000;
  for (int i = 0; i < n; ++i) ++hist[static_cast<int>(rng.uniform_below(6))];
  for (const auto& [k, v] : hist) {
    CHECK(k >= 0);
    CHECK(k < 6);
    CHECK(std::abs(v / static_cast<double>(n) - 1.0 / 6) < 0.01);
  }
}

TEST_CASE("normal has the requested moments") {
  RngStream rng(11, 0);
  double sum = 0.0, sum2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sum2 += x * x;
  }
  CHECK(sum / n == doctest::Approx(0.0).epsilon(1).scale(0.01));
  CHECK(sum2 / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("serialize round-trips the exact stream state") {
  RngStream rng(42, 5);
  for (int i = 0; i < 17; ++i) rng.normal();  // leaves a cached Box-Muller value
  const std::string blob = rng.serialize();
  RngStream restored;
  restored.deserialize(blob);
  CHECK(restored == rng);
  for (int i = 0; i < 32; ++i) CHECK(restored.normal() == rng.normal());
  for (int i = 0; i < 32; ++i) CHECK(restored.next_u64() == rng.next_u64());
}

TEST_CASE("sample_without_replacement returns sorted distinct picks") {
  RngStream rng(9, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto picks = rng.sample_without_replacement(10, 4);
    REQUIRE(picks.size() == 4);
    for (size_t i = 1; i < picks.size(); ++i) CHECK(picks[i - 1] < picks[i]);
    for (int p : picks) {
      CHECK(p >= 0);
      CHECK(p < 10);
    }
  }
}
