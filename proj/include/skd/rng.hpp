#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "skd/common.hpp"

namespace skd {

// splitmix64-seeded xoshiro256++. std::mt19937 + <random> distributions are
// not bit-stable across standard libraries, and reproducibility here is a
// contract, so the generator and the distributions are pinned by hand.
class Rng {
public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) {
      x += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      s = z ^ (z >> 31);
    }
  }

  std::uint64_t next_u64() {
    auto rotl = [](std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, "Rng::below: n must be positive");
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Box-Muller, one value per call; the spare is kept.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(6.283185307179586476925286766559 * u2);
    have_spare_ = true;
    return mag * std::cos(6.283185307179586476925286766559 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), in draw order
  std::vector<index_t> sample_without_replacement(index_t n, index_t k) {
    require(k <= n, "sample_without_replacement: k exceeds population");
    std::vector<index_t> pool(n);
    for (index_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<index_t> out(k);
    for (index_t i = 0; i < k; ++i) {
      const index_t j = i + static_cast<index_t>(below(n - i));
      std::swap(pool[i], pool[j]);
      out[i] = pool[i];
    }
    return out;
  }

private:
  std::uint64_t state_[4];
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace skd
