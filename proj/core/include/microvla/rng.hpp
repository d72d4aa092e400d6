#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace microvla {

// FNV-1a, used for seed-stream derivation and content hashing.
std::uint64_t fnv1a(const void* bytes, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(std::string_view s, std::uint64_t seed = 0xcbf29ce484222325ULL);

// Derives a child seed from (master, domain, index). Every random choice in
// the system flows from one master seed through named streams, so parallel
// and serial generation of the same stream agree.
std::uint64_t derive_seed(std::uint64_t master, std::string_view domain, std::uint64_t index = 0);

// mt19937_64 wrapper with portable distributions. std::uniform_*_distribution
// is implementation-defined, which would break byte-exact reproducibility, so
// the draws here are fixed algorithms on top of the raw engine output.
class Rng {
 public:
  Rng() : engine_(0) {}
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Unbiased via rejection.
  std::uint64_t below(std::uint64_t n);

  std::int64_t range(std::int64_t lo, std::int64_t hi_inclusive) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }

  bool coin(double p) { return uniform() < p; }

  // Box-Muller; one value per call, no cached spare (keeps state trivial).
  double normal(double mean = 0.0, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  template <typename T>
  const T& pick(const std::vector<T>& v) {
    return v[static_cast<std::size_t>(below(v.size()))];
  }

  // Exact engine state as text; mt19937_64 stream operators are standardized.
  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng);

}  // namespace microvla
