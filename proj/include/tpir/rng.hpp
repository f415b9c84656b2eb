#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tpir/common.hpp"

namespace tpir {

// Deterministic RNG used everywhere in the library. All derived draws
// (bounded ints, normals, shuffles) are implemented here rather than via
// std::*_distribution so that sequences are reproducible independent of the
// standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller (cos branch only; stateless).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, "Rng::below: n must be positive");
    std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                          std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derive an independent child stream.
  Rng child() { return Rng(next_u64() ^ 0x9e3779b97f4a7c15ull); }

  std::string state_string() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (is.fail()) throw IoError("Rng::set_state: malformed state string");
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace tpir
