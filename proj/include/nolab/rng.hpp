#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "nolab/errors.hpp"

namespace nolab::rng {

// splitmix64 finalizer, used to derive independent per-sample seeds from a
// master seed without correlated low bits.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t index) {
  return splitmix64(master ^ splitmix64(index + 1));
}

// mt19937_64 bit stream with a fixed mapping to doubles and an explicit
// Box-Muller transform. std::normal_distribution is implementation-defined,
// so it is avoided; this generator is bit-exact for a given seed on any
// conforming standard library.
class Prng {
 public:
  explicit Prng(uint64_t seed) : eng_(seed) {}

  uint64_t bits() { return eng_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; generates pairs, caches the spare.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(th);
    have_spare_ = true;
    return r * std::cos(th);
  }

  // Fisher-Yates shuffle driven by uniform01, so index order is seed-stable.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform01() * static_cast<double>(i));
      std::swap(v[i - 1], v[j < i ? j : i - 1]);
    }
  }

  // Engine + Box-Muller cache as text, for checkpoint round trips.
  std::string save_state() const {
    std::ostringstream os;
    os << eng_ << ' ' << (have_spare_ ? 1 : 0) << ' ';
    os.precision(17);
    os << spare_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    int flag = 0;
    if (!(is >> eng_ >> flag >> spare_)) throw ConfigError("rng state: parse failure");
    have_spare_ = (flag != 0);
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace nolab::rng
