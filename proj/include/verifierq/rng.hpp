#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace verifierq {

/// SplitMix64 finalizer. Used for every deterministic hash in the library.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
  return mix64(h ^ (mix64(v) + 0x632be59bd9b4e019ULL + (h << 6) + (h >> 2)));
}

template <typename... Ts>
constexpr std::uint64_t derive_seed(std::uint64_t seed, Ts... tags) {
  std::uint64_t h = mix64(seed);
  ((h = hash_combine(h, static_cast<std::uint64_t>(tags))), ...);
  return h;
}

/// Maps a 64-bit hash to [0, 1) with 53 bits of resolution.
constexpr double unit_interval(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Seeded generator with a platform-independent draw procedure.
///
/// Only the raw mt19937_64 stream is used; the standard distributions are
/// avoided because their algorithms differ between library vendors.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  double uniform() { return unit_interval(engine_()); }

  /// Uniform integer in [0, n), n > 0 (Lemire's multiply-shift with rejection).
  std::uint64_t index(std::uint64_t n) {
    unsigned __int128 m = static_cast<unsigned __int128>(engine_()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(engine_()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  static Rng deserialize(const std::string& text) {
    Rng r;
    std::istringstream is(text);
    is >> r.engine_;
    return r;
  }

  bool operator==(const Rng& o) const { return engine_ == o.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace verifierq
