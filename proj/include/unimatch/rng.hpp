#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string_view>

namespace unimatch {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Mix a parent seed with a stream label and up to two integer coordinates.
inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view label, std::uint64_t a = 0,
                                 std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(parent ^ fnv1a(label));
  h = splitmix64(h ^ splitmix64(a + 0x632BE59BD9B4E019ULL));
  return splitmix64(h ^ splitmix64(b + 0x8CB92BA72F3D8DD7ULL));
}

/// Deterministic random source. mt19937_64 output is fixed by the standard;
/// the distributions below are hand-rolled so sequences are identical
/// across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }
  /// Uniform integer in [lo, hi].
  std::int64_t between(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) std::iter_swap(first + (i - 1), first + below(i));
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Root of the per-run RNG derivation tree. Every random stream of a run is
/// `derive_seed(root, <stream name>, coordinates...)`:
///
///   init            model parameter initialization
///   data.order      unlabeled epoch permutations (coordinate: epoch)
///   data.labeled    labeled draws with replacement (coordinate: step)
///   augment         weak/strong image augmentation (coordinates: step, batch slot)
///   cutmix          CutMix boxes and pairing (coordinates: step, stream)
///   dropout         feature dropout masks (coordinate: step)
///
/// Seeding happens exactly once per run.
class SeedTree {
 public:
  SeedTree() = default;
  explicit SeedTree(std::uint64_t seed) { seed_everything(seed); }

  void seed_everything(std::uint64_t seed) {
    if (seeded_) throw std::logic_error("SeedTree: re-seeding an active run is not allowed");
    root_ = seed;
    seeded_ = true;
  }

  bool seeded() const noexcept { return seeded_; }
  std::uint64_t root() const noexcept { return root_; }

  Rng stream(std::string_view name, std::uint64_t a = 0, std::uint64_t b = 0) const {
    if (!seeded_) throw std::logic_error("SeedTree: stream requested before seeding");
    return Rng(derive_seed(root_, name, a, b));
  }

 private:
  std::uint64_t root_ = 0;
  bool seeded_ = false;
};

}  // namespace unimatch
