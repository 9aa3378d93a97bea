#ifndef NPF_RNG_HPP
#define NPF_RNG_HPP

#include <cstdint>

namespace npf {

// splitmix64 step; also used to hash seeds into independent streams.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_u64(std::uint64_t x) {
  std::uint64_t s = x;
  return splitmix64(s);
}

// Small deterministic generator built on splitmix64 with explicit
// Box-Muller / Marsaglia-Tsang sampling, so streams are identical across
// platforms and standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(hash_u64(seed)) {}

  std::uint64_t seed() const { return seed_; }

  // Independent child stream keyed by (this stream's seed, ids). Forking does
  // not advance this stream.
  Rng fork(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    std::uint64_t s = hash_u64(seed_ ^ 0x8f1bbcdcbfa53e0bULL);
    s = hash_u64(s ^ hash_u64(a));
    s = hash_u64(s ^ hash_u64(b + 0x165667b19e3779f9ULL));
    s = hash_u64(s ^ hash_u64(c + 0x27d4eb2f165667c5ULL));
    return Rng(s);
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n > 0.
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via Box-Muller (no cached spare; one draw per call).
  double normal();

  // Standard Student-t with `dof` degrees of freedom.
  double student_t(double dof);

  // Gamma(shape, 1) by Marsaglia-Tsang; requires shape > 0.
  double gamma(double shape);

  // Exponential with the given rate.
  double exponential(double rate);

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

}  // namespace npf

#endif
