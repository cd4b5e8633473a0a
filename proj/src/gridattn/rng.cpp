#include "rng.hpp"

#include <cmath>

namespace gridattn {

std::uint64_t Rng::uniform_below(std::uint64_t n) {
  if (n == 0) return 0;
  std::uint64_t threshold = (0ULL - n) % n;  // 2^64 mod n
  for (;;) {
    std::uint64_t r = next_u64();
    if (r >= threshold) return r % n;
  }
}

double Rng::normal() {
  if (have_cached_) {
    have_cached_ = false;
    return cached_;
  }
  double u1, u2;
  do {
    u1 = uniform01();
  } while (u1 <= 0.0);
  u2 = uniform01();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 6.283185307179586476925286766559 * u2;
  cached_ = r * std::sin(a);
  have_cached_ = true;
  return r * std::cos(a);
}

}  // namespace gridattn
