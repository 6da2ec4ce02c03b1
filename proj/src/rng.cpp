#include "tap/rng.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace tap {

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) return 0;
  auto wide = static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::size_t>(wide >> 64);
}

double Rng::normal() {
  // Box-Muller without caching the second variate keeps the stream stateless.
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::categorical(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w > 0.0 ? w : 0.0;
  if (!(total > 0.0)) return uniform_index(weights.size());
  double target = uniform() * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    acc += weights[i];
    last_positive = i;
    if (target < acc) return i;
  }
  return last_positive;
}

Rng Rng::split(std::uint64_t stream) const {
  Rng child(0);
  child.key_ = mix(key_ ^ mix(stream + 0x6A09E667F3BCC909ULL));
  return child;
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  shuffle(idx);
  return idx;
}

}  // namespace tap
