#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace mgres {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes (config 2, infeasible 3, numerical 4).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InfeasibleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

// Derives an independent substream from a base seed. splitmix64 finalizer,
// so (seed, stream) pairs never collide in practice.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Full-precision formatting used by every CSV writer; output must be
// byte-identical across reruns with the same seed.
std::string format_double(double v);

}  // namespace mgres
