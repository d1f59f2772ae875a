#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "blobdiff/tensor.hpp"

namespace blobdiff {

// Deterministic PRNG with explicit streams. Normal draws use Box-Muller on
// top of a splitmix-seeded xoshiro-style state so results do not depend on
// libstdc++ distribution internals.
class Rng {
public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  // Derives an independent child stream, e.g. child("noise", step).
  Rng child(const std::string& tag, uint64_t index = 0) const;

  uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // standard normal
  int uniform_int(int lo, int hi);       // inclusive range

  void fill_normal(Tensor& t);
  void fill_uniform(Tensor& t, double lo, double hi);
  Tensor normal_like(const std::vector<int>& shape);

  // Fisher-Yates permutation of 0..n-1.
  std::vector<int> permutation(int n);

  static uint64_t mix(uint64_t a, uint64_t b);

private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace blobdiff
