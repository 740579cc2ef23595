#pragma once

#include <random>
#include <vector>

#include "fedlora/model.hpp"

namespace fedlora::testing {

inline Tensor random_tensor(Shape shape, unsigned seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = u(rng);
  return Tensor(std::move(shape), std::move(d));
}

// 32×32 images, 8×8 P1 grid with 4×4 windows, 4×4 P2 grid.
inline ModelConfig tiny_config(std::size_t embed = 16, std::size_t depth = 1) {
  ModelConfig c;
  c.image_size = 32;
  c.patch1 = 4;
  c.patch2 = 8;
  c.embed_dim = embed;
  c.depth = depth;
  c.heads = 2;
  c.window = 4;
  c.ffn_dim = 2 * embed;
  c.num_classes = 7;
  return c;
}

// Fills every B with small random values so adapters actually contribute.
inline void randomize_adapters(MsDeit& m, unsigned seed) {
  unsigned k = seed;
  for (auto& [p, a] : m.adapters()) {
    auto src = random_tensor(a->B.shape(), ++k, -0.1, 0.1);
    auto dst = a->B.mutable_data();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
  }
}

}  // namespace fedlora::testing
