#pragma once

#include <array>
#include <vector>

#include "prf/tensor.hpp"

namespace prf {

struct DiffusionConfig {
  std::size_t k = 25;  // nearest-neighbor count, self included
  double t1 = 1.0;
  int steps = 8;
};

struct NdmParams {
  Tensor Wx;  // c x c, feature flow
  Tensor Wy;  // d x d with d = c (+2 when positional channels are used)
  static NdmParams init(std::size_t c, bool with_positions, Rng& rng);
};

// Row-stochastic attention adjacency: Y = X Wy, S = Y Y^T, keep self plus the
// K-1 largest-similarity others per row (ties to the lower index), masked row
// softmax.
Tensor build_knn_attention(const Tensor& x, const Tensor& Wy, std::size_t k);

// Beltrami-style diffusion dX/dt = (A(t) - E) X Wx with A(t) rebuilt from the
// instantaneous state at every integrator stage (graph rewiring). Positions,
// when given, are constant extra channels visible only to the adjacency: they
// steer the rewiring but never inject into the feature flow, so a constant
// (rank-1) input stays an exact fixed point.
Tensor ndm_forward(const Tensor& x0,
                   const std::vector<std::array<double, 2>>& positions,
                   const NdmParams& params, const DiffusionConfig& cfg);

}  // namespace prf
