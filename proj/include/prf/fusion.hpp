#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "prf/metric_attention.hpp"
#include "prf/tensor.hpp"

namespace prf {

enum class NodeTag : std::uint8_t { Sample2D, Sample3D, Pool2D, Pool3D };

// Fusion graph over uniformly downsampled 2D/3D features plus one pooled
// summary node per modality.
struct FusionGraph {
  Tensor features;  // (n2d + n3d + 2) x c
  std::vector<NodeTag> tags;
  std::vector<std::size_t> src_index;  // into the full maps; pools use 0
  std::size_t n2d = 0, n3d = 0;
};

struct FusionConfig {
  std::size_t n2d_samples = 16;
  std::size_t n3d_samples = 16;
  AttentionMode attention = AttentionMode::Metric;
  MetricOdeConfig metric_ode;
};

// Deterministic uniform-stride index sampling of k out of n.
std::vector<std::size_t> uniform_stride_indices(std::size_t n, std::size_t k);

FusionGraph init_global_graph(const Tensor& f2d, const Tensor& f3d,
                              std::size_t n2d_samples,
                              std::size_t n3d_samples);

// Generalized-mean pooling over rows: ((1/n) sum_i F_i^p)^(1/p) per column.
// Features are clamped to >= kPowClamp before powering.
Tensor gem_pool(const Tensor& features, const Tensor& p);

// Two-layer residual perceptron c -> c -> c with tanh hidden activation:
// x + tanh(x W1 + b1) W2 + b2. Zero weights reproduce the input exactly.
struct Mlp {
  Tensor W1, b1, W2, b2;
  static Mlp init(std::size_t c, Rng& rng);
  Tensor forward(const Tensor& x) const;
};

struct GfmParams {
  AttentionParams attn;
  Tensor p_gem;  // learnable GeM exponent for the fused summary
  Mlp mlp2d, mlp3d;
  static GfmParams init(std::size_t c, Rng& rng);
};

struct GfmOutput {
  Tensor f2d;     // hw x c
  Tensor f3d;     // n x c
  Tensor f_gfm;   // 1 x c fused summary
  double metric_near_zero = 0.0;
};

GfmOutput gfm_forward(const Tensor& f2d, const Tensor& f3d,
                      const GfmParams& params, const FusionConfig& cfg);

// Ragged grouping of node indices per window; indices address the combined
// [2D; 3D] node ordering.
struct WindowBatch {
  struct Group {
    std::size_t u = 0, v = 0;
    std::vector<std::size_t> nodes;
  };
  std::vector<Group> groups;
  std::vector<NodeTag> tags;  // per combined node
};

struct LfmParams {
  AttentionParams attn;
  static LfmParams init(std::size_t c, Rng& rng);
};

struct LfmConfig {
  double dh = 1.0, dw = 1.0;
  double grid_h = 0.0, grid_w = 0.0;  // feature-plane extents
  AttentionMode attention = AttentionMode::Metric;
  MetricOdeConfig metric_ode;
};

struct LfmOutput {
  Tensor f2d;
  Tensor f3d;
  WindowBatch windows;
  double metric_near_zero = 0.0;
};

// Groups valid nodes into non-overlapping windows and runs complete-graph
// metric attention inside each window. Invalid 3D nodes pass through
// unchanged. coords are (row, col) on the feature plane.
LfmOutput lfm_forward(const Tensor& f2d,
                      const std::vector<std::array<double, 2>>& coords2d,
                      const Tensor& f3d,
                      const std::vector<std::array<double, 2>>& coords3d,
                      const std::vector<std::uint8_t>& valid3d,
                      const LfmParams& params, const LfmConfig& cfg);

}  // namespace prf
