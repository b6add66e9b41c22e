#pragma once

#include "prf/tensor.hpp"

namespace prf {

enum class Activation { Tanh, Identity };

// Attention behavior switches; every arm is a first-class configuration.
//   Metric             - full manifold metric attention (metric from the ODE)
//   Vanilla            - identity metric (plain dot-product attention)
//   MetricNoOde        - metric taken directly as the input features
//   MetricNoActivation - metric ODE run with identity activation
//   Mlp                - no attention; per-node two-layer map
enum class AttentionMode { Metric, Vanilla, MetricNoOde, MetricNoActivation, Mlp };

struct MetricOdeConfig {
  double t0 = 0.0;
  double t1 = 1.0;
  int steps = 8;
  Activation sigma = Activation::Tanh;
};

// Per-point diagonal manifold metric: row i of G is the metric diagonal at
// base point i. Degeneracy is monitored, not corrected.
struct MetricField {
  Tensor G;
  double near_zero_fraction = 0.0;  // share of entries with |G_ij| < 1e-8
};

struct AttentionParams {
  Tensor Wq, Wk, Wv;  // c x c
  Tensor Wg;          // c x c, metric ODE field

  static AttentionParams init(std::size_t c, Rng& rng);
};

// Integrates dg_i/dt = sigma(g_i Wg) from g_i(0) = F_i over [t0, t1];
// row-decoupled, so any subset of rows evolves identically to the whole.
MetricField evolve_metric(const Tensor& features, const Tensor& Wg,
                          const MetricOdeConfig& cfg);

// logits L_ij = (F_i Wq) . diag(G_i) . (F_j Wk); masked row softmax; output
// rows are the resulting convex combinations of F Wv rows. Pass
// attn_out to inspect the attention weights.
Tensor metric_attention(const Tensor& features, const Tensor& G,
                        const AttentionParams& params,
                        const RowMask* mask = nullptr,
                        Tensor* attn_out = nullptr);

// Mode dispatch used by the fusion modules: resolves the metric per the mode,
// then applies metric_attention (or the Mlp arm).
Tensor attention_forward(const Tensor& features, const AttentionParams& params,
                         AttentionMode mode, const MetricOdeConfig& ode_cfg,
                         const RowMask* mask = nullptr,
                         double* near_zero_fraction = nullptr);

}  // namespace prf
