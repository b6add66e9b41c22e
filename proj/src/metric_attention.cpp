#include "prf/metric_attention.hpp"

#include <cmath>

namespace prf {

AttentionParams AttentionParams::init(std::size_t c, Rng& rng) {
  AttentionParams p;
  p.Wq = Tensor::xavier(c, c, rng);
  p.Wk = Tensor::xavier(c, c, rng);
  p.Wv = Tensor::xavier(c, c, rng);
  p.Wg = Tensor::xavier(c, c, rng);
  return p;
}

MetricField evolve_metric(const Tensor& features, const Tensor& Wg,
                          const MetricOdeConfig& cfg) {
  const Activation sigma = cfg.sigma;
  auto field = [&Wg, sigma](const Tensor& g, double) {
    Tensor v = matmul(g, Wg);
    return sigma == Activation::Tanh ? tanh(v) : v;
  };
  MetricField out;
  out.G = ode_integrate(field, {features, cfg.t0, cfg.t1, cfg.steps});
  std::size_t near_zero = 0;
  for (double v : out.G.data())
    if (std::abs(v) < 1e-8) ++near_zero;
  out.near_zero_fraction =
      static_cast<double>(near_zero) / static_cast<double>(out.G.numel());
  return out;
}

Tensor metric_attention(const Tensor& features, const Tensor& G,
                        const AttentionParams& params, const RowMask* mask,
                        Tensor* attn_out) {
  if (G.shape() != features.shape())
    throw DimensionError("metric_attention: metric shape mismatch");
  Tensor q = matmul(features, params.Wq);
  Tensor k = matmul(features, params.Wk);
  Tensor v = matmul(features, params.Wv);
  // <q_i, k_j>_diag(G_i) = sum_d q_id G_id k_jd
  Tensor logits = matmul(mul(q, G), transpose(k));
  Tensor a = softmax_rows(logits, mask);
  if (attn_out) *attn_out = a;
  return matmul(a, v);
}

Tensor attention_forward(const Tensor& features, const AttentionParams& params,
                         AttentionMode mode, const MetricOdeConfig& ode_cfg,
                         const RowMask* mask, double* near_zero_fraction) {
  if (near_zero_fraction) *near_zero_fraction = 0.0;
  switch (mode) {
    case AttentionMode::Mlp:
      // per-node update, no cross-node message passing
      return matmul(tanh(matmul(features, params.Wq)), params.Wv);
    case AttentionMode::Vanilla: {
      Tensor ones = Tensor::full(features.shape(), 1.0);
      return metric_attention(features, ones, params, mask);
    }
    case AttentionMode::MetricNoOde:
      return metric_attention(features, features, params, mask);
    case AttentionMode::MetricNoActivation: {
      MetricOdeConfig cfg = ode_cfg;
      cfg.sigma = Activation::Identity;
      MetricField f = evolve_metric(features, params.Wg, cfg);
      if (near_zero_fraction) *near_zero_fraction = f.near_zero_fraction;
      return metric_attention(features, f.G, params, mask);
    }
    case AttentionMode::Metric: {
      MetricField f = evolve_metric(features, params.Wg, ode_cfg);
      if (near_zero_fraction) *near_zero_fraction = f.near_zero_fraction;
      return metric_attention(features, f.G, params, mask);
    }
  }
  throw ContractError("attention_forward: unknown mode");
}

}  // namespace prf
