#include "prf/fusion.hpp"

#include <algorithm>
#include <map>

#include "prf/geometry.hpp"

namespace prf {

std::vector<std::size_t> uniform_stride_indices(std::size_t n, std::size_t k) {
  if (k > n) throw ContractError("uniform_stride_indices: k exceeds n");
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i * n / k;
  return idx;
}

FusionGraph init_global_graph(const Tensor& f2d, const Tensor& f3d,
                              std::size_t n2d_samples,
                              std::size_t n3d_samples) {
  if (f2d.cols() != f3d.cols())
    throw DimensionError("init_global_graph: feature dims differ");
  if (n2d_samples > f2d.rows() || n3d_samples > f3d.rows())
    throw ContractError("init_global_graph: sample count exceeds map size");

  const auto idx2d = uniform_stride_indices(f2d.rows(), n2d_samples);
  const auto idx3d = uniform_stride_indices(f3d.rows(), n3d_samples);

  FusionGraph g;
  g.n2d = n2d_samples;
  g.n3d = n3d_samples;
  g.features = concat_rows({gather_rows(f2d, idx2d), gather_rows(f3d, idx3d),
                            rows_mean(f2d), rows_mean(f3d)});
  g.tags.reserve(n2d_samples + n3d_samples + 2);
  g.src_index.reserve(n2d_samples + n3d_samples + 2);
  for (std::size_t i : idx2d) {
    g.tags.push_back(NodeTag::Sample2D);
    g.src_index.push_back(i);
  }
  for (std::size_t i : idx3d) {
    g.tags.push_back(NodeTag::Sample3D);
    g.src_index.push_back(i);
  }
  g.tags.push_back(NodeTag::Pool2D);
  g.src_index.push_back(0);
  g.tags.push_back(NodeTag::Pool3D);
  g.src_index.push_back(0);
  return g;
}

Tensor gem_pool(const Tensor& features, const Tensor& p) {
  if (features.rows() == 0 || features.numel() == 0)
    throw ContractError("gem_pool: empty input");
  Tensor powered = pow(clamp_min(features, kPowClamp), p);
  // The mean of powered values is >= kPowClamp^p > 0 already; the outer root
  // only guards against exact zero so the result stays the true mean root.
  return pow(rows_mean(powered), reciprocal(p), 1e-300);
}

Mlp Mlp::init(std::size_t c, Rng& rng) {
  Mlp m;
  m.W1 = Tensor::xavier(c, c, rng);
  m.b1 = Tensor::zeros({c}, true);
  m.W2 = Tensor::xavier(c, c, rng);
  m.b2 = Tensor::zeros({c}, true);
  return m;
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = tanh(add(matmul(x, W1), b1));
  return add(x, add(matmul(h, W2), b2));
}

GfmParams GfmParams::init(std::size_t c, Rng& rng) {
  GfmParams p;
  p.attn = AttentionParams::init(c, rng);
  p.p_gem = Tensor::scalar(3.0, true);
  p.mlp2d = Mlp::init(c, rng);
  p.mlp3d = Mlp::init(c, rng);
  return p;
}

GfmOutput gfm_forward(const Tensor& f2d, const Tensor& f3d,
                      const GfmParams& params, const FusionConfig& cfg) {
  FusionGraph graph =
      init_global_graph(f2d, f3d, cfg.n2d_samples, cfg.n3d_samples);
  GfmOutput out;
  // complete graph incl. self-loops: unmasked attention
  Tensor attended =
      attention_forward(graph.features, params.attn, cfg.attention,
                        cfg.metric_ode, nullptr, &out.metric_near_zero);
  out.f_gfm = gem_pool(attended, params.p_gem);
  out.f2d = params.mlp2d.forward(add(f2d, out.f_gfm));
  out.f3d = params.mlp3d.forward(add(f3d, out.f_gfm));
  return out;
}

LfmParams LfmParams::init(std::size_t c, Rng& rng) {
  LfmParams p;
  p.attn = AttentionParams::init(c, rng);
  return p;
}

LfmOutput lfm_forward(const Tensor& f2d,
                      const std::vector<std::array<double, 2>>& coords2d,
                      const Tensor& f3d,
                      const std::vector<std::array<double, 2>>& coords3d,
                      const std::vector<std::uint8_t>& valid3d,
                      const LfmParams& params, const LfmConfig& cfg) {
  const std::size_t n2d = f2d.rows(), n3d = f3d.rows();
  if (coords2d.size() != n2d || coords3d.size() != n3d ||
      valid3d.size() != n3d)
    throw ContractError("lfm_forward: coordinate count mismatch");
  if (f2d.cols() != f3d.cols())
    throw DimensionError("lfm_forward: feature dims differ");

  // window of every valid node; 2D nodes are always on-grid
  std::vector<std::array<double, 2>> valid_coords;
  std::vector<std::size_t> valid_nodes;  // combined index: 2D first, then 3D
  for (std::size_t i = 0; i < n2d; ++i) {
    valid_coords.push_back(coords2d[i]);
    valid_nodes.push_back(i);
  }
  for (std::size_t i = 0; i < n3d; ++i) {
    if (!valid3d[i]) continue;
    valid_coords.push_back(coords3d[i]);
    valid_nodes.push_back(n2d + i);
  }
  const auto windows =
      assign_windows(valid_coords, cfg.dh, cfg.dw, cfg.grid_h, cfg.grid_w);

  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>>
      grouped;
  for (std::size_t t = 0; t < valid_nodes.size(); ++t)
    grouped[{windows[t].u, windows[t].v}].push_back(valid_nodes[t]);

  LfmOutput out;
  out.windows.tags.reserve(n2d + n3d);
  for (std::size_t i = 0; i < n2d; ++i)
    out.windows.tags.push_back(NodeTag::Sample2D);
  for (std::size_t i = 0; i < n3d; ++i)
    out.windows.tags.push_back(NodeTag::Sample3D);

  Tensor combined = concat_rows({f2d, f3d});
  if (grouped.empty()) {  // nothing valid: identity pass-through
    out.f2d = gather_rows(combined, uniform_stride_indices(n2d, n2d));
    out.f3d = f3d;
    return out;
  }

  // gather nodes window by window; block-diagonal mask keeps attention
  // confined to each window (same semantics as a per-window loop)
  std::vector<std::size_t> order;
  for (const auto& [key, nodes] : grouped) {
    out.windows.groups.push_back({key.first, key.second, nodes});
    order.insert(order.end(), nodes.begin(), nodes.end());
  }
  RowMask mask{order.size(), order.size(),
               std::vector<std::uint8_t>(order.size() * order.size(), 0)};
  std::size_t off = 0;
  for (const auto& g : out.windows.groups) {
    for (std::size_t a = 0; a < g.nodes.size(); ++a)
      for (std::size_t b = 0; b < g.nodes.size(); ++b)
        mask.at(off + a, off + b) = 1;
    off += g.nodes.size();
  }

  Tensor gathered = gather_rows(combined, order);
  Tensor attended =
      attention_forward(gathered, params.attn, cfg.attention, cfg.metric_ode,
                        &mask, &out.metric_near_zero);
  // invalid nodes keep their input rows
  Tensor merged = scatter_rows_merge(combined, attended, order);

  std::vector<std::size_t> idx2(n2d), idx3(n3d);
  for (std::size_t i = 0; i < n2d; ++i) idx2[i] = i;
  for (std::size_t i = 0; i < n3d; ++i) idx3[i] = n2d + i;
  out.f2d = gather_rows(merged, idx2);
  out.f3d = gather_rows(merged, idx3);
  return out;
}

}  // namespace prf
