#include "prf/ndm.hpp"

#include <algorithm>
#include <numeric>

namespace prf {

NdmParams NdmParams::init(std::size_t c, bool with_positions, Rng& rng) {
  NdmParams p;
  const std::size_t d = c + (with_positions ? 2 : 0);
  p.Wx = Tensor::xavier(c, c, rng);
  p.Wy = Tensor::xavier(d, d, rng);
  return p;
}

Tensor build_knn_attention(const Tensor& x, const Tensor& Wy, std::size_t k) {
  const std::size_t n = x.rows();
  if (k < 1 || k > n)
    throw ContractError("build_knn_attention: need 1 <= K <= n");
  Tensor y = matmul(x, Wy);
  Tensor sim = matmul(y, transpose(y));

  RowMask mask{n, n, std::vector<std::uint8_t>(n * n, 0)};
  const auto& s = sim.data();
  std::vector<std::size_t> others;
  others.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    mask.at(i, i) = 1;  // self always kept
    others.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) others.push_back(j);
    const std::size_t keep = k - 1;
    std::partial_sort(others.begin(), others.begin() + keep, others.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double sa = s[i * n + a], sb = s[i * n + b];
                        if (sa != sb) return sa > sb;
                        return a < b;  // tie: lower index
                      });
    for (std::size_t t = 0; t < keep; ++t) mask.at(i, others[t]) = 1;
  }
  return softmax_rows(sim, &mask);
}

Tensor ndm_forward(const Tensor& x0,
                   const std::vector<std::array<double, 2>>& positions,
                   const NdmParams& params, const DiffusionConfig& cfg) {
  const std::size_t n = x0.rows();
  if (!x0.all_finite()) throw ContractError("ndm_forward: non-finite input");
  if (!positions.empty() && positions.size() != n)
    throw ContractError("ndm_forward: position count mismatch");

  Tensor pos;
  if (!positions.empty()) {
    std::vector<double> pd;
    pd.reserve(2 * n);
    for (const auto& p : positions) {
      pd.push_back(p[0]);
      pd.push_back(p[1]);
    }
    pos = Tensor::from_data({n, 2}, std::move(pd));
  }

  auto flow = [&](const Tensor& x, double) {
    Tensor adj_in = pos.defined() ? concat_cols(x, pos) : x;
    Tensor a = build_knn_attention(adj_in, params.Wy, cfg.k);
    // (A - E) X Wx computed as (A X - X) Wx
    Tensor mixed = sub(matmul(a, x), x);
    return matmul(mixed, params.Wx);
  };
  return ode_integrate(flow, {x0, 0.0, cfg.t1, cfg.steps});
}

}  // namespace prf
