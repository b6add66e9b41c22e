#include "prf/gradcheck.hpp"

#include "prf/fusion.hpp"
#include "prf/metric_attention.hpp"
#include "prf/ndm.hpp"
#include "prf/model.hpp"
#include "prf/training.hpp"

namespace prf {

std::vector<std::pair<std::string, double>> gradcheck_suite(std::uint64_t seed,
                                                            double h) {
  std::vector<std::pair<std::string, double>> report;
  Rng rng(seed);

  {  // metric ODE
    Tensor f = Tensor::uniform({5, 3}, rng, -1, 1, true);
    Tensor wg = Tensor::uniform({3, 3}, rng, -0.7, 0.7, true);
    Tensor readout = Tensor::uniform({5, 3}, rng, -1, 1);
    MetricOdeConfig cfg;
    cfg.steps = 4;
    auto fwd = [&] {
      return sum(mul(evolve_metric(f, wg, cfg).G, readout));
    };
    report.emplace_back("metric-ode", grad_check(fwd, {f, wg}, h));
  }
  {  // metric attention
    const std::size_t n = 6, c = 4;
    Tensor f = Tensor::uniform({n, c}, rng, -1, 1, true);
    AttentionParams p = AttentionParams::init(c, rng);
    Tensor g = Tensor::uniform({n, c}, rng, -1, 1, true);
    Tensor readout = Tensor::uniform({n, c}, rng, -1, 1);
    auto fwd = [&] { return sum(mul(metric_attention(f, g, p), readout)); };
    report.emplace_back("metric-attention",
                        grad_check(fwd, {f, g, p.Wq, p.Wk, p.Wv}, h));
  }
  {  // GFM
    const std::size_t hw = 12, n = 9, c = 4;
    Tensor f2d = Tensor::uniform({hw, c}, rng, -1, 1, true);
    Tensor f3d = Tensor::uniform({n, c}, rng, -1, 1, true);
    GfmParams params = GfmParams::init(c, rng);
    FusionConfig cfg;
    cfg.n2d_samples = 6;
    cfg.n3d_samples = 5;
    cfg.metric_ode.steps = 2;
    Tensor r2 = Tensor::uniform({hw, c}, rng, -1, 1);
    Tensor r3 = Tensor::uniform({n, c}, rng, -1, 1);
    auto fwd = [&] {
      auto out = gfm_forward(f2d, f3d, params, cfg);
      return add(sum(mul(out.f2d, r2)),
                 add(sum(mul(out.f3d, r3)), sum(out.f_gfm)));
    };
    report.emplace_back(
        "gfm", grad_check(fwd,
                          {f2d, f3d, params.attn.Wq, params.attn.Wg,
                           params.p_gem, params.mlp2d.W1, params.mlp3d.W2},
                          h));
  }
  {  // LFM
    const std::size_t gh = 2, gw = 3, n3d = 5, c = 3;
    Tensor f2d = Tensor::uniform({gh * gw, c}, rng, -1, 1, true);
    Tensor f3d = Tensor::uniform({n3d, c}, rng, -1, 1, true);
    std::vector<std::array<double, 2>> c2d, c3d;
    std::vector<std::uint8_t> valid;
    for (std::size_t r = 0; r < gh; ++r)
      for (std::size_t cc = 0; cc < gw; ++cc) c2d.push_back({r + 0.5, cc + 0.5});
    for (std::size_t i = 0; i < n3d; ++i) {
      c3d.push_back({rng.uniform(0.0, static_cast<double>(gh)),
                     rng.uniform(0.0, static_cast<double>(gw))});
      valid.push_back(i % 5 == 4 ? 0 : 1);
    }
    LfmParams params = LfmParams::init(c, rng);
    LfmConfig cfg;
    cfg.grid_h = gh;
    cfg.grid_w = gw;
    cfg.metric_ode.steps = 2;
    Tensor r2 = Tensor::uniform({gh * gw, c}, rng, -1, 1);
    Tensor r3 = Tensor::uniform({n3d, c}, rng, -1, 1);
    auto fwd = [&] {
      auto out = lfm_forward(f2d, c2d, f3d, c3d, valid, params, cfg);
      return add(sum(mul(out.f2d, r2)), sum(mul(out.f3d, r3)));
    };
    report.emplace_back(
        "lfm", grad_check(
                   fwd, {f2d, f3d, params.attn.Wq, params.attn.Wv,
                         params.attn.Wg},
                   h));
  }
  {  // NDM
    const std::size_t n = 8, c = 4;
    Tensor x0 = Tensor::uniform({n, c}, rng, -1, 1, true);
    NdmParams params = NdmParams::init(c, true, rng);
    DiffusionConfig cfg;
    cfg.k = 4;
    cfg.steps = 2;
    std::vector<std::array<double, 2>> pos;
    for (std::size_t i = 0; i < n; ++i)
      pos.push_back({rng.uniform(0, 1), rng.uniform(0, 1)});
    Tensor readout = Tensor::uniform({n, c}, rng, -1, 1);
    auto fwd = [&] {
      return sum(mul(ndm_forward(x0, pos, params, cfg), readout));
    };
    report.emplace_back("ndm", grad_check(fwd, {x0, params.Wx, params.Wy}, h));
  }
  {  // GeM pooling
    Tensor f = Tensor::uniform({6, 4}, rng, 0.05, 2.0, true);
    Tensor p = Tensor::scalar(3.0, true);
    auto fwd = [&] { return sum(gem_pool(f, p)); };
    report.emplace_back("gem", grad_check(fwd, {f, p}, h));
  }
  {  // 2D backbone
    const std::size_t h2 = 8, w2 = 12, c = 4;
    Backbone2dParams params = Backbone2dParams::init(c, rng);
    std::vector<double> image(h2 * w2);
    for (auto& v : image) v = rng.uniform(0, 1);
    Tensor readout = Tensor::uniform({2, c}, rng, -1, 1);  // 1x2 feature grid
    auto fwd = [&] {
      auto out = backbone_2d(image, h2, w2, params);
      return sum(mul(out.features, readout));
    };
    report.emplace_back(
        "backbone2d",
        grad_check(fwd, {params.w1, params.b1, params.w2, params.w3,
                         params.b3},
                   h));
  }
  {  // 3D backbone
    Backbone3dParams params = Backbone3dParams::init(4, rng);
    std::vector<Vec3> points;
    for (int i = 0; i < 12; ++i)
      points.push_back({rng.uniform(-10, 10), rng.uniform(-10, 10),
                        rng.uniform(0, 4)});
    auto fwd = [&] {
      auto out = backbone_3d(points, 0.1, params);
      return sum(square(out.features));
    };
    report.emplace_back(
        "backbone3d",
        grad_check(fwd, {params.w1, params.b1, params.w2, params.b2}, h));
  }
  {  // triplet loss
    Tensor fa = Tensor::uniform({1, 6}, rng, -1, 1, true);
    Tensor fp = Tensor::uniform({1, 6}, rng, -1, 1, true);
    Tensor fn = Tensor::uniform({1, 6}, rng, -1, 1, true);
    auto fwd = [&] { return triplet_loss(fa, fp, fn, 0.5); };
    report.emplace_back("triplet-loss", grad_check(fwd, {fa, fp, fn}, h));
  }
  return report;
}

}  // namespace prf
