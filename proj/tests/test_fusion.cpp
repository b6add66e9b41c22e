#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "prf/fusion.hpp"

using namespace prf;

namespace {

// GeM reference: plain loops over clamped inputs.
std::vector<double> gem_oracle(const std::vector<double>& f, std::size_t n,
                               std::size_t c, double p) {
  std::vector<double> out(c, 0.0);
  for (std::size_t j = 0; j < c; ++j) {
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i)
      acc += std::pow(std::max(f[i * c + j], 1e-6), p);
    out[j] = std::pow(acc / static_cast<double>(n), 1.0 / p);
  }
  return out;
}

}  // namespace

TEST_CASE("gem pooling basics") {
  // p = 1 is mean pooling
  Tensor f = Tensor::from_data({2, 2}, {1, 3, 2, 5});
  Tensor p1 = Tensor::scalar(1.0);
  Tensor g = gem_pool(f, p1);
  CHECK(g.at(0, 0) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(g.at(0, 1) == doctest::Approx(4.0).epsilon(1e-12));

  // p = 3 direct arithmetic: ((1 + 8)/2)^(1/3)
  Tensor col = Tensor::from_data({2, 1}, {1, 2});
  Tensor g3 = gem_pool(col, Tensor::scalar(3.0));
  CHECK(g3.value() == doctest::Approx(std::pow(4.5, 1.0 / 3.0)).epsilon(1e-12));
  CHECK(g3.value() == doctest::Approx(1.6509636244473134).epsilon(1e-12));

  // large p approaches max: gap is ~ max * ln(n)/p
  Tensor g100 = gem_pool(col, Tensor::scalar(100.0));
  CHECK(std::abs(g100.value() - 2.0) < 2.0 * std::log(2.0) / 100.0 + 1e-6);
  Tensor g1000 = gem_pool(col, Tensor::scalar(1000.0));
  CHECK(std::abs(g1000.value() - 2.0) < 2.0 * std::log(2.0) / 1000.0 + 1e-9);

  CHECK_THROWS_AS(gem_pool(Tensor::zeros({0, 3}), p1), ContractError);
}

TEST_CASE("gem matches brute-force oracle on random instances") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.next_u64() % 8, c = 1 + rng.next_u64() % 6;
    const double p = rng.uniform(1.0, 6.0);
    Tensor f = Tensor::uniform({n, c}, rng, -1.0, 3.0);
    Tensor g = gem_pool(f, Tensor::scalar(p));
    auto want = gem_oracle(f.data(), n, c, p);
    for (std::size_t j = 0; j < c; ++j)
      CHECK(std::abs(g.data()[j] - want[j]) <= 1e-9);
  }
}

TEST_CASE("gem monotone in each entry for p >= 1") {
  Rng rng(32);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 3, c = 2;
    Tensor f = Tensor::uniform({n, c}, rng, 0.1, 2.0);
    const double p = rng.uniform(1.0, 8.0);
    Tensor g0 = gem_pool(f, Tensor::scalar(p));
    Tensor f2 = f.detach();
    const std::size_t i = rng.next_u64() % (n * c);
    f2.raw_data()[i] += 0.3;
    Tensor g1 = gem_pool(f2, Tensor::scalar(p));
    for (std::size_t j = 0; j < c; ++j) CHECK(g1.data()[j] >= g0.data()[j] - 1e-12);
  }
}

TEST_CASE("gem gradient including learnable exponent") {
  Rng rng(33);
  Tensor f = Tensor::uniform({4, 3}, rng, 0.1, 2.0, true);
  Tensor p = Tensor::scalar(3.0, true);
  auto fwd = [&] { return sum(gem_pool(f, p)); };
  CHECK(grad_check(fwd, {f, p}) < 1e-5);
}

TEST_CASE("global graph init") {
  Rng rng(34);
  Tensor f2d = Tensor::uniform({12, 4}, rng, -1, 1);
  Tensor f3d = Tensor::uniform({9, 4}, rng, -1, 1);

  auto g = init_global_graph(f2d, f3d, 12, 9);
  CHECK(g.features.rows() == 12 + 9 + 2);
  CHECK(g.tags[0] == NodeTag::Sample2D);
  CHECK(g.tags[12] == NodeTag::Sample3D);
  CHECK(g.tags[21] == NodeTag::Pool2D);
  CHECK(g.tags[22] == NodeTag::Pool3D);
  // with full sampling the sample block equals the inputs
  for (std::size_t j = 0; j < 4; ++j)
    CHECK(g.features.at(0, j) == f2d.at(0, j));

  // constant 2D map: its pooled node equals the constant row
  Tensor cf = Tensor::full({6, 4}, 0.75);
  auto gc = init_global_graph(cf, f3d, 3, 3);
  for (std::size_t j = 0; j < 4; ++j)
    CHECK(gc.features.at(6, j) == doctest::Approx(0.75).epsilon(1e-12));

  CHECK_THROWS_AS(init_global_graph(f2d, f3d, 13, 9), ContractError);
}

TEST_CASE("gfm forward shapes and permutation behavior") {
  Rng rng(35);
  const std::size_t hw = 12, n = 9, c = 4;
  Tensor f2d = Tensor::uniform({hw, c}, rng, -1, 1);
  Tensor f3d = Tensor::uniform({n, c}, rng, -1, 1);
  GfmParams params = GfmParams::init(c, rng);
  FusionConfig cfg;
  cfg.n2d_samples = 6;
  cfg.n3d_samples = n;  // all 3D points sampled
  cfg.metric_ode.steps = 4;

  auto out = gfm_forward(f2d, f3d, params, cfg);
  CHECK(out.f2d.shape() == Shape{hw, c});
  CHECK(out.f3d.shape() == Shape{n, c});
  CHECK(out.f_gfm.shape() == Shape{1, c});

  // permuting 3D rows permutes f3d output identically; f_gfm unchanged
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n - 1; i > 0; --i)
    std::swap(perm[i], perm[rng.next_u64() % (i + 1)]);
  auto outp = gfm_forward(f2d, gather_rows(f3d, perm), params, cfg);
  for (std::size_t j = 0; j < c; ++j)
    CHECK(outp.f_gfm.at(0, j) ==
          doctest::Approx(out.f_gfm.at(0, j)).epsilon(1e-9));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      CHECK(outp.f3d.at(i, j) ==
            doctest::Approx(out.f3d.at(perm[i], j)).epsilon(1e-9));
}

TEST_CASE("gfm zero-weight mlp reduces to biased features") {
  Rng rng(36);
  const std::size_t hw = 6, n = 4, c = 3;
  Tensor f2d = Tensor::uniform({hw, c}, rng, -1, 1);
  Tensor f3d = Tensor::uniform({n, c}, rng, -1, 1);
  GfmParams params = GfmParams::init(c, rng);
  params.mlp2d.W1 = Tensor::zeros({c, c}, true);
  params.mlp2d.W2 = Tensor::zeros({c, c}, true);
  params.mlp2d.b1 = Tensor::zeros({c}, true);
  params.mlp2d.b2 = Tensor::zeros({c}, true);
  FusionConfig cfg;
  cfg.n2d_samples = hw;
  cfg.n3d_samples = n;
  cfg.metric_ode.steps = 4;

  auto out = gfm_forward(f2d, f3d, params, cfg);
  // residual path only: out.f2d = f2d (+) f_gfm
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t j = 0; j < c; ++j)
      CHECK(out.f2d.at(i, j) ==
            doctest::Approx(f2d.at(i, j) + out.f_gfm.at(0, j)).epsilon(1e-12));
}

TEST_CASE("gfm end-to-end gradient check") {
  Rng rng(37);
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
  CHECK(grad_check(fwd,
                   {f2d, f3d, params.attn.Wq, params.attn.Wk, params.attn.Wv,
                    params.attn.Wg, params.p_gem, params.mlp2d.W1,
                    params.mlp2d.b1, params.mlp2d.W2, params.mlp3d.W1}) <
        1e-4);
}

// ---- LFM -------------------------------------------------------------------

namespace {

struct LfmInstance {
  Tensor f2d, f3d;
  std::vector<std::array<double, 2>> c2d, c3d;
  std::vector<std::uint8_t> valid;
};

LfmInstance make_instance(Rng& rng, std::size_t gh, std::size_t gw,
                          std::size_t n3d, std::size_t c) {
  LfmInstance inst;
  inst.f2d = Tensor::uniform({gh * gw, c}, rng, -1, 1);
  inst.f3d = Tensor::uniform({n3d, c}, rng, -1, 1);
  for (std::size_t r = 0; r < gh; ++r)
    for (std::size_t cc = 0; cc < gw; ++cc)
      inst.c2d.push_back({r + 0.5, cc + 0.5});
  for (std::size_t i = 0; i < n3d; ++i) {
    inst.c3d.push_back({rng.uniform(0, static_cast<double>(gh)),
                        rng.uniform(0, static_cast<double>(gw))});
    inst.valid.push_back(rng.uniform() < 0.8 ? 1 : 0);
  }
  return inst;
}

// Literal per-window double loop: gather each window, run attention on the
// small dense block, write rows back.
std::pair<Tensor, Tensor> lfm_oracle(const LfmInstance& inst,
                                     const LfmParams& params,
                                     const LfmConfig& cfg) {
  const std::size_t n2d = inst.f2d.rows(), n3d = inst.f3d.rows();
  const std::size_t c = inst.f2d.cols();
  std::vector<double> out2 = inst.f2d.data();
  std::vector<double> out3 = inst.f3d.data();

  std::map<std::pair<long, long>, std::vector<std::size_t>> win;
  for (std::size_t i = 0; i < n2d; ++i)
    win[{static_cast<long>(inst.c2d[i][0] / cfg.dh),
         static_cast<long>(inst.c2d[i][1] / cfg.dw)}]
        .push_back(i);
  for (std::size_t i = 0; i < n3d; ++i)
    if (inst.valid[i])
      win[{static_cast<long>(inst.c3d[i][0] / cfg.dh),
           static_cast<long>(inst.c3d[i][1] / cfg.dw)}]
          .push_back(n2d + i);

  Tensor combined = concat_rows({inst.f2d, inst.f3d});
  for (const auto& [key, nodes] : win) {
    Tensor group = gather_rows(combined, nodes);
    MetricField mf = evolve_metric(group, params.attn.Wg, cfg.metric_ode);
    Tensor res = metric_attention(group, mf.G, params.attn);
    for (std::size_t t = 0; t < nodes.size(); ++t) {
      double* dst = nodes[t] < n2d ? &out2[nodes[t] * c]
                                   : &out3[(nodes[t] - n2d) * c];
      for (std::size_t j = 0; j < c; ++j) dst[j] = res.at(t, j);
    }
  }
  return {Tensor::from_data({n2d, c}, std::move(out2)),
          Tensor::from_data({n3d, c}, std::move(out3))};
}

}  // namespace

TEST_CASE("lfm matches per-window brute-force oracle") {
  Rng rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t gh = 3, gw = 4, n3d = 8, c = 3;
    auto inst = make_instance(rng, gh, gw, n3d, c);
    LfmParams params = LfmParams::init(c, rng);
    LfmConfig cfg;
    cfg.dh = 1 + static_cast<double>(rng.next_u64() % 2);
    cfg.dw = 1 + static_cast<double>(rng.next_u64() % 2);
    cfg.grid_h = gh;
    cfg.grid_w = gw;
    cfg.metric_ode.steps = 2;

    auto got = lfm_forward(inst.f2d, inst.c2d, inst.f3d, inst.c3d, inst.valid,
                           params, cfg);
    auto [want2, want3] = lfm_oracle(inst, params, cfg);
    for (std::size_t i = 0; i < got.f2d.numel(); ++i)
      CHECK(std::abs(got.f2d.data()[i] - want2.data()[i]) <= 1e-9);
    for (std::size_t i = 0; i < got.f3d.numel(); ++i)
      CHECK(std::abs(got.f3d.data()[i] - want3.data()[i]) <= 1e-9);
  }
}

TEST_CASE("lfm invalid nodes pass through unchanged") {
  Rng rng(42);
  auto inst = make_instance(rng, 2, 3, 6, 3);
  std::fill(inst.valid.begin(), inst.valid.end(), 0);
  LfmParams params = LfmParams::init(3, rng);
  LfmConfig cfg;
  cfg.grid_h = 2;
  cfg.grid_w = 3;
  cfg.metric_ode.steps = 2;
  auto out = lfm_forward(inst.f2d, inst.c2d, inst.f3d, inst.c3d, inst.valid,
                         params, cfg);
  CHECK(out.f3d.data() == inst.f3d.data());
}

TEST_CASE("lfm single window equals global attention") {
  Rng rng(43);
  auto inst = make_instance(rng, 2, 2, 5, 3);
  std::fill(inst.valid.begin(), inst.valid.end(), 1);
  LfmParams params = LfmParams::init(3, rng);
  LfmConfig cfg;
  cfg.dh = 2;
  cfg.dw = 2;  // one window covers the whole plane
  cfg.grid_h = 2;
  cfg.grid_w = 2;
  cfg.metric_ode.steps = 2;
  auto out = lfm_forward(inst.f2d, inst.c2d, inst.f3d, inst.c3d, inst.valid,
                         params, cfg);
  CHECK(out.windows.groups.size() == 1);

  Tensor combined = concat_rows({inst.f2d, inst.f3d});
  MetricField mf = evolve_metric(combined, params.attn.Wg, cfg.metric_ode);
  Tensor want = metric_attention(combined, mf.G, params.attn);
  for (std::size_t i = 0; i < inst.f2d.numel(); ++i)
    CHECK(std::abs(out.f2d.data()[i] - want.data()[i]) <= 1e-9);
}

TEST_CASE("lfm singleton window returns F Wv") {
  Rng rng(44);
  const std::size_t c = 3;
  Tensor f2d = Tensor::uniform({1, c}, rng, -1, 1);
  std::vector<std::array<double, 2>> c2d{{0.5, 0.5}};
  Tensor f3d = Tensor::uniform({1, c}, rng, -1, 1);
  std::vector<std::array<double, 2>> c3d{{1.5, 1.5}};
  LfmParams params = LfmParams::init(c, rng);
  LfmConfig cfg;
  cfg.grid_h = 2;
  cfg.grid_w = 2;
  cfg.metric_ode.steps = 2;
  auto out = lfm_forward(f2d, c2d, f3d, c3d, {1}, params, cfg);
  Tensor want2 = matmul(f2d, params.attn.Wv);
  Tensor want3 = matmul(f3d, params.attn.Wv);
  for (std::size_t j = 0; j < c; ++j) {
    CHECK(out.f2d.at(0, j) == doctest::Approx(want2.at(0, j)).epsilon(1e-12));
    CHECK(out.f3d.at(0, j) == doctest::Approx(want3.at(0, j)).epsilon(1e-12));
  }
}

TEST_CASE("lfm window groups cover every valid node once") {
  Rng rng(45);
  auto inst = make_instance(rng, 3, 3, 10, 2);
  LfmParams params = LfmParams::init(2, rng);
  LfmConfig cfg;
  cfg.grid_h = 3;
  cfg.grid_w = 3;
  cfg.metric_ode.steps = 2;
  auto out = lfm_forward(inst.f2d, inst.c2d, inst.f3d, inst.c3d, inst.valid,
                         params, cfg);
  std::size_t n_valid = inst.f2d.rows();
  for (auto v : inst.valid) n_valid += v;
  std::vector<int> seen(inst.f2d.rows() + inst.f3d.rows(), 0);
  std::size_t total = 0;
  for (const auto& g : out.windows.groups) {
    CHECK(!g.nodes.empty());
    total += g.nodes.size();
    for (auto nidx : g.nodes) ++seen[nidx];
  }
  CHECK(total == n_valid);
  for (int s : seen) CHECK(s <= 1);
}

TEST_CASE("lfm gradient check") {
  Rng rng(46);
  const std::size_t gh = 2, gw = 3, n3d = 5, c = 3;
  auto inst = make_instance(rng, gh, gw, n3d, c);
  inst.f2d.set_requires_grad(true);
  inst.f3d.set_requires_grad(true);
  LfmParams params = LfmParams::init(c, rng);
  LfmConfig cfg;
  cfg.grid_h = gh;
  cfg.grid_w = gw;
  cfg.metric_ode.steps = 2;
  Tensor r2 = Tensor::uniform({gh * gw, c}, rng, -1, 1);
  Tensor r3 = Tensor::uniform({n3d, c}, rng, -1, 1);
  auto fwd = [&] {
    auto out = lfm_forward(inst.f2d, inst.c2d, inst.f3d, inst.c3d, inst.valid,
                           params, cfg);
    return add(sum(mul(out.f2d, r2)), sum(mul(out.f3d, r3)));
  };
  CHECK(grad_check(fwd, {inst.f2d, inst.f3d, params.attn.Wq, params.attn.Wv,
                         params.attn.Wg}) < 1e-4);
}
