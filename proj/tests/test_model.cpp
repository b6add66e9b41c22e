#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "prf/model.hpp"
#include "prf/synth.hpp"
#include "prf/training.hpp"

using namespace prf;

namespace {

ModelConfig small_config(Variant variant) {
  ModelConfig cfg;
  cfg.variant = variant;
  cfg.c = 8;
  cfg.seed = 7;
  cfg.gfm_samples_2d = 8;
  cfg.gfm_samples_3d = 8;
  cfg.metric_ode.steps = 2;
  cfg.ndm.k = 8;
  cfg.ndm.steps = 2;
  return cfg;
}

World small_world(std::uint64_t seed = 3) {
  WorldConfig wc;
  wc.seed = seed;
  wc.n_places = 4;
  wc.revisit_factor = 2;
  wc.points_per_frame = 96;
  return generate_world(wc);
}

}  // namespace

TEST_CASE("backbone 2d shape and zero linearity") {
  Rng rng(1);
  Backbone2dParams params = Backbone2dParams::init(8, rng);
  std::vector<double> image(64 * 96, 0.0);
  auto out = backbone_2d(image, 64, 96, params);
  CHECK(out.grid_h == 8);
  CHECK(out.grid_w == 12);
  CHECK(out.features.shape() == Shape{96, 8});
  CHECK(out.coords.size() == 96);
  CHECK(out.coords[0][0] == 0.5);
  CHECK(out.positions[0][0] == doctest::Approx(0.5 / 8.0));

  // zero image with zero biases stays zero through tanh stages
  for (double v : out.features.data()) CHECK(v == 0.0);
}

TEST_CASE("backbone 2d interior shift equivariance") {
  Rng rng(2);
  Backbone2dParams params = Backbone2dParams::init(4, rng);
  const std::size_t h = 64, w = 96;
  std::vector<double> image(h * w);
  Rng pix(3);
  for (auto& v : image) v = pix.uniform(0, 1);

  // shift rows down by one backbone stride (8 pixels)
  std::vector<double> shifted(h * w, 0.0);
  for (std::size_t r = kBackboneStride; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      shifted[r * w + c] = image[(r - kBackboneStride) * w + c];

  auto a = backbone_2d(image, h, w, params);
  auto b = backbone_2d(shifted, h, w, params);
  // interior: feature (r, c) of the original equals (r+1, c) of the shifted
  for (std::size_t r = 2; r + 3 < a.grid_h; ++r)
    for (std::size_t c = 2; c + 2 < a.grid_w; ++c)
      for (std::size_t d = 0; d < 4; ++d)
        CHECK(a.features.at(r * a.grid_w + c, d) ==
              doctest::Approx(b.features.at((r + 1) * a.grid_w + c, d))
                  .epsilon(1e-12));
}

TEST_CASE("backbone 3d basics") {
  Rng rng(4);
  Backbone3dParams params = Backbone3dParams::init(8, rng);

  auto single = backbone_3d({{1.0, 2.0, 0.5}}, 0.1, params);
  CHECK(single.features.shape() == Shape{1, 8});
  CHECK(single.points.size() == 1);

  // voxel ordering makes permutations of the input canonical
  std::vector<Vec3> pts;
  for (int i = 0; i < 40; ++i)
    pts.push_back({rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(0, 3)});
  std::vector<Vec3> reversed(pts.rbegin(), pts.rend());
  auto a = backbone_3d(pts, 0.1, params);
  auto b = backbone_3d(reversed, 0.1, params);
  CHECK(a.features.data() == b.features.data());

  CHECK_THROWS_AS(backbone_3d({}, 0.1, params), ContractError);
}

TEST_CASE("model forward produces deterministic 3c descriptor") {
  World world = small_world();
  SceneFrame frame = render_frame(world, 0);

  for (Variant variant : {Variant::PRFusion, Variant::PRFusionPP}) {
    Model model(small_config(variant));
    Tensor d1 = model.forward_graph(frame);
    CHECK(d1.shape() == Shape{1, 3 * 8});
    CHECK(d1.all_finite());
    Tensor d2 = model.forward_graph(frame);
    CHECK(d1.data() == d2.data());  // determinism, bitwise

    DescriptorData e = model.embed(frame);
    CHECK(e.f == d1.data());
    CHECK(e.position == frame.pose.t);
  }
}

TEST_CASE("same config and seed give identical models") {
  World world = small_world();
  SceneFrame frame = render_frame(world, 1);
  Model a(small_config(Variant::PRFusion));
  Model b(small_config(Variant::PRFusion));
  CHECK(a.embed(frame).f == b.embed(frame).f);
}

TEST_CASE("prfusion++ without calibration is a configuration error") {
  World world = small_world();
  SceneFrame frame = render_frame(world, 0);
  frame.cal.reset();
  Model model(small_config(Variant::PRFusionPP));
  CHECK_THROWS_AS(model.forward_graph(frame), ConfigError);

  // PRFusion does not need it
  Model pr(small_config(Variant::PRFusion));
  CHECK_NOTHROW(pr.forward_graph(frame));
}

TEST_CASE("extrinsic perturbation changes ++ but not base descriptors") {
  World world = small_world();
  SceneFrame frame = render_frame(world, 0);
  auto perturbed = perturb_extrinsics(*frame.cal, {0, 0, 1}, 0.05,
                                      {0.2, 0.1, 0.0});
  SceneFrame frame_bad_cal = frame;
  frame_bad_cal.cal = perturbed.cal;

  Model pp(small_config(Variant::PRFusionPP));
  Model pr(small_config(Variant::PRFusion));
  CHECK(pp.embed(frame).f != pp.embed(frame_bad_cal).f);
  CHECK(pr.embed(frame).f == pr.embed(frame_bad_cal).f);  // bitwise equal
}

TEST_CASE("gradient reaches every registered parameter") {
  World world = small_world();
  for (Variant variant : {Variant::PRFusion, Variant::PRFusionPP}) {
    Model model(small_config(variant));
    SceneFrame fa = render_frame(world, 0);
    SceneFrame fp = render_frame(world, 4);  // revisit of place 0
    SceneFrame fn = render_frame(world, 2);
    Tensor loss = triplet_loss(model.forward_graph(fa),
                               model.forward_graph(fp),
                               model.forward_graph(fn), 10.0);
    CHECK(loss.value() > 0.0);  // large margin keeps the hinge active
    backward(loss);
    for (const auto& [name, t] : model.parameters()) {
      REQUIRE(t.has_grad());
      double norm = 0;
      for (double g : t.grad()) norm += g * g;
      INFO("parameter ", name);
      CHECK(norm > 0.0);
    }
  }
}

TEST_CASE("checkpoint round trip is exact") {
  namespace fs = std::filesystem;
  const std::string path =
      (fs::temp_directory_path() / "prf_test_model.ckpt").string();
  World world = small_world();
  SceneFrame frame = render_frame(world, 2);

  Model model(small_config(Variant::PRFusionPP));
  // make the state distinguishable from a fresh init (handles are shallow)
  Tensor first_param = model.parameters()[0].second;
  first_param.raw_data()[0] += 0.25;
  const auto want = model.embed(frame).f;
  model.save(path);

  Model loaded = Model::load(path);
  CHECK(loaded.config().variant == Variant::PRFusionPP);
  CHECK(loaded.config().c == 8);
  CHECK(loaded.embed(frame).f == want);

  // byte-identical re-save
  const std::string path2 = path + ".again";
  loaded.save(path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);

  // corrupted magic is rejected with a format error
  std::fstream corrupt(path, std::ios::in | std::ios::out | std::ios::binary);
  corrupt.seekp(0);
  corrupt.put('X');
  corrupt.close();
  CHECK_THROWS_AS(Model::load(path), FormatError);
  fs::remove(path);
  fs::remove(path2);
}

TEST_CASE("ablation switches alter the architecture") {
  World world = small_world();
  SceneFrame frame = render_frame(world, 0);

  ModelConfig base = small_config(Variant::PRFusionPP);
  Model full(base);

  ModelConfig no_ndm = base;
  no_ndm.use_ndm = false;
  Model ablated(no_ndm);
  CHECK(full.embed(frame).f != ablated.embed(frame).f);
  CHECK(ablated.parameters().size() < full.parameters().size());

  ModelConfig vanilla = base;
  vanilla.attention = AttentionMode::Vanilla;
  Model v(vanilla);
  CHECK(v.embed(frame).f != full.embed(frame).f);

  ModelConfig no_gfm = base;
  no_gfm.use_gfm = false;
  Model g(no_gfm);
  CHECK(g.embed(frame).f.size() == 24);
}
