#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "prf/geometry.hpp"

using namespace prf;

namespace {

const double kPi = 3.14159265358979323846;

CameraModel test_cam() {
  CameraModel cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 50;
  cam.h = cam.w = 100;
  return cam;
}

}  // namespace

TEST_CASE("pinhole projection") {
  ExtrinsicCalibration cal;  // identity
  CameraModel cam = test_cam();

  auto res = project_points({{0, 0, 5}, {1, 0, 5}, {0, 0, -1}}, cal, cam);
  CHECK(res.valid[0] == 1);
  CHECK(res.pixels[0][0] == doctest::Approx(50).epsilon(1e-12));
  CHECK(res.pixels[0][1] == doctest::Approx(50).epsilon(1e-12));
  CHECK(res.pixels[1][0] == doctest::Approx(70).epsilon(1e-12));
  CHECK(res.pixels[1][1] == doctest::Approx(50).epsilon(1e-12));
  CHECK(res.valid[2] == 0);

  // outside the image plane is flagged, not dropped
  auto far = project_points({{10, 0, 5}}, cal, cam);
  CHECK(far.valid[0] == 0);
  CHECK(far.pixels.size() == 1);
}

TEST_CASE("projection invariant under common rigid motion") {
  Rng rng(9);
  CameraModel cam = test_cam();
  ExtrinsicCalibration cal;
  cal.T_cam_from_lidar.R = axis_angle_rotation({0, 1, 0}, 0.3);
  cal.T_cam_from_lidar.t = {0.1, -0.2, 0.05};

  Pose m;  // arbitrary rigid motion of the lidar frame
  m.R = axis_angle_rotation({1, 0, 0}, -0.7);
  m.t = {3, -1, 2};
  ExtrinsicCalibration cal2;
  cal2.T_cam_from_lidar = cal.T_cam_from_lidar.compose(m.inverse());

  std::vector<Vec3> pts;
  for (int i = 0; i < 50; ++i)
    pts.push_back({rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(2, 9)});
  std::vector<Vec3> pts2;
  for (const auto& p : pts) pts2.push_back(m.apply(p));

  auto a = project_points(pts, cal, cam);
  auto b = project_points(pts2, cal2, cam);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK(a.valid[i] == b.valid[i]);
    if (a.valid[i]) {
      CHECK(a.pixels[i][0] == doctest::Approx(b.pixels[i][0]).epsilon(1e-9));
      CHECK(a.pixels[i][1] == doctest::Approx(b.pixels[i][1]).epsilon(1e-9));
    }
  }
}

TEST_CASE("window assignment") {
  auto w = assign_windows({{3, 5}}, 2, 2, 10, 10);
  CHECK(w[0].u == 1);
  CHECK(w[0].v == 2);

  // unit windows: index equals integer pixel coordinate
  auto u = assign_windows({{3.5, 7.25}}, 1, 1, 10, 10);
  CHECK(u[0].u == 3);
  CHECK(u[0].v == 7);

  CHECK_THROWS_AS(assign_windows({{10, 0}}, 1, 1, 10, 10), ContractError);
  CHECK_THROWS_AS(assign_windows({{-0.1, 0}}, 1, 1, 10, 10), ContractError);
}

TEST_CASE("window assignment matches brute-force partition") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const double h = 8, w = 12;
    const double dh = 1 + static_cast<double>(rng.next_u64() % 4);
    const double dw = 1 + static_cast<double>(rng.next_u64() % 4);
    std::vector<std::array<double, 2>> coords;
    for (int i = 0; i < 40; ++i)
      coords.push_back({rng.uniform(0, h - 1e-9), rng.uniform(0, w - 1e-9)});
    auto got = assign_windows(coords, dh, dw, h, w);

    // brute force: enumerate windows, claim points by half-open interval
    std::vector<int> claimed(coords.size(), 0);
    const std::size_t nu = static_cast<std::size_t>(std::ceil(h / dh));
    const std::size_t nv = static_cast<std::size_t>(std::ceil(w / dw));
    for (std::size_t u = 0; u < nu; ++u)
      for (std::size_t v = 0; v < nv; ++v)
        for (std::size_t i = 0; i < coords.size(); ++i) {
          const bool inside = coords[i][0] >= u * dh &&
                              coords[i][0] < (u + 1) * dh &&
                              coords[i][1] >= v * dw &&
                              coords[i][1] < (v + 1) * dw;
          if (inside) {
            ++claimed[i];
            CHECK(got[i].u == u);
            CHECK(got[i].v == v);
          }
        }
    // partition: every point claimed exactly once
    for (int c : claimed) CHECK(c == 1);
  }
}

TEST_CASE("voxel downsampling") {
  auto one = voxel_downsample({{0.5, 0.5, 0.5}}, 0.1);
  REQUIRE(one.size() == 1);
  CHECK(one[0][0] == doctest::Approx(0.5).epsilon(1e-12));

  auto two = voxel_downsample({{0.01, 0, 0}, {0.05, 0, 0}, {1.2, 0, 0}}, 0.1);
  REQUIRE(two.size() == 2);
  CHECK(two[0][0] == doctest::Approx(0.03).epsilon(1e-12));
  CHECK(two[1][0] == doctest::Approx(1.2).epsilon(1e-12));

  auto collapsed = voxel_downsample({{0.01, 0, 0}, {0.02, 0, 0}}, 1.0);
  REQUIRE(collapsed.size() == 1);
  CHECK(collapsed[0][0] == doctest::Approx(0.015).epsilon(1e-12));

  CHECK(voxel_downsample({}, 0.1).empty());
}

TEST_CASE("voxel downsampling idempotent") {
  Rng rng(4);
  std::vector<Vec3> pts;
  for (int i = 0; i < 500; ++i)
    pts.push_back(
        {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-1, 1)});
  auto once = voxel_downsample(pts, 0.25);
  auto twice = voxel_downsample(once, 0.25);
  REQUIRE(once.size() == twice.size());
  for (std::size_t i = 0; i < once.size(); ++i)
    for (int k = 0; k < 3; ++k) CHECK(once[i][k] == twice[i][k]);
}

TEST_CASE("extrinsic perturbation") {
  ExtrinsicCalibration cal;
  cal.T_cam_from_lidar.t = {1, 2, 3};

  auto id = perturb_extrinsics(cal, {0, 0, 1}, 0.0, {0, 0, 0});
  CHECK(id.t_e == 0.0);
  CHECK(id.r_e == 0.0);
  CHECK(id.cal.T_cam_from_lidar.R == cal.T_cam_from_lidar.R);
  CHECK(id.cal.T_cam_from_lidar.t == cal.T_cam_from_lidar.t);

  auto rot = perturb_extrinsics(cal, {0, 0, 1}, kPi / 6.0, {0, 0, 0});
  CHECK(rot.r_e == doctest::Approx(0.5235987755982988).epsilon(1e-12));

  auto tr = perturb_extrinsics(cal, {0, 0, 1}, 0.0, {3, 4, 0});
  CHECK(tr.t_e == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(tr.cal.T_cam_from_lidar.t[0] == doctest::Approx(4.0));
}

TEST_CASE("rotation error equals angle up to pi") {
  Rng rng(17);
  ExtrinsicCalibration cal;
  for (int i = 0; i < 100; ++i) {
    Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    const double n = vec3_norm(axis);
    axis = {axis[0] / n, axis[1] / n, axis[2] / n};
    const double angle = rng.uniform(-kPi, kPi);
    auto p = perturb_extrinsics(cal, axis, angle, {0, 0, 0});
    CHECK(p.r_e >= 0.0);
    CHECK(p.r_e <= kPi + 1e-12);
    CHECK(p.r_e == doctest::Approx(std::abs(angle)).epsilon(1e-7));
    CHECK(p.cal.T_cam_from_lidar.is_valid_rotation(1e-9));
  }
}

TEST_CASE("image perturbation") {
  std::vector<double> img(64 * 64, 0.5);

  auto same = perturb_image(img, 0.0, 123);
  CHECK(same == img);

  auto a = perturb_image(img, 0.2, 7);
  auto b = perturb_image(img, 0.2, 7);
  CHECK(a == b);  // determinism

  // moment statistics of the additive noise
  std::vector<double> big(200000, 0.0);
  const double alpha = 0.3;
  auto noisy = perturb_image(big, alpha, 99);
  double mean = 0, var = 0;
  for (double v : noisy) mean += v;
  mean /= static_cast<double>(noisy.size());
  for (double v : noisy) var += (v - mean) * (v - mean);
  var /= static_cast<double>(noisy.size());
  const double n = static_cast<double>(noisy.size());
  CHECK(std::abs(mean) < 3.0 * alpha / std::sqrt(n));
  CHECK(var == doctest::Approx(alpha * alpha).epsilon(0.02));
}

TEST_CASE("calibration file round trip") {
  ExtrinsicCalibration cal;
  cal.T_cam_from_lidar.R = axis_angle_rotation({0, 1, 0}, 0.25);
  cal.T_cam_from_lidar.t = {0.12, -0.07, 1.9};
  CameraModel cam = test_cam();

  const std::string path = "/tmp/prf_test_calib.txt";
  save_calibration_file(path, cal, cam);
  ExtrinsicCalibration cal2;
  CameraModel cam2;
  load_calibration_file(path, cal2, cam2);
  for (int i = 0; i < 9; ++i)
    CHECK(cal2.T_cam_from_lidar.R[i] ==
          doctest::Approx(cal.T_cam_from_lidar.R[i]).epsilon(1e-15));
  CHECK(cam2.fx == cam.fx);
  CHECK(cam2.w == cam.w);
}
