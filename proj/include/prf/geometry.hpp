#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "prf/errors.hpp"
#include "prf/rng.hpp"

namespace prf {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

Vec3 mat3_apply(const Mat3& m, const Vec3& v);
Mat3 mat3_mul(const Mat3& a, const Mat3& b);
Mat3 mat3_transpose(const Mat3& m);
Mat3 axis_angle_rotation(const Vec3& axis, double angle);
double vec3_norm(const Vec3& v);

// Rigid transform: x_out = R * x_in + t.
struct Pose {
  Mat3 R{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 t{0, 0, 0};

  Vec3 apply(const Vec3& p) const { return add3(mat3_apply(R, p), t); }
  Pose compose(const Pose& rhs) const;  // this after rhs: x -> this(rhs(x))
  Pose inverse() const;
  // R^T R = I and det(R) = +1, both within tol.
  bool is_valid_rotation(double tol = 1e-9) const;

  static Vec3 add3(const Vec3& a, const Vec3& b) {
    return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
  }
};

struct CameraModel {
  double fx = 0, fy = 0;  // focal lengths, pixels
  double cx = 0, cy = 0;  // principal point, pixels
  std::size_t h = 0, w = 0;

  void validate() const;
};

// T_cam_from_lidar: maps lidar-frame points into the camera frame.
struct ExtrinsicCalibration {
  Pose T_cam_from_lidar;
};

struct WindowIndex {
  std::size_t u = 0;  // row direction (height / dh)
  std::size_t v = 0;  // column direction (width / dw)
  bool operator==(const WindowIndex&) const = default;
};

struct ProjectionResult {
  // (u, v) pixel coordinates; u along width, v along height. Entries with
  // valid=false hold the projection where defined (z > eps) and 0 otherwise;
  // nothing is dropped.
  std::vector<std::array<double, 2>> pixels;
  std::vector<std::uint8_t> valid;
};

inline constexpr double kDepthEps = 1e-6;

ProjectionResult project_points(const std::vector<Vec3>& points_lidar,
                                const ExtrinsicCalibration& cal,
                                const CameraModel& cam);

// coords are (row, col) positions in [0,h) x [0,w); out-of-range input is a
// contract error.
std::vector<WindowIndex> assign_windows(
    const std::vector<std::array<double, 2>>& coords, double dh, double dw,
    double h, double w);

// One centroid per occupied voxel of edge q, ordered lexicographically by
// voxel key.
std::vector<Vec3> voxel_downsample(const std::vector<Vec3>& points, double q);

struct PerturbedCalibration {
  ExtrinsicCalibration cal;
  double t_e = 0;  // translation error magnitude, meters
  double r_e = 0;  // rotation angle error, radians, in [0, pi]
};

PerturbedCalibration perturb_extrinsics(const ExtrinsicCalibration& cal,
                                        const Vec3& axis, double angle,
                                        const Vec3& dt);

// I_hat = I + alpha * delta with delta iid standard normal; no clamping.
std::vector<double> perturb_image(const std::vector<double>& image,
                                  double alpha, std::uint64_t seed);

// Calibration file: 12 whitespace-separated numbers (row-major R then t),
// then a line "fx fy cx cy h w".
void save_calibration(std::ostream& os, const ExtrinsicCalibration& cal,
                      const CameraModel& cam);
void load_calibration(std::istream& is, ExtrinsicCalibration& cal,
                      CameraModel& cam);
void save_calibration_file(const std::string& path,
                           const ExtrinsicCalibration& cal,
                           const CameraModel& cam);
void load_calibration_file(const std::string& path, ExtrinsicCalibration& cal,
                           CameraModel& cam);

}  // namespace prf
