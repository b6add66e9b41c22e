#include "prf/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace prf {

Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
          m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += a[i * 3 + k] * b[k * 3 + j];
      r[i * 3 + j] = acc;
    }
  return r;
}

Mat3 mat3_transpose(const Mat3& m) {
  return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]};
}

double vec3_norm(const Vec3& v) {
  return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}

Mat3 axis_angle_rotation(const Vec3& axis, double angle) {
  const double n = vec3_norm(axis);
  if (std::abs(n - 1.0) > 1e-6)
    throw ContractError("axis_angle_rotation: axis must be unit length");
  const double x = axis[0], y = axis[1], z = axis[2];
  const double c = std::cos(angle), s = std::sin(angle), C = 1.0 - c;
  return {c + x * x * C,     x * y * C - z * s, x * z * C + y * s,
          y * x * C + z * s, c + y * y * C,     y * z * C - x * s,
          z * x * C - y * s, z * y * C + x * s, c + z * z * C};
}

Pose Pose::compose(const Pose& rhs) const {
  Pose out;
  out.R = mat3_mul(R, rhs.R);
  out.t = add3(mat3_apply(R, rhs.t), t);
  return out;
}

Pose Pose::inverse() const {
  Pose out;
  out.R = mat3_transpose(R);
  const Vec3 mt = mat3_apply(out.R, t);
  out.t = {-mt[0], -mt[1], -mt[2]};
  return out;
}

bool Pose::is_valid_rotation(double tol) const {
  const Mat3 rtr = mat3_mul(mat3_transpose(R), R);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double want = i == j ? 1.0 : 0.0;
      if (std::abs(rtr[i * 3 + j] - want) > tol) return false;
    }
  const double det = R[0] * (R[4] * R[8] - R[5] * R[7]) -
                     R[1] * (R[3] * R[8] - R[5] * R[6]) +
                     R[2] * (R[3] * R[7] - R[4] * R[6]);
  return std::abs(det - 1.0) <= tol;
}

void CameraModel::validate() const {
  if (fx <= 0 || fy <= 0)
    throw ContractError("camera: focal lengths must be positive");
  if (!(cx >= 0 && cx < static_cast<double>(w)) ||
      !(cy >= 0 && cy < static_cast<double>(h)))
    throw ContractError("camera: principal point outside image");
}

ProjectionResult project_points(const std::vector<Vec3>& points_lidar,
                                const ExtrinsicCalibration& cal,
                                const CameraModel& cam) {
  ProjectionResult out;
  out.pixels.resize(points_lidar.size());
  out.valid.resize(points_lidar.size());
  for (std::size_t i = 0; i < points_lidar.size(); ++i) {
    const Vec3 pc = cal.T_cam_from_lidar.apply(points_lidar[i]);
    if (pc[2] <= kDepthEps) {
      out.pixels[i] = {0.0, 0.0};
      out.valid[i] = 0;
      continue;
    }
    const double u = cam.fx * pc[0] / pc[2] + cam.cx;
    const double v = cam.fy * pc[1] / pc[2] + cam.cy;
    out.pixels[i] = {u, v};
    out.valid[i] = (u >= 0.0 && u < static_cast<double>(cam.w) && v >= 0.0 &&
                    v < static_cast<double>(cam.h))
                       ? 1
                       : 0;
  }
  return out;
}

std::vector<WindowIndex> assign_windows(
    const std::vector<std::array<double, 2>>& coords, double dh, double dw,
    double h, double w) {
  if (dh <= 0 || dw <= 0)
    throw ContractError("assign_windows: window extents must be positive");
  std::vector<WindowIndex> out(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const double r = coords[i][0], c = coords[i][1];
    if (!(r >= 0 && r < h && c >= 0 && c < w))
      throw ContractError("assign_windows: coordinate outside [0,h)x[0,w)");
    out[i].u = static_cast<std::size_t>(std::floor(r / dh));
    out[i].v = static_cast<std::size_t>(std::floor(c / dw));
  }
  return out;
}

std::vector<Vec3> voxel_downsample(const std::vector<Vec3>& points, double q) {
  if (q <= 0) throw ContractError("voxel_downsample: q must be positive");
  struct Cell {
    Vec3 sum{0, 0, 0};
    std::size_t count = 0;
  };
  std::map<std::array<std::int64_t, 3>, Cell> cells;
  for (const Vec3& p : points) {
    const std::array<std::int64_t, 3> key{
        static_cast<std::int64_t>(std::floor(p[0] / q)),
        static_cast<std::int64_t>(std::floor(p[1] / q)),
        static_cast<std::int64_t>(std::floor(p[2] / q))};
    Cell& cell = cells[key];
    cell.sum = Pose::add3(cell.sum, p);
    ++cell.count;
  }
  std::vector<Vec3> out;
  out.reserve(cells.size());
  for (const auto& [key, cell] : cells) {
    const double inv = 1.0 / static_cast<double>(cell.count);
    out.push_back({cell.sum[0] * inv, cell.sum[1] * inv, cell.sum[2] * inv});
  }
  return out;
}

PerturbedCalibration perturb_extrinsics(const ExtrinsicCalibration& cal,
                                        const Vec3& axis, double angle,
                                        const Vec3& dt) {
  const Mat3 re = axis_angle_rotation(axis, angle);
  PerturbedCalibration out;
  out.cal.T_cam_from_lidar.R = mat3_mul(re, cal.T_cam_from_lidar.R);
  out.cal.T_cam_from_lidar.t = Pose::add3(cal.T_cam_from_lidar.t, dt);
  out.t_e = vec3_norm(dt);
  const double trace = re[0] + re[4] + re[8];
  const double arg = std::clamp((trace - 1.0) / 2.0, -1.0, 1.0);
  out.r_e = std::abs(std::acos(arg));
  return out;
}

std::vector<double> perturb_image(const std::vector<double>& image,
                                  double alpha, std::uint64_t seed) {
  if (alpha < 0) throw ContractError("perturb_image: alpha must be >= 0");
  std::vector<double> out = image;
  if (alpha == 0.0) return out;
  Rng rng(seed);
  for (double& v : out) v += alpha * rng.normal();
  return out;
}

void save_calibration(std::ostream& os, const ExtrinsicCalibration& cal,
                      const CameraModel& cam) {
  os.precision(17);
  const Pose& p = cal.T_cam_from_lidar;
  for (int i = 0; i < 3; ++i)
    os << p.R[i * 3] << " " << p.R[i * 3 + 1] << " " << p.R[i * 3 + 2] << "\n";
  os << p.t[0] << " " << p.t[1] << " " << p.t[2] << "\n";
  os << cam.fx << " " << cam.fy << " " << cam.cx << " " << cam.cy << " "
     << cam.h << " " << cam.w << "\n";
}

void load_calibration(std::istream& is, ExtrinsicCalibration& cal,
                      CameraModel& cam) {
  Pose p;
  for (int i = 0; i < 9; ++i)
    if (!(is >> p.R[i])) throw FormatError("calibration: bad rotation", 0);
  for (int i = 0; i < 3; ++i)
    if (!(is >> p.t[i])) throw FormatError("calibration: bad translation", 0);
  if (!(is >> cam.fx >> cam.fy >> cam.cx >> cam.cy >> cam.h >> cam.w))
    throw FormatError("calibration: bad camera line", 0);
  cal.T_cam_from_lidar = p;
  cam.validate();
}

void save_calibration_file(const std::string& path,
                           const ExtrinsicCalibration& cal,
                           const CameraModel& cam) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  save_calibration(os, cal, cam);
}

void load_calibration_file(const std::string& path, ExtrinsicCalibration& cal,
                           CameraModel& cam) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path);
  load_calibration(is, cal, cam);
}

}  // namespace prf
