#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prf/geometry.hpp"
#include "prf/model.hpp"
#include "prf/retrieval.hpp"

namespace prf {

struct WorldConfig {
  std::uint64_t seed = 1;
  std::size_t n_places = 100;
  std::size_t revisit_factor = 2;
  double place_spacing = 60.0;   // arc length between adjacent places, m
  double revisit_jitter = 3.0;   // pose jitter on revisits, m
  std::size_t points_per_frame = 512;
  std::size_t img_h = 64, img_w = 96;
};

struct Landmark {
  enum class Kind : std::uint8_t { Sphere, Box };
  Kind kind = Kind::Sphere;
  Vec3 center{0, 0, 0};
  double radius = 1.0;      // spheres
  Vec3 half_extent{1, 1, 1};  // boxes
  double albedo = 0.8;
  double tex_scale = 1.0;   // checker period, meters
};

struct TrajectoryEntry {
  Pose pose;  // world <- vehicle
  std::size_t place_id = 0;
  std::size_t visit = 0;  // 0 = database pass, >= 1 = query passes
};

struct World {
  WorldConfig cfg;
  std::vector<Landmark> landmarks;
  std::vector<TrajectoryEntry> trajectory;
  CameraModel cam;
  ExtrinsicCalibration cal;
};

// Loop trajectory over n_places distinct places, each visited revisit_factor
// times with jitter below the positive radius. Bit-reproducible from seed.
World generate_world(const WorldConfig& cfg);

// Flat-shaded ray-cast raster plus camera-frustum surface point samples, all
// expressed in the lidar (vehicle) frame with the world's shared calibration.
SceneFrame render_frame(const World& world, std::size_t traj_index);

struct FrameMeta {
  std::uint64_t id = 0;
  std::string role;  // "db" or "query"
  Vec3 position{0, 0, 0};
};

struct Dataset {
  std::vector<SceneFrame> frames;
  std::vector<FrameMeta> meta;
};

Dataset materialize(const World& world);

// Dataset directory layout: one subdirectory per frame with image.ppm (P5),
// points.xyz, pose.txt, calib.txt; manifest.csv lists id, role, position.
void write_dataset(const World& world, const std::string& dir,
                   const std::string& trailer);
Dataset load_dataset(const std::string& dir);

struct SweepConfig {
  std::vector<double> alphas{0.0, 0.05, 0.1, 0.2};
  std::vector<double> rot_errors_deg{0.0, 0.5, 1.0, 2.0, 5.0};
  std::vector<double> trans_errors{0.0, 0.05, 0.1, 0.2, 0.5};
  double tau = 25.0;
  std::size_t k_max = 1;
  std::uint64_t seed = 1;
};

struct ImageSweepRow {
  double alpha = 0;
  double mean_dist = 0, q1 = 0, median = 0, q3 = 0;  // ||f - f_hat|| stats
  double ar1 = 0;
};

struct ExtrinsicSweepRow {
  double t_e = 0, r_e = 0;
  double ar1_main = 0, ar1_control = 0;
  bool main_changed = false;     // any descriptor differs bitwise from clean
  bool control_changed = false;
};

struct SweepResult {
  double clean_ar1_main = 0, clean_ar1_control = 0;
  std::vector<ImageSweepRow> image_rows;
  std::vector<ExtrinsicSweepRow> extrinsic_rows;
};

// Image-noise and extrinsic-error robustness protocol. The database is
// embedded clean; queries are re-embedded under each perturbation.
// control_model (typically the calibration-free variant) may be null.
SweepResult perturbation_sweep(const Model& main_model,
                               const Model* control_model,
                               const Dataset& dataset, const SweepConfig& cfg);

void write_image_sweep_csv(const std::string& path,
                           const SweepResult& result,
                           const std::string& trailer);
void write_extrinsic_sweep_csv(const std::string& path,
                               const SweepResult& result,
                               const std::string& trailer);

}  // namespace prf
