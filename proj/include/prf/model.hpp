#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "prf/fusion.hpp"
#include "prf/geometry.hpp"
#include "prf/ndm.hpp"
#include "prf/tensor.hpp"

namespace prf {

enum class Variant { PRFusion, PRFusionPP };

// One paired sensor observation with its ground-truth pose.
struct SceneFrame {
  std::size_t h = 0, w = 0;
  std::vector<double> image;  // h*w grayscale in [0,1]
  std::vector<Vec3> points;   // lidar frame, meters
  Pose pose;                  // world <- vehicle
  CameraModel cam;
  std::optional<ExtrinsicCalibration> cal;  // absent for PRFusion-only data
};

struct DescriptorData {
  std::vector<double> f;  // 3c entries
  Vec3 position{0, 0, 0};
};

struct ModelConfig {
  Variant variant = Variant::PRFusion;
  std::size_t c = 64;
  std::uint64_t seed = 1;

  std::size_t gfm_samples_2d = 16;
  std::size_t gfm_samples_3d = 16;
  AttentionMode attention = AttentionMode::Metric;
  MetricOdeConfig metric_ode;

  DiffusionConfig ndm;
  double lfm_dh = 1.0, lfm_dw = 1.0;
  double voxel_q = 0.1;

  // module ablation switches
  bool use_gfm = true;
  bool use_ndm = true;
  bool use_lfm = true;

  std::string serialize() const;  // key=value lines, fixed order
  static ModelConfig deserialize(const std::string& text);
};

struct Backbone2dParams {
  Tensor w1, b1, w2, b2, w3, b3;
  static Backbone2dParams init(std::size_t c, Rng& rng);
};

struct Backbone2dOutput {
  Tensor features;  // (gh*gw) x c
  std::vector<std::array<double, 2>> coords;     // (row+0.5, col+0.5)
  std::vector<std::array<double, 2>> positions;  // normalized to [0,1]
  std::size_t grid_h = 0, grid_w = 0;
};

// Three stride-2 conv stages with tanh; output grid is ceil(h/8) x ceil(w/8).
Backbone2dOutput backbone_2d(const std::vector<double>& image, std::size_t h,
                             std::size_t w, const Backbone2dParams& params);

inline constexpr std::size_t kBackboneStride = 8;

struct Backbone3dParams {
  Tensor w1, b1, w2, b2;
  static Backbone3dParams init(std::size_t c, Rng& rng);
};

struct Backbone3dOutput {
  Tensor features;          // n' x c
  std::vector<Vec3> points; // voxel-downsampled coordinates, lidar frame
};

// Voxel-quantize then lift each (x,y,z) through a two-layer perceptron.
Backbone3dOutput backbone_3d(const std::vector<Vec3>& points, double voxel_q,
                             const Backbone3dParams& params);

struct ForwardStats {
  double metric_near_zero_max = 0.0;  // worst non-degeneracy monitor reading
};

// PRFusion / PRFusion++ descriptor model. Owns all learnable parameters;
// forward passes are pure and safe for concurrent read-only use, training
// mutates parameters and is single-owner.
class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const {
    return params_;
  }

  // Full in-graph forward; returns the {1, 3c} descriptor tensor.
  Tensor forward_graph(const SceneFrame& frame,
                       ForwardStats* stats = nullptr) const;

  // Forward without graph recording; packages the descriptor with the
  // frame's world position.
  DescriptorData embed(const SceneFrame& frame) const;

  std::size_t descriptor_dim() const { return 3 * cfg_.c; }

  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  void register_params();

  ModelConfig cfg_;
  Backbone2dParams bb2d_;
  Backbone3dParams bb3d_;
  GfmParams gfm1_, gfm2_;
  NdmParams ndm_;
  LfmParams lfm_;
  Tensor p2d_, p3d_;  // descriptor GeM exponents
  Tensor p_fallback1_, p_fallback2_;  // used when the GFM is ablated away
  std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace prf
