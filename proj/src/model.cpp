#include "prf/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "prf/binio.hpp"

namespace prf {

namespace {

constexpr char kCheckpointMagic[4] = {'P', 'R', 'F', 'M'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::string attention_mode_name(AttentionMode m) {
  switch (m) {
    case AttentionMode::Metric: return "metric";
    case AttentionMode::Vanilla: return "vanilla";
    case AttentionMode::MetricNoOde: return "metric-no-ode";
    case AttentionMode::MetricNoActivation: return "metric-no-activation";
    case AttentionMode::Mlp: return "mlp";
  }
  throw ContractError("unknown attention mode");
}

AttentionMode attention_mode_from(const std::string& s) {
  if (s == "metric") return AttentionMode::Metric;
  if (s == "vanilla") return AttentionMode::Vanilla;
  if (s == "metric-no-ode") return AttentionMode::MetricNoOde;
  if (s == "metric-no-activation") return AttentionMode::MetricNoActivation;
  if (s == "mlp") return AttentionMode::Mlp;
  throw ConfigError("unknown attention mode: " + s);
}

}  // namespace

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os.precision(17);
  os << "variant="
     << (variant == Variant::PRFusion ? "prfusion" : "prfusionpp") << "\n";
  os << "c=" << c << "\n";
  os << "seed=" << seed << "\n";
  os << "gfm.samples2d=" << gfm_samples_2d << "\n";
  os << "gfm.samples3d=" << gfm_samples_3d << "\n";
  os << "attention=" << attention_mode_name(attention) << "\n";
  os << "ode.t1=" << metric_ode.t1 << "\n";
  os << "ode.steps=" << metric_ode.steps << "\n";
  os << "ndm.k=" << ndm.k << "\n";
  os << "ndm.t1=" << ndm.t1 << "\n";
  os << "ndm.steps=" << ndm.steps << "\n";
  os << "lfm.dh=" << lfm_dh << "\n";
  os << "lfm.dw=" << lfm_dw << "\n";
  os << "voxel.q=" << voxel_q << "\n";
  os << "use.gfm=" << (use_gfm ? 1 : 0) << "\n";
  os << "use.ndm=" << (use_ndm ? 1 : 0) << "\n";
  os << "use.lfm=" << (use_lfm ? 1 : 0) << "\n";
  return os.str();
}

ModelConfig ModelConfig::deserialize(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("model config: malformed line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "variant") {
      if (val == "prfusion") cfg.variant = Variant::PRFusion;
      else if (val == "prfusionpp") cfg.variant = Variant::PRFusionPP;
      else throw ConfigError("model config: unknown variant: " + val);
    } else if (key == "c") cfg.c = std::stoul(val);
    else if (key == "seed") cfg.seed = std::stoull(val);
    else if (key == "gfm.samples2d") cfg.gfm_samples_2d = std::stoul(val);
    else if (key == "gfm.samples3d") cfg.gfm_samples_3d = std::stoul(val);
    else if (key == "attention") cfg.attention = attention_mode_from(val);
    else if (key == "ode.t1") cfg.metric_ode.t1 = std::stod(val);
    else if (key == "ode.steps") cfg.metric_ode.steps = std::stoi(val);
    else if (key == "ndm.k") cfg.ndm.k = std::stoul(val);
    else if (key == "ndm.t1") cfg.ndm.t1 = std::stod(val);
    else if (key == "ndm.steps") cfg.ndm.steps = std::stoi(val);
    else if (key == "lfm.dh") cfg.lfm_dh = std::stod(val);
    else if (key == "lfm.dw") cfg.lfm_dw = std::stod(val);
    else if (key == "voxel.q") cfg.voxel_q = std::stod(val);
    else if (key == "use.gfm") cfg.use_gfm = val != "0";
    else if (key == "use.ndm") cfg.use_ndm = val != "0";
    else if (key == "use.lfm") cfg.use_lfm = val != "0";
    else throw ConfigError("model config: unknown key: " + key);
  }
  return cfg;
}

// ---- backbones ---------------------------------------------------------------

Backbone2dParams Backbone2dParams::init(std::size_t c, Rng& rng) {
  const std::size_t c1 = std::max<std::size_t>(2, c / 4);
  const std::size_t c2 = std::max<std::size_t>(2, c / 2);
  auto conv_init = [&rng](std::size_t co, std::size_t ci) {
    const double limit = std::sqrt(6.0 / static_cast<double>(9 * (ci + co)));
    return Tensor::uniform({co, ci, 3, 3}, rng, -limit, limit, true);
  };
  Backbone2dParams p;
  p.w1 = conv_init(c1, 1);
  p.b1 = Tensor::zeros({c1}, true);
  p.w2 = conv_init(c2, c1);
  p.b2 = Tensor::zeros({c2}, true);
  p.w3 = conv_init(c, c2);
  p.b3 = Tensor::zeros({c}, true);
  return p;
}

Backbone2dOutput backbone_2d(const std::vector<double>& image, std::size_t h,
                             std::size_t w, const Backbone2dParams& params) {
  if (image.size() != h * w)
    throw ContractError("backbone_2d: image size mismatch");
  Tensor x = Tensor::from_data({1, h, w}, image);
  Tensor s1 = tanh(conv2d(x, params.w1, params.b1, 2, 1));
  Tensor s2 = tanh(conv2d(s1, params.w2, params.b2, 2, 1));
  Tensor s3 = tanh(conv2d(s2, params.w3, params.b3, 2, 1));

  Backbone2dOutput out;
  out.grid_h = s3.shape()[1];
  out.grid_w = s3.shape()[2];
  out.features = chw_to_rows(s3);
  out.coords.reserve(out.grid_h * out.grid_w);
  out.positions.reserve(out.grid_h * out.grid_w);
  for (std::size_t r = 0; r < out.grid_h; ++r)
    for (std::size_t cc = 0; cc < out.grid_w; ++cc) {
      out.coords.push_back({r + 0.5, cc + 0.5});
      out.positions.push_back({(r + 0.5) / static_cast<double>(out.grid_h),
                               (cc + 0.5) / static_cast<double>(out.grid_w)});
    }
  return out;
}

Backbone3dParams Backbone3dParams::init(std::size_t c, Rng& rng) {
  Backbone3dParams p;
  p.w1 = Tensor::xavier(3, c, rng);
  p.b1 = Tensor::zeros({c}, true);
  p.w2 = Tensor::xavier(c, c, rng);
  p.b2 = Tensor::zeros({c}, true);
  return p;
}

Backbone3dOutput backbone_3d(const std::vector<Vec3>& points, double voxel_q,
                             const Backbone3dParams& params) {
  if (points.empty()) throw ContractError("backbone_3d: need >= 1 point");
  Backbone3dOutput out;
  out.points = voxel_downsample(points, voxel_q);

  // center on the frame centroid and bring coordinates into tanh range
  Vec3 centroid{0, 0, 0};
  for (const Vec3& p : out.points) centroid = Pose::add3(centroid, p);
  const double inv = 1.0 / static_cast<double>(out.points.size());
  centroid = {centroid[0] * inv, centroid[1] * inv, centroid[2] * inv};
  constexpr double kCoordScale = 1.0 / 25.0;

  std::vector<double> xyz;
  xyz.reserve(out.points.size() * 3);
  for (const Vec3& p : out.points) {
    xyz.push_back((p[0] - centroid[0]) * kCoordScale);
    xyz.push_back((p[1] - centroid[1]) * kCoordScale);
    xyz.push_back((p[2] - centroid[2]) * kCoordScale);
  }
  Tensor in = Tensor::from_data({out.points.size(), 3}, std::move(xyz));
  Tensor hdn = tanh(add(matmul(in, params.w1), params.b1));
  out.features = add(matmul(hdn, params.w2), params.b2);
  return out;
}

// ---- model -------------------------------------------------------------------

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  if (cfg_.c < 4) throw ConfigError("model: feature dim c must be >= 4");
  Rng root(cfg_.seed);
  // independent streams per component so ablation switches do not reshuffle
  // the surviving parameters
  Rng r_bb2 = root.fork(1);
  Rng r_bb3 = root.fork(2);
  Rng r_gfm1 = root.fork(3);
  Rng r_gfm2 = root.fork(4);
  Rng r_ndm = root.fork(5);
  Rng r_lfm = root.fork(6);

  bb2d_ = Backbone2dParams::init(cfg_.c, r_bb2);
  bb3d_ = Backbone3dParams::init(cfg_.c, r_bb3);
  gfm1_ = GfmParams::init(cfg_.c, r_gfm1);
  gfm2_ = GfmParams::init(cfg_.c, r_gfm2);
  ndm_ = NdmParams::init(cfg_.c, /*with_positions=*/true, r_ndm);
  lfm_ = LfmParams::init(cfg_.c, r_lfm);
  p2d_ = Tensor::scalar(3.0, true);
  p3d_ = Tensor::scalar(3.0, true);
  p_fallback1_ = Tensor::scalar(3.0, true);
  p_fallback2_ = Tensor::scalar(3.0, true);
  register_params();
}

void Model::register_params() {
  params_.clear();
  auto put = [this](const std::string& name, const Tensor& t) {
    params_.emplace_back(name, t);
  };
  put("backbone2d.w1", bb2d_.w1);
  put("backbone2d.b1", bb2d_.b1);
  put("backbone2d.w2", bb2d_.w2);
  put("backbone2d.b2", bb2d_.b2);
  put("backbone2d.w3", bb2d_.w3);
  put("backbone2d.b3", bb2d_.b3);
  put("backbone3d.w1", bb3d_.w1);
  put("backbone3d.b1", bb3d_.b1);
  put("backbone3d.w2", bb3d_.w2);
  put("backbone3d.b2", bb3d_.b2);

  const bool attn_params_used = cfg_.attention != AttentionMode::Mlp;
  const bool wg_used = cfg_.attention == AttentionMode::Metric ||
                       cfg_.attention == AttentionMode::MetricNoActivation;
  auto put_gfm = [&](const std::string& prefix, GfmParams& g,
                     Tensor& fallback_p) {
    if (cfg_.use_gfm) {
      put(prefix + ".attn.wq", g.attn.Wq);
      if (attn_params_used) put(prefix + ".attn.wk", g.attn.Wk);
      put(prefix + ".attn.wv", g.attn.Wv);
      if (wg_used) put(prefix + ".attn.wg", g.attn.Wg);
      put(prefix + ".p", g.p_gem);
      put(prefix + ".mlp2d.w1", g.mlp2d.W1);
      put(prefix + ".mlp2d.b1", g.mlp2d.b1);
      put(prefix + ".mlp2d.w2", g.mlp2d.W2);
      put(prefix + ".mlp2d.b2", g.mlp2d.b2);
      put(prefix + ".mlp3d.w1", g.mlp3d.W1);
      put(prefix + ".mlp3d.b1", g.mlp3d.b1);
      put(prefix + ".mlp3d.w2", g.mlp3d.W2);
      put(prefix + ".mlp3d.b2", g.mlp3d.b2);
    } else {
      put(prefix + ".p", fallback_p);
    }
  };
  put_gfm("gfm1", gfm1_, p_fallback1_);
  put_gfm("gfm2", gfm2_, p_fallback2_);

  if (cfg_.use_ndm) {
    put("ndm.wx", ndm_.Wx);
    put("ndm.wy", ndm_.Wy);
  }
  if (cfg_.variant == Variant::PRFusionPP && cfg_.use_lfm) {
    put("lfm.attn.wq", lfm_.attn.Wq);
    if (attn_params_used) put("lfm.attn.wk", lfm_.attn.Wk);
    put("lfm.attn.wv", lfm_.attn.Wv);
    if (wg_used) put("lfm.attn.wg", lfm_.attn.Wg);
  }
  put("head.p2d", p2d_);
  put("head.p3d", p3d_);
}

namespace {

// GFM stage, or its stand-in when the module is ablated: features pass
// through and the fused summary degrades to GeM over the two pooled
// modality rows.
GfmOutput gfm_stage(const Tensor& f2d, const Tensor& f3d, const GfmParams& g,
                    const Tensor& fallback_p, bool enabled,
                    const FusionConfig& cfg) {
  if (enabled) return gfm_forward(f2d, f3d, g, cfg);
  GfmOutput out;
  out.f2d = f2d;
  out.f3d = f3d;
  out.f_gfm =
      gem_pool(concat_rows({rows_mean(f2d), rows_mean(f3d)}), fallback_p);
  return out;
}

}  // namespace

Tensor Model::forward_graph(const SceneFrame& frame,
                            ForwardStats* stats) const {
  if (frame.points.empty()) throw ContractError("forward: frame has no points");
  if (frame.h != frame.cam.h || frame.w != frame.cam.w)
    throw ContractError("forward: image extents do not match camera model");
  if (cfg_.variant == Variant::PRFusionPP && !frame.cal.has_value())
    throw ConfigError("PRFusion++ requires extrinsic calibration");

  ForwardStats local;
  auto note = [&](double v) {
    local.metric_near_zero_max = std::max(local.metric_near_zero_max, v);
  };

  Backbone2dOutput b2 = backbone_2d(frame.image, frame.h, frame.w, bb2d_);
  Backbone3dOutput b3 = backbone_3d(frame.points, cfg_.voxel_q, bb3d_);

  FusionConfig fcfg;
  fcfg.n2d_samples = std::min(cfg_.gfm_samples_2d, b2.features.rows());
  fcfg.n3d_samples = std::min(cfg_.gfm_samples_3d, b3.features.rows());
  fcfg.attention = cfg_.attention;
  fcfg.metric_ode = cfg_.metric_ode;

  GfmOutput g1 = gfm_stage(b2.features, b3.features, gfm1_, p_fallback1_,
                           cfg_.use_gfm, fcfg);
  note(g1.metric_near_zero);

  Tensor feat2d = g1.f2d;
  Tensor feat3d = g1.f3d;

  if (cfg_.variant == Variant::PRFusionPP && cfg_.use_lfm) {
    const auto proj = project_points(b3.points, *frame.cal, frame.cam);
    std::vector<std::array<double, 2>> coords3d(b3.points.size());
    for (std::size_t i = 0; i < b3.points.size(); ++i) {
      // pixel (u,v) -> feature-plane (row, col)
      coords3d[i] = {proj.pixels[i][1] / kBackboneStride,
                     proj.pixels[i][0] / kBackboneStride};
    }
    LfmConfig lcfg;
    lcfg.dh = cfg_.lfm_dh;
    lcfg.dw = cfg_.lfm_dw;
    lcfg.grid_h = static_cast<double>(b2.grid_h);
    lcfg.grid_w = static_cast<double>(b2.grid_w);
    lcfg.attention = cfg_.attention;
    lcfg.metric_ode = cfg_.metric_ode;
    LfmOutput l = lfm_forward(feat2d, b2.coords, feat3d, coords3d, proj.valid,
                              lfm_, lcfg);
    note(l.metric_near_zero);
    feat2d = l.f2d;
    feat3d = l.f3d;
  }

  if (cfg_.use_ndm) {
    DiffusionConfig ncfg = cfg_.ndm;
    ncfg.k = std::min(ncfg.k, feat2d.rows());
    feat2d = ndm_forward(feat2d, b2.positions, ndm_, ncfg);
  }

  GfmOutput g2 =
      gfm_stage(feat2d, feat3d, gfm2_, p_fallback2_, cfg_.use_gfm, fcfg);
  note(g2.metric_near_zero);

  Tensor descriptor = concat_cols(
      g2.f_gfm, concat_cols(gem_pool(g2.f2d, p2d_), gem_pool(g2.f3d, p3d_)));
  if (!descriptor.all_finite())
    throw DivergenceError("forward: non-finite descriptor");
  if (stats) *stats = local;
  return descriptor;
}

DescriptorData Model::embed(const SceneFrame& frame) const {
  NoGradGuard ng;
  Tensor d = forward_graph(frame);
  DescriptorData out;
  out.f = d.data();
  out.position = frame.pose.t;
  return out;
}

// ---- checkpoint io -------------------------------------------------------------

void Model::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  binio::Writer w{os};
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(cfg_.serialize());
  w.u32(static_cast<std::uint32_t>(params_.size()));
  for (const auto& [name, t] : params_) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : t.data()) w.f64(v);
  }
  if (!os) throw Error("write failed: " + path);
}

Model Model::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  binio::Reader r{is};
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version", 4);
  const std::string cfg_text = r.str(1 << 20, "config block");
  Model model(ModelConfig::deserialize(cfg_text));

  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : model.params_) by_name.emplace(name, t);

  const std::uint32_t count = r.u32("parameter count");
  if (count != model.params_.size())
    throw FormatError("checkpoint: parameter count mismatch", r.offset - 4);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(4096, "parameter name");
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw FormatError("checkpoint: unknown parameter " + name, r.offset);
    const std::uint32_t rank = r.u32("shape rank");
    if (rank > 8)
      throw FormatError("checkpoint: implausible rank", r.offset - 4);
    Shape shape(rank);
    for (auto& e : shape) e = r.u32("shape extent");
    if (shape != it->second.shape())
      throw FormatError("checkpoint: shape mismatch for " + name, r.offset);
    auto& data = it->second.raw_data();
    for (auto& v : data) v = r.f64("parameter data");
  }
  return model;
}

}  // namespace prf
