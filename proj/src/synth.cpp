#include "prf/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace prf {

namespace {

constexpr double kPi = 3.14159265358979323846;

Vec3 normalize3(const Vec3& v) {
  const double n = vec3_norm(v);
  return {v[0] / n, v[1] / n, v[2] / n};
}

Vec3 cross3(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
          a[0] * b[1] - a[1] * b[0]};
}

// vehicle frame: x forward, y left, z up
Pose vehicle_pose(const Vec3& position, double heading) {
  Pose p;
  const double c = std::cos(heading), s = std::sin(heading);
  // columns are the vehicle axes in world coordinates
  p.R = {c, -s, 0, s, c, 0, 0, 0, 1};
  p.t = position;
  return p;
}

struct Hit {
  double t = 1e300;
  Vec3 normal{0, 0, 1};
  double albedo = 0.0;
  double tex_scale = 0.0;  // 0: untextured
  bool ok = false;
};

bool hit_sphere(const Vec3& o, const Vec3& d, const Landmark& lm, Hit* hit) {
  const Vec3 oc{o[0] - lm.center[0], o[1] - lm.center[1], o[2] - lm.center[2]};
  const double b = oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2];
  const double cq = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] -
                    lm.radius * lm.radius;
  const double disc = b * b - cq;
  if (disc < 0) return false;
  const double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t <= 1e-6) t = -b + sq;
  if (t <= 1e-6 || t >= hit->t) return false;
  hit->t = t;
  const Vec3 p{o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]};
  hit->normal = normalize3(
      {p[0] - lm.center[0], p[1] - lm.center[1], p[2] - lm.center[2]});
  hit->albedo = lm.albedo;
  hit->tex_scale = lm.tex_scale;
  hit->ok = true;
  return true;
}

bool hit_box(const Vec3& o, const Vec3& d, const Landmark& lm, Hit* hit) {
  double tmin = 1e-6, tmax = hit->t;
  int axis_min = -1;
  for (int a = 0; a < 3; ++a) {
    const double lo = lm.center[a] - lm.half_extent[a];
    const double hi = lm.center[a] + lm.half_extent[a];
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < lo || o[a] > hi) return false;
      continue;
    }
    double t0 = (lo - o[a]) / d[a];
    double t1 = (hi - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > tmin) {
      tmin = t0;
      axis_min = a;
    }
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return false;
  }
  if (axis_min < 0 || tmin >= hit->t) return false;
  hit->t = tmin;
  Vec3 n{0, 0, 0};
  const Vec3 p{o[0] + tmin * d[0], o[1] + tmin * d[1], o[2] + tmin * d[2]};
  n[axis_min] = p[axis_min] > lm.center[axis_min] ? 1.0 : -1.0;
  hit->normal = n;
  hit->albedo = lm.albedo;
  hit->tex_scale = lm.tex_scale;
  hit->ok = true;
  return true;
}

bool hit_ground(const Vec3& o, const Vec3& d, Hit* hit) {
  if (d[2] >= -1e-9) return false;
  const double t = -o[2] / d[2];
  if (t <= 1e-6 || t >= hit->t) return false;
  hit->t = t;
  hit->normal = {0, 0, 1};
  hit->albedo = 0.25;
  hit->tex_scale = 4.0;
  hit->ok = true;
  return true;
}

Hit cast_ray(const World& world, const Vec3& origin, const Vec3& dir) {
  Hit best;
  hit_ground(origin, dir, &best);
  for (const auto& lm : world.landmarks) {
    // cheap reject: landmarks far from the ray origin cannot be seen at
    // useful resolution anyway
    const Vec3 rel{lm.center[0] - origin[0], lm.center[1] - origin[1],
                   lm.center[2] - origin[2]};
    if (vec3_norm(rel) > 200.0) continue;
    if (lm.kind == Landmark::Kind::Sphere)
      hit_sphere(origin, dir, lm, &best);
    else
      hit_box(origin, dir, lm, &best);
  }
  return best;
}

double shade(const Hit& hit, const Vec3& point) {
  static const Vec3 kLight = normalize3({0.3, -0.5, 0.8});
  double v = hit.albedo *
             (0.45 + 0.55 * std::max(0.0, hit.normal[0] * kLight[0] +
                                              hit.normal[1] * kLight[1] +
                                              hit.normal[2] * kLight[2]));
  if (hit.tex_scale > 0) {
    const long cx = static_cast<long>(std::floor(point[0] / hit.tex_scale));
    const long cy = static_cast<long>(std::floor(point[1] / hit.tex_scale));
    const long cz = static_cast<long>(std::floor(point[2] / hit.tex_scale));
    if ((cx + cy + cz) & 1) v *= 0.72;
  }
  v *= 1.0 / (1.0 + hit.t / 150.0);
  return std::clamp(v, 0.0, 1.0);
}

}  // namespace

World generate_world(const WorldConfig& cfg) {
  if (cfg.n_places < 2) throw ContractError("generate_world: need >= 2 places");
  if (cfg.revisit_factor < 1)
    throw ContractError("generate_world: revisit_factor must be >= 1");

  World world;
  world.cfg = cfg;

  world.cam.fx = world.cam.fy = 0.75 * static_cast<double>(cfg.img_w);
  world.cam.cx = static_cast<double>(cfg.img_w) / 2.0;
  world.cam.cy = static_cast<double>(cfg.img_h) / 2.0;
  world.cam.h = cfg.img_h;
  world.cam.w = cfg.img_w;

  // camera above the lidar, looking forward: x_cam = -y_veh (right),
  // y_cam = -z_veh (down), z_cam = x_veh (forward)
  world.cal.T_cam_from_lidar.R = {0, -1, 0, 0, 0, -1, 1, 0, 0};
  world.cal.T_cam_from_lidar.t = {0.05, -0.4, 0.1};

  const double radius =
      static_cast<double>(cfg.n_places) * cfg.place_spacing / (2.0 * kPi);
  Rng root(cfg.seed);

  for (std::size_t place = 0; place < cfg.n_places; ++place) {
    Rng rng = root.fork(0x10000 + place);
    const double theta =
        2.0 * kPi * static_cast<double>(place) / static_cast<double>(cfg.n_places);
    const Vec3 center{radius * std::cos(theta), radius * std::sin(theta), 0.0};

    // place-specific ground patch: a thin textured slab that dominates the
    // lower image half and gives each place a stable large-area signature
    {
      Landmark patch;
      patch.kind = Landmark::Kind::Box;
      const double extent = rng.uniform(28.0, 42.0);
      const double height = 0.01 + 0.02 * rng.uniform();
      patch.center = {center[0], center[1], height / 2.0};
      patch.half_extent = {extent, extent, height / 2.0};
      patch.albedo = rng.uniform(0.10, 0.95);
      patch.tex_scale = rng.uniform(2.0, 9.0);
      world.landmarks.push_back(patch);
    }

    // distant skyline blocks: far enough that revisit jitter barely moves
    // them in the image, so they anchor the place identity
    {
      const std::size_t towers = 2 + rng.next_u64() % 3;
      const double tangent = theta + kPi / 2.0;  // travel direction
      for (std::size_t ti = 0; ti < towers; ++ti) {
        Landmark lm;
        lm.kind = Landmark::Kind::Box;
        const double bearing = tangent + rng.uniform(-0.5, 0.5);
        const double dist = rng.uniform(55.0, 95.0);
        const double hgt = rng.uniform(8.0, 28.0);
        lm.center = {center[0] + dist * std::cos(bearing),
                     center[1] + dist * std::sin(bearing), hgt / 2.0};
        lm.half_extent = {rng.uniform(4.0, 14.0), rng.uniform(4.0, 14.0),
                          hgt / 2.0};
        lm.albedo = rng.uniform(0.2, 1.0);
        lm.tex_scale = rng.uniform(3.0, 10.0);
        world.landmarks.push_back(lm);
      }
    }

    const std::size_t count = 3 + rng.next_u64() % 7;
    for (std::size_t li = 0; li < count; ++li) {
      Landmark lm;
      lm.kind = (rng.next_u64() & 1) ? Landmark::Kind::Box
                                     : Landmark::Kind::Sphere;
      const double ang = rng.uniform(0, 2 * kPi);
      const double dist = rng.uniform(6.0, 34.0);
      const double size = rng.uniform(1.2, 7.0);
      lm.center = {center[0] + dist * std::cos(ang),
                   center[1] + dist * std::sin(ang), size};
      lm.radius = size;
      lm.half_extent = {size * rng.uniform(0.4, 1.6),
                        size * rng.uniform(0.4, 1.6), size};
      lm.albedo = rng.uniform(0.15, 1.0);
      lm.tex_scale = rng.uniform(0.6, 4.0);
      world.landmarks.push_back(lm);
    }
  }

  for (std::size_t visit = 0; visit < cfg.revisit_factor; ++visit) {
    for (std::size_t place = 0; place < cfg.n_places; ++place) {
      Rng rng = root.fork(0x20000 + visit * cfg.n_places + place);
      const double theta = 2.0 * kPi * static_cast<double>(place) /
                           static_cast<double>(cfg.n_places);
      Vec3 pos{radius * std::cos(theta), radius * std::sin(theta), 1.6};
      double heading = theta + kPi / 2.0;  // along the loop tangent
      if (visit > 0) {
        const double jr = cfg.revisit_jitter * std::sqrt(rng.uniform());
        const double ja = rng.uniform(0, 2 * kPi);
        pos[0] += jr * std::cos(ja);
        pos[1] += jr * std::sin(ja);
        heading += rng.uniform(-0.05, 0.05);
      }
      TrajectoryEntry entry;
      entry.pose = vehicle_pose(pos, heading);
      entry.place_id = place;
      entry.visit = visit;
      world.trajectory.push_back(entry);
    }
  }
  return world;
}

SceneFrame render_frame(const World& world, std::size_t traj_index) {
  if (traj_index >= world.trajectory.size())
    throw ContractError("render_frame: trajectory index out of range");
  const WorldConfig& cfg = world.cfg;
  const TrajectoryEntry& entry = world.trajectory[traj_index];

  SceneFrame frame;
  frame.h = cfg.img_h;
  frame.w = cfg.img_w;
  frame.cam = world.cam;
  frame.cal = world.cal;
  frame.pose = entry.pose;
  frame.image.assign(cfg.img_h * cfg.img_w, 0.0);

  const Pose world_from_cam =
      entry.pose.compose(world.cal.T_cam_from_lidar.inverse());
  const Vec3 cam_origin = world_from_cam.t;

  auto pixel_ray = [&](double u, double v) {
    const Vec3 dir_cam = normalize3({(u - world.cam.cx) / world.cam.fx,
                                     (v - world.cam.cy) / world.cam.fy, 1.0});
    return normalize3(mat3_apply(world_from_cam.R, dir_cam));
  };

  for (std::size_t r = 0; r < cfg.img_h; ++r)
    for (std::size_t c = 0; c < cfg.img_w; ++c) {
      const Vec3 dir = pixel_ray(c + 0.5, r + 0.5);
      const Hit hit = cast_ray(world, cam_origin, dir);
      double value = 0.08;  // sky
      if (hit.ok) {
        const Vec3 p{cam_origin[0] + hit.t * dir[0],
                     cam_origin[1] + hit.t * dir[1],
                     cam_origin[2] + hit.t * dir[2]};
        value = shade(hit, p);
      }
      frame.image[r * cfg.img_w + c] = value;
    }

  // surface samples: mostly camera-frustum hits (they re-project inside the
  // image by construction), a small lidar-like ground ring for the rest
  Rng rng = Rng(cfg.seed).fork(0x100000 + traj_index);
  const Pose lidar_from_world = entry.pose.inverse();
  const std::size_t n_frustum =
      cfg.points_per_frame - cfg.points_per_frame / 16;
  while (frame.points.size() < n_frustum) {
    bool placed = false;
    for (int attempt = 0; attempt < 24 && !placed; ++attempt) {
      const double u = rng.uniform(0.0, static_cast<double>(cfg.img_w));
      const double v = rng.uniform(0.0, static_cast<double>(cfg.img_h));
      const Vec3 dir = pixel_ray(u, v);
      const Hit hit = cast_ray(world, cam_origin, dir);
      if (!hit.ok || hit.t > 150.0) continue;
      // nudge toward the camera so the sample stays on the visible side
      const double t = hit.t * (1.0 - 1e-9);
      const Vec3 p{cam_origin[0] + t * dir[0], cam_origin[1] + t * dir[1],
                   cam_origin[2] + t * dir[2]};
      frame.points.push_back(lidar_from_world.apply(p));
      placed = true;
    }
    if (!placed)  // degenerate view: keep at least a ground return
      frame.points.push_back(lidar_from_world.apply(
          {entry.pose.t[0], entry.pose.t[1], 0.0}));
  }
  while (frame.points.size() < cfg.points_per_frame) {
    const double ang = rng.uniform(0, 2 * kPi);
    const double dist = rng.uniform(3.0, 40.0);
    const Vec3 p{entry.pose.t[0] + dist * std::cos(ang),
                 entry.pose.t[1] + dist * std::sin(ang), 0.0};
    frame.points.push_back(lidar_from_world.apply(p));
  }
  return frame;
}

Dataset materialize(const World& world) {
  Dataset ds;
  ds.frames.reserve(world.trajectory.size());
  ds.meta.reserve(world.trajectory.size());
  for (std::size_t i = 0; i < world.trajectory.size(); ++i) {
    ds.frames.push_back(render_frame(world, i));
    FrameMeta meta;
    meta.id = i;
    meta.role = world.trajectory[i].visit == 0 ? "db" : "query";
    meta.position = world.trajectory[i].pose.t;
    ds.meta.push_back(meta);
  }
  return ds;
}

// ---- dataset io ---------------------------------------------------------------

namespace {

namespace fs = std::filesystem;

std::string frame_dir_name(std::uint64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%06llu",
                static_cast<unsigned long long>(id));
  return buf;
}

void write_ppm(const std::string& path, const std::vector<double>& image,
               std::size_t h, std::size_t w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  os << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> bytes(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double v = std::clamp(image[i], 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
}

std::vector<double> read_ppm(const std::string& path, std::size_t* h,
                             std::size_t* w) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5" && magic != "P6")
    throw FormatError("ppm: expected P5 or P6", 0);
  std::size_t ww, hh, maxval;
  is >> ww >> hh >> maxval;
  if (!is || maxval != 255) throw FormatError("ppm: bad header", 2);
  is.get();  // single whitespace after maxval
  const std::size_t ch = magic == "P5" ? 1 : 3;
  std::vector<unsigned char> bytes(ww * hh * ch);
  is.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(is.gcount()) != bytes.size())
    throw FormatError("ppm: truncated pixel data", 15);
  std::vector<double> img(ww * hh);
  for (std::size_t i = 0; i < ww * hh; ++i) {
    if (ch == 1) {
      img[i] = bytes[i] / 255.0;
    } else {
      img[i] = (bytes[3 * i] + bytes[3 * i + 1] + bytes[3 * i + 2]) /
               (3.0 * 255.0);
    }
  }
  *h = hh;
  *w = ww;
  return img;
}

void write_pose(const std::string& path, const Pose& pose) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  os.precision(17);
  for (int i = 0; i < 3; ++i)
    os << pose.R[i * 3] << " " << pose.R[i * 3 + 1] << " " << pose.R[i * 3 + 2]
       << "\n";
  os << pose.t[0] << " " << pose.t[1] << " " << pose.t[2] << "\n";
}

Pose read_pose(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path);
  Pose p;
  for (int i = 0; i < 9; ++i)
    if (!(is >> p.R[i])) throw FormatError("pose: bad rotation", 0);
  for (int i = 0; i < 3; ++i)
    if (!(is >> p.t[i])) throw FormatError("pose: bad translation", 0);
  return p;
}

}  // namespace

void write_dataset(const World& world, const std::string& dir,
                   const std::string& trailer) {
  fs::create_directories(dir);
  Dataset ds = materialize(world);
  std::ofstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw Error("cannot open manifest.csv for writing");
  manifest.precision(17);
  manifest << "id,role,x,y,z\n";
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    const auto& meta = ds.meta[i];
    const auto& frame = ds.frames[i];
    const fs::path fdir = fs::path(dir) / frame_dir_name(meta.id);
    fs::create_directories(fdir);
    write_ppm((fdir / "image.ppm").string(), frame.image, frame.h, frame.w);
    {
      std::ofstream os(fdir / "points.xyz");
      os.precision(17);
      for (const auto& p : frame.points)
        os << p[0] << " " << p[1] << " " << p[2] << "\n";
    }
    write_pose((fdir / "pose.txt").string(), frame.pose);
    save_calibration_file((fdir / "calib.txt").string(), *frame.cal,
                          frame.cam);
    manifest << meta.id << "," << meta.role << "," << meta.position[0] << ","
             << meta.position[1] << "," << meta.position[2] << "\n";
  }
  if (!trailer.empty()) manifest << trailer << "\n";
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw Error("cannot open " + dir + "/manifest.csv");
  Dataset ds;
  std::string line;
  if (!std::getline(manifest, line) || line != "id,role,x,y,z")
    throw FormatError("manifest: bad header", 0);
  while (std::getline(manifest, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    FrameMeta meta;
    std::string tok;
    std::getline(ls, tok, ',');
    meta.id = std::stoull(tok);
    std::getline(ls, meta.role, ',');
    std::getline(ls, tok, ',');
    meta.position[0] = std::stod(tok);
    std::getline(ls, tok, ',');
    meta.position[1] = std::stod(tok);
    std::getline(ls, tok, ',');
    meta.position[2] = std::stod(tok);

    const fs::path fdir = fs::path(dir) / frame_dir_name(meta.id);
    SceneFrame frame;
    frame.image = read_ppm((fdir / "image.ppm").string(), &frame.h, &frame.w);
    {
      std::ifstream ps(fdir / "points.xyz");
      if (!ps) throw Error("cannot open " + (fdir / "points.xyz").string());
      Vec3 p;
      while (ps >> p[0] >> p[1] >> p[2]) frame.points.push_back(p);
    }
    frame.pose = read_pose((fdir / "pose.txt").string());
    ExtrinsicCalibration cal;
    CameraModel cam;
    load_calibration_file((fdir / "calib.txt").string(), cal, cam);
    frame.cal = cal;
    frame.cam = cam;

    ds.frames.push_back(std::move(frame));
    ds.meta.push_back(std::move(meta));
  }
  if (ds.frames.empty()) throw Error("dataset: no frames in " + dir);
  return ds;
}

// ---- perturbation sweep ---------------------------------------------------------

namespace {

struct Quartiles {
  double mean = 0, q1 = 0, median = 0, q3 = 0;
};

Quartiles quartiles(std::vector<double> xs) {
  Quartiles q;
  if (xs.empty()) return q;
  std::sort(xs.begin(), xs.end());
  for (double x : xs) q.mean += x;
  q.mean /= static_cast<double>(xs.size());
  auto at = [&](double frac) {
    const double pos = frac * static_cast<double>(xs.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, xs.size() - 1);
    const double w = pos - static_cast<double>(lo);
    return xs[lo] * (1.0 - w) + xs[hi] * w;
  };
  q.q1 = at(0.25);
  q.median = at(0.5);
  q.q3 = at(0.75);
  return q;
}

double l2(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

double ar1_of(const DescriptorDB& db,
              const std::vector<DescriptorData>& queries, double tau) {
  return recall_metrics(db, queries, 1, tau).r_at_1();
}

}  // namespace

SweepResult perturbation_sweep(const Model& main_model,
                               const Model* control_model,
                               const Dataset& dataset,
                               const SweepConfig& cfg) {
  std::vector<std::size_t> db_idx, query_idx;
  for (std::size_t i = 0; i < dataset.meta.size(); ++i)
    (dataset.meta[i].role == "db" ? db_idx : query_idx).push_back(i);
  if (db_idx.empty() || query_idx.empty())
    throw ContractError("perturbation_sweep: need both db and query frames");

  auto build_db = [&](const Model& model) {
    DescriptorDB db;
    for (std::size_t i : db_idx) {
      DescriptorData d = model.embed(dataset.frames[i]);
      db.add(dataset.meta[i].id, d.f, d.position);
    }
    return db;
  };
  auto embed_queries = [&](const Model& model,
                           const std::vector<SceneFrame>& frames) {
    std::vector<DescriptorData> out;
    out.reserve(query_idx.size());
    for (std::size_t t = 0; t < query_idx.size(); ++t)
      out.push_back(model.embed(frames[t]));
    return out;
  };

  std::vector<SceneFrame> clean_queries;
  clean_queries.reserve(query_idx.size());
  for (std::size_t i : query_idx) clean_queries.push_back(dataset.frames[i]);

  SweepResult result;
  const DescriptorDB db_main = build_db(main_model);
  const auto clean_main = embed_queries(main_model, clean_queries);
  result.clean_ar1_main = ar1_of(db_main, clean_main, cfg.tau);

  DescriptorDB db_control;
  std::vector<DescriptorData> clean_control;
  if (control_model) {
    db_control = build_db(*control_model);
    clean_control = embed_queries(*control_model, clean_queries);
    result.clean_ar1_control = ar1_of(db_control, clean_control, cfg.tau);
  }

  // image noise protocol: I_hat = I + alpha * delta
  for (std::size_t ai = 0; ai < cfg.alphas.size(); ++ai) {
    const double alpha = cfg.alphas[ai];
    std::vector<SceneFrame> noisy = clean_queries;
    for (std::size_t t = 0; t < noisy.size(); ++t) {
      const std::uint64_t seed =
          Rng(cfg.seed).fork(0x9000 + ai * 100003 + t).next_u64();
      noisy[t].image = perturb_image(noisy[t].image, alpha, seed);
    }
    const auto perturbed = embed_queries(main_model, noisy);
    std::vector<double> dists(perturbed.size());
    for (std::size_t t = 0; t < perturbed.size(); ++t)
      dists[t] = l2(perturbed[t].f, clean_main[t].f);
    const Quartiles q = quartiles(dists);
    ImageSweepRow row;
    row.alpha = alpha;
    row.mean_dist = q.mean;
    row.q1 = q.q1;
    row.median = q.median;
    row.q3 = q.q3;
    row.ar1 = ar1_of(db_main, perturbed, cfg.tau);
    result.image_rows.push_back(row);
  }

  // extrinsic error protocol: queries re-embedded with the perturbed
  // calibration, database stays on the true one
  const Vec3 axis{0, 0, 1};
  for (std::size_t gi = 0;
       gi < std::max(cfg.rot_errors_deg.size(), cfg.trans_errors.size());
       ++gi) {
    const double deg =
        cfg.rot_errors_deg[std::min(gi, cfg.rot_errors_deg.size() - 1)];
    const double tr =
        cfg.trans_errors[std::min(gi, cfg.trans_errors.size() - 1)];
    const double angle = deg * kPi / 180.0;

    ExtrinsicSweepRow row;
    std::vector<SceneFrame> perturbed_frames = clean_queries;
    for (auto& f : perturbed_frames) {
      auto p = perturb_extrinsics(*f.cal, axis, angle, {tr, 0, 0});
      f.cal = p.cal;
      row.t_e = p.t_e;
      row.r_e = p.r_e;
    }
    const auto main_q = embed_queries(main_model, perturbed_frames);
    row.ar1_main = ar1_of(db_main, main_q, cfg.tau);
    for (std::size_t t = 0; t < main_q.size() && !row.main_changed; ++t)
      row.main_changed = main_q[t].f != clean_main[t].f;
    if (control_model) {
      const auto ctrl_q = embed_queries(*control_model, perturbed_frames);
      row.ar1_control = ar1_of(db_control, ctrl_q, cfg.tau);
      for (std::size_t t = 0; t < ctrl_q.size() && !row.control_changed; ++t)
        row.control_changed = ctrl_q[t].f != clean_control[t].f;
    }
    result.extrinsic_rows.push_back(row);
  }
  return result;
}

void write_image_sweep_csv(const std::string& path, const SweepResult& result,
                           const std::string& trailer) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  os.precision(17);
  os << "alpha,mean_dist,q1_dist,median_dist,q3_dist,ar1\n";
  for (const auto& r : result.image_rows)
    os << r.alpha << "," << r.mean_dist << "," << r.q1 << "," << r.median
       << "," << r.q3 << "," << r.ar1 << "\n";
  os << "# clean_ar1=" << result.clean_ar1_main << "\n";
  if (!trailer.empty()) os << trailer << "\n";
}

void write_extrinsic_sweep_csv(const std::string& path,
                               const SweepResult& result,
                               const std::string& trailer) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  os.precision(17);
  os << "t_e,r_e,ar1_main,ar1_control,main_changed,control_changed\n";
  for (const auto& r : result.extrinsic_rows)
    os << r.t_e << "," << r.r_e << "," << r.ar1_main << "," << r.ar1_control
       << "," << (r.main_changed ? 1 : 0) << ","
       << (r.control_changed ? 1 : 0) << "\n";
  os << "# clean_ar1_main=" << result.clean_ar1_main
     << ", clean_ar1_control=" << result.clean_ar1_control << "\n";
  if (!trailer.empty()) os << trailer << "\n";
}

}  // namespace prf
