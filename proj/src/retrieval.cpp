#include "prf/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "prf/binio.hpp"

namespace prf {

namespace {
constexpr char kDbMagic[4] = {'P', 'R', 'F', 'D'};
constexpr std::uint32_t kDbVersion = 1;
}  // namespace

void DescriptorDB::add(std::uint64_t id, const std::vector<double>& f,
                       const Vec3& pos) {
  if (dim == 0) dim = f.size();
  if (f.size() != dim)
    throw DimensionError("DescriptorDB: descriptor length mismatch");
  for (std::uint64_t existing : ids)
    if (existing == id) throw ContractError("DescriptorDB: duplicate id");
  ids.push_back(id);
  descriptors.insert(descriptors.end(), f.begin(), f.end());
  positions.push_back(pos);
}

TopkResult query_topk(const DescriptorDB& db, const std::vector<double>& q,
                      std::size_t k) {
  if (db.size() == 0) throw ContractError("query_topk: empty database");
  if (k > db.size()) throw ContractError("query_topk: k exceeds database size");
  if (q.size() != db.dim)
    throw DimensionError("query_topk: descriptor length mismatch");

  std::vector<std::size_t> order(db.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> dist(db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    const double* r = db.row(i);
    double acc = 0;
    for (std::size_t j = 0; j < db.dim; ++j)
      acc += (q[j] - r[j]) * (q[j] - r[j]);
    dist[i] = std::sqrt(acc);
  }
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(k),
                    order.end(), [&](std::size_t a, std::size_t b) {
                      if (dist[a] != dist[b]) return dist[a] < dist[b];
                      return db.ids[a] < db.ids[b];
                    });
  TopkResult out;
  for (std::size_t t = 0; t < k; ++t) {
    out.indices.push_back(order[t]);
    out.ids.push_back(db.ids[order[t]]);
    out.distances.push_back(dist[order[t]]);
  }
  return out;
}

namespace {

double geo_dist(const Vec3& a, const Vec3& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) +
                   (a[1] - b[1]) * (a[1] - b[1]) +
                   (a[2] - b[2]) * (a[2] - b[2]));
}

}  // namespace

RecallReport recall_metrics(const DescriptorDB& db,
                            const std::vector<DescriptorData>& queries,
                            std::size_t k_max, double tau) {
  if (db.size() == 0) throw ContractError("recall_metrics: empty database");
  RecallReport report;
  report.n_1pct = static_cast<std::size_t>(
      std::ceil(static_cast<double>(db.size()) / 100.0));
  const std::size_t depth = std::min(db.size(), std::max(k_max, report.n_1pct));
  report.ar_at_n.assign(std::min(k_max, db.size()), 0.0);

  std::size_t hits_1pct = 0;
  for (const auto& q : queries) {
    bool has_positive = false;
    for (std::size_t i = 0; i < db.size() && !has_positive; ++i)
      has_positive = geo_dist(db.positions[i], q.position) <= tau;
    if (!has_positive) {
      ++report.excluded_queries;
      continue;
    }
    ++report.evaluated_queries;
    const TopkResult top = query_topk(db, q.f, depth);
    std::size_t first_hit = depth;  // rank of the first geographic positive
    for (std::size_t t = 0; t < depth; ++t) {
      if (geo_dist(db.positions[top.indices[t]], q.position) <= tau) {
        first_hit = t;
        break;
      }
    }
    for (std::size_t n = 0; n < report.ar_at_n.size(); ++n)
      if (first_hit <= n) report.ar_at_n[n] += 1.0;
    if (first_hit < report.n_1pct) ++hits_1pct;
  }
  if (report.evaluated_queries > 0) {
    for (double& v : report.ar_at_n)
      v /= static_cast<double>(report.evaluated_queries);
    report.ar_at_1pct =
        static_cast<double>(hits_1pct) /
        static_cast<double>(report.evaluated_queries);
  }
  return report;
}

void save_db(const DescriptorDB& db, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  binio::Writer w{os};
  w.bytes(kDbMagic, 4);
  w.u32(kDbVersion);
  w.u32(static_cast<std::uint32_t>(db.size()));
  w.u32(static_cast<std::uint32_t>(db.dim));
  for (double v : db.descriptors) w.f32(static_cast<float>(v));
  for (const auto& p : db.positions) {
    w.f64(p[0]);
    w.f64(p[1]);
    w.f64(p[2]);
  }
  for (std::uint64_t id : db.ids) w.u64(id);
  if (!os) throw Error("write failed: " + path);
}

DescriptorDB load_db(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  binio::Reader r{is};
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kDbMagic, 4) != 0)
    throw FormatError("descriptor db: bad magic", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kDbVersion)
    throw FormatError("descriptor db: unsupported version", 4);
  const std::uint32_t count = r.u32("count");
  const std::uint32_t dim = r.u32("dim");
  DescriptorDB db;
  db.dim = dim;
  db.descriptors.resize(static_cast<std::size_t>(count) * dim);
  for (auto& v : db.descriptors)
    v = static_cast<double>(r.f32("descriptor data"));
  db.positions.resize(count);
  for (auto& p : db.positions) {
    p[0] = r.f64("position");
    p[1] = r.f64("position");
    p[2] = r.f64("position");
  }
  db.ids.resize(count);
  for (auto& id : db.ids) id = r.u64("id");
  // trailing garbage means a malformed writer
  char probe;
  is.read(&probe, 1);
  if (is.gcount() == 1)
    throw FormatError("descriptor db: trailing bytes", r.offset);
  return db;
}

void write_recall_csv(const std::string& path, const RecallReport& report,
                      const std::string& trailer) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  os.precision(17);
  os << "N,AR\n";
  for (std::size_t n = 0; n < report.ar_at_n.size(); ++n)
    os << (n + 1) << "," << report.ar_at_n[n] << "\n";
  os << "# AR@1% (N=" << report.n_1pct << ") = " << report.ar_at_1pct
     << ", evaluated=" << report.evaluated_queries
     << ", excluded=" << report.excluded_queries << "\n";
  if (!trailer.empty()) os << trailer << "\n";
}

}  // namespace prf
