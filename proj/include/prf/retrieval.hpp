#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prf/geometry.hpp"
#include "prf/model.hpp"

namespace prf {

// Ordered descriptor collection with world positions; immutable once built,
// queries may run concurrently over a snapshot.
struct DescriptorDB {
  std::size_t dim = 0;
  std::vector<std::uint64_t> ids;
  std::vector<double> descriptors;  // count x dim, row-major
  std::vector<Vec3> positions;

  std::size_t size() const { return ids.size(); }
  const double* row(std::size_t i) const { return descriptors.data() + i * dim; }
  void add(std::uint64_t id, const std::vector<double>& f, const Vec3& pos);
};

struct TopkResult {
  std::vector<std::uint64_t> ids;
  std::vector<double> distances;   // ascending
  std::vector<std::size_t> indices;  // into the db
};

// Exact L2 ranking; ties broken by lower id.
TopkResult query_topk(const DescriptorDB& db, const std::vector<double>& q,
                      std::size_t k);

struct RecallReport {
  std::vector<double> ar_at_n;  // ar_at_n[i] = AR@(i+1)
  double ar_at_1pct = 0.0;
  std::size_t n_1pct = 0;
  std::size_t evaluated_queries = 0;
  std::size_t excluded_queries = 0;  // no geographic positive within tau
  double r_at_1() const { return ar_at_n.empty() ? 0.0 : ar_at_n[0]; }
};

// A query succeeds at N if any of its top-N retrievals lies within tau meters
// of the query's true position. Queries with no in-range positive at all are
// excluded from the denominators and counted.
RecallReport recall_metrics(const DescriptorDB& db,
                            const std::vector<DescriptorData>& queries,
                            std::size_t k_max, double tau);

// Binary format: magic "PRFD", u32 version=1, u32 count, u32 dim,
// count*dim float32 LE, count*3 float64 LE positions, count u64 LE ids.
void save_db(const DescriptorDB& db, const std::string& path);
DescriptorDB load_db(const std::string& path);

// CSV "N,AR" rows, a summary line for AR@1%, optional trailing comment.
void write_recall_csv(const std::string& path, const RecallReport& report,
                      const std::string& trailer);

}  // namespace prf
