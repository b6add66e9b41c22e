#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "prf/retrieval.hpp"

using namespace prf;

namespace {

DescriptorDB line_db() {
  // 1-D descriptors {0, 1, 3} at distinct positions
  DescriptorDB db;
  db.add(0, {0.0}, {0, 0, 0});
  db.add(1, {1.0}, {100, 0, 0});
  db.add(2, {3.0}, {200, 0, 0});
  return db;
}

}  // namespace

TEST_CASE("topk examples") {
  DescriptorDB db = line_db();

  // exact match ranks first with zero distance
  auto exact = query_topk(db, {3.0}, 3);
  CHECK(exact.ids[0] == 2);
  CHECK(exact.distances[0] == 0.0);

  // q = 0.9 -> order (1, 0, 3-valued id 2)
  auto r = query_topk(db, {0.9}, 3);
  CHECK(r.ids == std::vector<std::uint64_t>{1, 0, 2});
  CHECK(r.distances[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(std::is_sorted(r.distances.begin(), r.distances.end()));

  // k = |db| is a permutation of all ids
  auto all = query_topk(db, {-5.0}, 3);
  std::vector<std::uint64_t> ids = all.ids;
  std::sort(ids.begin(), ids.end());
  CHECK(ids == std::vector<std::uint64_t>{0, 1, 2});

  CHECK_THROWS_AS(query_topk(DescriptorDB{}, {0.0}, 1), ContractError);
  CHECK_THROWS_AS(query_topk(db, {0.0}, 4), ContractError);
}

TEST_CASE("topk tie break by lower id") {
  DescriptorDB db;
  db.add(7, {1.0}, {0, 0, 0});
  db.add(3, {1.0}, {1, 0, 0});
  db.add(5, {1.0}, {2, 0, 0});
  auto r = query_topk(db, {1.0}, 3);
  CHECK(r.ids == std::vector<std::uint64_t>{3, 5, 7});
}

TEST_CASE("recall metrics basic scenarios") {
  // query whose nearest descriptor is geographically outside tau but whose
  // rank-2 is inside
  DescriptorDB db;
  db.add(0, {0.0}, {1000, 0, 0});  // descriptor-near, geographically far
  db.add(1, {0.5}, {0, 0, 0});     // true place
  DescriptorData q;
  q.f = {0.0};
  q.position = {3, 0, 0};
  auto rep = recall_metrics(db, {q}, 2, 25.0);
  CHECK(rep.evaluated_queries == 1);
  CHECK(rep.ar_at_n[0] == 0.0);  // R@1
  CHECK(rep.ar_at_n[1] == 1.0);  // AR@2

  // query with no in-range positive is excluded and counted
  DescriptorData far;
  far.f = {0.0};
  far.position = {5000, 0, 0};
  auto rep2 = recall_metrics(db, {q, far}, 2, 25.0);
  CHECK(rep2.evaluated_queries == 1);
  CHECK(rep2.excluded_queries == 1);
}

TEST_CASE("recall metrics match a naive reference on random instances") {
  Rng rng(71);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n_db = 3 + rng.next_u64() % 20;
    const std::size_t n_q = 1 + rng.next_u64() % 10;
    const std::size_t dim = 1 + rng.next_u64() % 4;
    const double tau = 25.0;
    DescriptorDB db;
    for (std::size_t i = 0; i < n_db; ++i) {
      std::vector<double> f(dim);
      for (auto& v : f) v = rng.uniform(-2, 2);
      db.add(i, f, {rng.uniform(0, 200), rng.uniform(0, 200), 0});
    }
    std::vector<DescriptorData> queries(n_q);
    for (auto& q : queries) {
      q.f.resize(dim);
      for (auto& v : q.f) v = rng.uniform(-2, 2);
      q.position = {rng.uniform(0, 200), rng.uniform(0, 200), 0};
    }
    const std::size_t k_max = 1 + rng.next_u64() % n_db;
    auto rep = recall_metrics(db, queries, k_max, tau);

    // naive: full sort per query, quadratic positives scan
    std::size_t evaluated = 0;
    std::vector<double> hits(k_max, 0);
    for (const auto& q : queries) {
      bool has_pos = false;
      for (std::size_t i = 0; i < n_db; ++i) {
        const double dx = db.positions[i][0] - q.position[0];
        const double dy = db.positions[i][1] - q.position[1];
        if (std::sqrt(dx * dx + dy * dy) <= tau) has_pos = true;
      }
      if (!has_pos) continue;
      ++evaluated;
      std::vector<std::pair<double, std::size_t>> order;
      for (std::size_t i = 0; i < n_db; ++i) {
        double acc = 0;
        for (std::size_t d = 0; d < dim; ++d)
          acc += (db.row(i)[d] - q.f[d]) * (db.row(i)[d] - q.f[d]);
        order.push_back({std::sqrt(acc), i});
      }
      std::sort(order.begin(), order.end(),
                [&](const auto& a, const auto& b) {
                  if (a.first != b.first) return a.first < b.first;
                  return db.ids[a.second] < db.ids[b.second];
                });
      for (std::size_t nn = 0; nn < k_max; ++nn) {
        bool ok = false;
        for (std::size_t t = 0; t <= nn; ++t) {
          const auto& pos = db.positions[order[t].second];
          const double dx = pos[0] - q.position[0];
          const double dy = pos[1] - q.position[1];
          if (std::sqrt(dx * dx + dy * dy) <= tau) ok = true;
        }
        if (ok) hits[nn] += 1.0;
      }
    }
    REQUIRE(rep.evaluated_queries == evaluated);
    for (std::size_t nn = 0; nn < k_max; ++nn) {
      const double want = evaluated ? hits[nn] / static_cast<double>(evaluated)
                                    : 0.0;
      CHECK(rep.ar_at_n[nn] == doctest::Approx(want).epsilon(1e-12));
    }
    // AR@N nondecreasing in N
    for (std::size_t nn = 1; nn < rep.ar_at_n.size(); ++nn)
      CHECK(rep.ar_at_n[nn] >= rep.ar_at_n[nn - 1]);
  }
}

TEST_CASE("db save/load round trip") {
  namespace fs = std::filesystem;
  const std::string path =
      (fs::temp_directory_path() / "prf_test_db.prfd").string();
  Rng rng(73);
  DescriptorDB db;
  for (std::size_t i = 0; i < 9; ++i) {
    std::vector<double> f(6);
    for (auto& v : f) v = rng.uniform(-3, 3);
    db.add(100 + i, f, {rng.uniform(-50, 50), rng.uniform(-50, 50), 1.5});
  }
  save_db(db, path);
  DescriptorDB loaded = load_db(path);
  CHECK(loaded.size() == db.size());
  CHECK(loaded.dim == db.dim);
  CHECK(loaded.ids == db.ids);
  CHECK(loaded.positions == db.positions);  // float64, exact
  for (std::size_t i = 0; i < db.descriptors.size(); ++i)
    CHECK(loaded.descriptors[i] ==
          static_cast<double>(static_cast<float>(db.descriptors[i])));

  // a second save/load round trip is bit-stable
  const std::string path2 = path + ".2";
  save_db(loaded, path2);
  DescriptorDB loaded2 = load_db(path2);
  CHECK(loaded2.descriptors == loaded.descriptors);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b2.size() == b1.size());

  fs::remove(path);
  fs::remove(path2);
}

TEST_CASE("db format errors carry offsets") {
  namespace fs = std::filesystem;
  const std::string path =
      (fs::temp_directory_path() / "prf_test_bad.prfd").string();
  DescriptorDB db;
  db.add(1, {1.0, 2.0}, {0, 0, 0});
  save_db(db, path);

  {  // corrupt the magic
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.put('Q');
  }
  CHECK_THROWS_AS(load_db(path), FormatError);

  save_db(db, path);
  {  // truncate
    fs::resize_file(path, 10);
  }
  try {
    load_db(path);
    CHECK(false);
  } catch (const FormatError& e) {
    CHECK(e.offset >= 8);
  }

  // empty db round-trips with count 0
  DescriptorDB empty;
  empty.dim = 4;
  save_db(empty, path);
  DescriptorDB loaded = load_db(path);
  CHECK(loaded.size() == 0);
  CHECK(loaded.dim == 4);
  fs::remove(path);
}
