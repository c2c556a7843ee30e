#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "qkt/data.hpp"
#include "qkt/metrics.hpp"

using namespace qkt;

namespace {

Dataset small_global(std::size_t classes = 10, std::size_t per_class = 100, std::uint64_t seed = 0) {
  SyntheticSpec s;
  s.num_classes = classes;
  s.train_per_class = per_class;
  s.test_per_class = 10;
  s.seed = seed;
  return generate_synthetic(s).train;
}

ClientDataset client_with_counts(const std::map<int, std::size_t>& counts, std::size_t C) {
  ClientDataset c;
  c.samples.num_classes = C;
  std::size_t n = 0;
  for (const auto& [cls, k] : counts) n += k;
  c.samples.features = Matrix::Zero(static_cast<Eigen::Index>(n), 2);
  for (const auto& [cls, k] : counts) {
    for (std::size_t i = 0; i < k; ++i) c.samples.labels.push_back(cls);
    if (k > 0) c.class_counts[cls] = k;
  }
  c.splits.train.resize(n);
  std::iota(c.splits.train.begin(), c.splits.train.end(), std::size_t{0});
  return c;
}

}  // namespace

TEST_CASE("synthetic data shape and determinism") {
  SyntheticSpec s;
  s.train_per_class = 100;
  const auto a = generate_synthetic(s);
  CHECK(a.train.size() == 1000);
  CHECK(a.test.size() == 1000);
  CHECK(a.train.dims() == s.dims);
  for (auto n : a.test.class_counts()) CHECK(n == 100);
  const auto b = generate_synthetic(s);
  CHECK(a.train.features == b.train.features);
  CHECK(a.train.labels == b.train.labels);
  s.seed = 1;
  CHECK(generate_synthetic(s).train.features != a.train.features);
}

TEST_CASE("near-zero spread makes two classes linearly separable") {
  SyntheticSpec s;
  s.num_classes = 2;
  s.cluster_spread = 1e-3;
  s.train_per_class = 50;
  s.test_per_class = 50;
  const auto g = generate_synthetic(s);
  ModelParams m = make_mlp(s.dims, std::vector<std::size_t>{}, 2, 1);
  const FreezeMask all = FreezeMask::trainable(m);
  AdamConfig cfg;
  cfg.learning_rate = 1e-2;
  AdamState st = AdamState::for_model(m, cfg);
  BatchLoss loss = [&](const ModelParams& p, std::span<const std::size_t> rows) {
    return supervised_loss_and_grads(p, g.train.batch(rows), all);
  };
  train_epochs(m, g.train.size(), loss, st, all, {50, 16}, 3);
  const auto acc = per_class_accuracy(m, g.test);
  CHECK(acc.at(0) == 1.0);
  CHECK(acc.at(1) == 1.0);
}

TEST_CASE("pathological partition: exact support, conservation, disjointness") {
  const Dataset g = small_global();
  PartitionSpec spec;
  spec.seed = 5;
  const auto clients = partition_pathological(g, spec);
  CHECK(clients.size() == 10);
  std::set<std::size_t> seen;
  std::size_t total = 0;
  std::set<int> covered;
  for (const auto& c : clients) {
    CHECK(c.local_classes().size() == 3);
    for (int cls : c.local_classes()) covered.insert(cls);
    for (std::size_t k = 0; k < c.source_index.size(); ++k) {
      CHECK(seen.insert(c.source_index[k]).second);
      CHECK(c.samples.labels[k] == g.labels[c.source_index[k]]);
    }
    total += c.samples.size();
    // splits partition the client's samples
    CHECK(c.splits.train.size() + c.splits.val.size() + c.splits.test.size() == c.samples.size());
    std::set<std::size_t> all(c.splits.train.begin(), c.splits.train.end());
    for (auto r : c.splits.val) CHECK(all.insert(r).second);
    CHECK(c.splits.test.empty());
    std::map<int, std::size_t> counted;
    for (int y : c.samples.labels) ++counted[y];
    CHECK(counted == c.class_counts);
  }
  CHECK(covered.size() == 10);
  CHECK(total <= g.size());
  const auto again = partition_pathological(g, spec);
  for (std::size_t i = 0; i < clients.size(); ++i) CHECK(again[i].source_index == clients[i].source_index);
}

TEST_CASE("pathological partition edge cases") {
  const Dataset g = small_global();
  PartitionSpec spec;
  spec.classes_per_client = 10;
  for (const auto& c : partition_pathological(g, spec)) CHECK(c.local_classes().size() == 10);

  spec.classes_per_client = 1;
  spec.num_clients = 10;
  const auto supports = pathological_supports(spec, 10);
  std::set<int> distinct;
  for (const auto& s : supports) {
    CHECK(s.size() == 1);
    distinct.insert(s[0]);
  }
  CHECK(distinct.size() == 10);

  spec.num_clients = 3;
  spec.classes_per_client = 3;
  CHECK_THROWS_AS(pathological_supports(spec, 10), ConfigError);
  spec.classes_per_client = 11;
  spec.num_clients = 10;
  CHECK_THROWS_AS(pathological_supports(spec, 10), ConfigError);
  spec.num_clients = 1;
  spec.classes_per_client = 1;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("dirichlet proportions are simplex points and partition conserves samples") {
  const Dataset g = small_global();
  PartitionSpec spec;
  spec.scheme = PartitionScheme::dirichlet;
  spec.dirichlet_alpha = 0.5;
  for (const auto& p : dirichlet_proportions(10, spec)) {
    CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-12);
    for (double v : p) CHECK(v >= 0.0);
  }
  const auto clients = partition_dirichlet(g, spec);
  std::vector<std::size_t> per_class(10, 0);
  std::set<std::size_t> seen;
  for (const auto& c : clients) {
    for (auto r : c.source_index) CHECK(seen.insert(r).second);
    for (const auto& [cls, n] : c.class_counts) per_class[static_cast<std::size_t>(cls)] += n;
  }
  CHECK(seen.size() == g.size());
  for (auto n : per_class) CHECK(n == 100);
}

TEST_CASE("dirichlet with huge alpha is close to uniform") {
  const Dataset g = small_global(10, 1000);
  PartitionSpec spec;
  spec.scheme = PartitionScheme::dirichlet;
  spec.dirichlet_alpha = 1e6;
  for (const auto& c : partition_dirichlet(g, spec))
    for (int cls = 0; cls < 10; ++cls) {
      const double share = static_cast<double>(c.count(cls)) / 1000.0;
      CHECK(std::abs(share - 0.1) < 0.05 * 0.1 + 1e-12);
    }
}

TEST_CASE("dirichlet with small alpha is heterogeneous") {
  const Dataset g = small_global();
  std::size_t hits = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    PartitionSpec spec;
    spec.scheme = PartitionScheme::dirichlet;
    spec.dirichlet_alpha = 0.1;
    spec.seed = seed;
    bool any = false;
    for (const auto& c : partition_dirichlet(g, spec)) {
      if (c.samples.size() == 0) continue;
      std::vector<std::size_t> n;
      for (const auto& [cls, k] : c.class_counts) n.push_back(k);
      std::sort(n.rbegin(), n.rend());
      const double top2 = static_cast<double>(n[0] + (n.size() > 1 ? n[1] : 0));
      if (top2 > 0.5 * static_cast<double>(c.samples.size())) any = true;
    }
    hits += any;
  }
  CHECK(hits == 20);
}

TEST_CASE("sample_dirichlet survives tiny alpha") {
  Rng rng(1);
  const auto p = sample_dirichlet(10, 1e-3, rng);
  CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-12);
  for (double v : p) CHECK(std::isfinite(v));
}

TEST_CASE("apportion sums to n") {
  const std::vector<double> p{0.2, 0.3, 0.5};
  const auto c = apportion(7, p);
  CHECK(c[0] + c[1] + c[2] == 7);
  const std::vector<double> z{0.0, 1.0, 0.0};
  CHECK(apportion(5, z) == std::vector<std::size_t>{0, 5, 0});
}

TEST_CASE("query selection respects the threshold") {
  const ClientDataset c = client_with_counts({{0, 100}, {1, 0}, {2, 3}}, 3);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto q = select_query(c, QueryMode::single, 50, seed);
    REQUIRE(q.query_classes.size() == 1);
    CHECK((q.query_classes[0] == 1 || q.query_classes[0] == 2));
  }
  CHECK(select_query(c, QueryMode::single, 50, 4).query_classes ==
        select_query(c, QueryMode::single, 50, 4).query_classes);
  CHECK_THROWS_AS(select_query(c, QueryMode::single, 0, 0), DataError);
  const ClientDataset full = client_with_counts({{0, 100}, {1, 60}, {2, 70}}, 3);
  CHECK_THROWS_AS(select_query(full, QueryMode::single, 50, 0), DataError);
}

TEST_CASE("multi-query draws between 2 and 4 distinct eligible classes") {
  const ClientDataset c = client_with_counts({{0, 100}, {1, 100}}, 10);
  std::set<std::size_t> sizes;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto q = select_query(c, QueryMode::multi, 50, seed);
    sizes.insert(q.query_classes.size());
    CHECK(std::is_sorted(q.query_classes.begin(), q.query_classes.end()));
    CHECK(std::adjacent_find(q.query_classes.begin(), q.query_classes.end()) == q.query_classes.end());
    for (int cls : q.query_classes) CHECK(cls >= 2);
  }
  CHECK(sizes == std::set<std::size_t>{2, 3, 4});
  const ClientDataset one = client_with_counts({{0, 100}, {1, 5}}, 2);
  CHECK(select_query(one, QueryMode::multi, 50, 0).query_classes == std::vector<int>{1});
}

TEST_CASE("dataset csv round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "qkt_csv_test";
  std::filesystem::create_directories(dir);
  SyntheticSpec s;
  s.train_per_class = 5;
  s.test_per_class = 2;
  const auto g = generate_synthetic(s);
  write_dataset_csv(dir / "train.csv", g.train);
  const Dataset back = read_dataset_csv(dir / "train.csv");
  CHECK(back.labels == g.train.labels);
  CHECK(back.num_classes == 10);
  CHECK(back.features == g.train.features);
  {
    std::ofstream bad(dir / "bad.csv");
    bad << "1.0,2.0,0\n1.0,x,1\n";
  }
  CHECK_THROWS_AS(read_dataset_csv(dir / "bad.csv"), DataError);
  CHECK_THROWS_AS(read_dataset_csv(dir / "missing.csv"), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("partition manifest lists every client") {
  PartitionSpec spec;
  spec.num_clients = 4;
  spec.classes_per_client = 3;
  const auto clients = partition(small_global(), spec);
  const std::string m = partition_manifest(clients);
  CHECK(m.find("\"client_id\"") != std::string::npos);
  CHECK(parse_partition_scheme(to_string(PartitionScheme::dirichlet)) == PartitionScheme::dirichlet);
  CHECK_THROWS_AS(parse_query_mode("several"), ConfigError);
}
