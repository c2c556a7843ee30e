#include "qkt/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace qkt {

Batch Dataset::batch(std::span<const std::size_t> rows) const {
  Batch b;
  b.inputs.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
  b.labels.resize(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    b.inputs.row(static_cast<Eigen::Index>(k)) = features.row(static_cast<Eigen::Index>(rows[k]));
    b.labels[k] = labels[rows[k]];
  }
  return b;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Batch b = batch(rows);
  return Dataset{std::move(b.inputs), std::move(b.labels), num_classes};
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) ++counts.at(static_cast<std::size_t>(y));
  return counts;
}

GlobalDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (spec.dims == 0) throw ConfigError("synthetic data needs dims > 0");
  if (spec.train_per_class == 0) throw ConfigError("train_per_class must be > 0");
  if (spec.cluster_spread < 0.0) throw ConfigError("cluster_spread must be >= 0");
  Rng rng(derive_seed(spec.seed, Stream::data));
  std::normal_distribution<double> normal(0.0, 1.0);

  const auto C = static_cast<Eigen::Index>(spec.num_classes);
  const auto d = static_cast<Eigen::Index>(spec.dims);
  Matrix centers(C, d);
  for (Eigen::Index k = 0; k < centers.size(); ++k)
    centers.data()[k] = spec.center_scale * normal(rng);

  auto draw = [&](std::size_t per_class) {
    Dataset ds;
    ds.num_classes = spec.num_classes;
    ds.features.resize(static_cast<Eigen::Index>(per_class * spec.num_classes), d);
    ds.labels.reserve(per_class * spec.num_classes);
    Eigen::Index row = 0;
    for (Eigen::Index c = 0; c < C; ++c) {
      for (std::size_t s = 0; s < per_class; ++s, ++row) {
        for (Eigen::Index j = 0; j < d; ++j)
          ds.features(row, j) = centers(c, j) + spec.cluster_spread * normal(rng);
        ds.labels.push_back(static_cast<int>(c));
      }
    }
    return ds;
  };

  GlobalDataset out{draw(spec.train_per_class), draw(spec.test_per_class)};

  const Eigen::RowVectorXd mean = out.train.features.colwise().mean();
  Eigen::RowVectorXd sd =
      ((out.train.features.rowwise() - mean).array().square().colwise().sum() /
       static_cast<double>(out.train.features.rows()))
          .sqrt()
          .matrix();
  for (Eigen::Index j = 0; j < d; ++j)
    if (!(sd(j) > 0.0)) sd(j) = 1.0;
  for (Dataset* ds : {&out.train, &out.test}) {
    ds->features.rowwise() -= mean;
    ds->features.array().rowwise() /= sd.array();
  }
  return out;
}

std::map<int, std::size_t> ClientDataset::train_class_counts() const {
  std::map<int, std::size_t> counts;
  for (auto r : splits.train) ++counts[samples.labels[r]];
  return counts;
}

std::vector<int> ClientDataset::local_classes() const {
  std::vector<int> out;
  for (const auto& [c, n] : class_counts)
    if (n > 0) out.push_back(c);
  return out;
}

std::size_t ClientDataset::count(int cls) const {
  auto it = class_counts.find(cls);
  return it == class_counts.end() ? 0 : it->second;
}

void PartitionSpec::validate() const {
  if (num_clients < 2) throw ConfigError("partition needs at least 2 clients");
  if (scheme == PartitionScheme::pathological) {
    if (classes_per_client < 1) throw ConfigError("classes_per_client (M) must be >= 1");
    if (!(low_fraction > 0.0 && low_fraction <= high_fraction && high_fraction <= 1.0))
      throw ConfigError("pathological fractions must satisfy 0 < low <= high <= 1");
  } else if (!(dirichlet_alpha > 0.0)) {
    throw ConfigError("dirichlet alpha must be > 0");
  }
  if (!(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction < 1.0))
    throw ConfigError("val_fraction + test_fraction must lie in [0, 1)");
}

namespace {

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& global) {
  std::vector<std::vector<std::size_t>> by_class(global.num_classes);
  for (std::size_t r = 0; r < global.size(); ++r) {
    const int y = global.labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= global.num_classes)
      throw DataError("label " + std::to_string(y) + " out of range at row " + std::to_string(r));
    by_class[static_cast<std::size_t>(y)].push_back(r);
  }
  return by_class;
}

// Stratified split so every local class keeps training samples.
Splits stratified_splits(const Dataset& samples, const PartitionSpec& spec, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(samples.num_classes);
  for (std::size_t r = 0; r < samples.size(); ++r)
    by_class[static_cast<std::size_t>(samples.labels[r])].push_back(r);
  Splits s;
  for (auto& rows : by_class) {
    if (rows.empty()) continue;
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n = static_cast<double>(rows.size());
    auto n_val = static_cast<std::size_t>(std::floor(spec.val_fraction * n));
    auto n_test = static_cast<std::size_t>(std::floor(spec.test_fraction * n));
    if (n_val + n_test >= rows.size()) n_val = n_test = 0;
    s.val.insert(s.val.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.test.insert(s.test.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_val),
                  rows.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
    s.train.insert(s.train.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_val + n_test),
                   rows.end());
  }
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

std::vector<ClientDataset> build_clients(const Dataset& global,
                                         std::vector<std::vector<std::size_t>> assigned,
                                         const PartitionSpec& spec) {
  std::vector<ClientDataset> clients;
  clients.reserve(assigned.size());
  for (std::size_t i = 0; i < assigned.size(); ++i) {
    auto& rows = assigned[i];
    std::sort(rows.begin(), rows.end());
    ClientDataset c;
    c.client_id = static_cast<int>(i);
    c.samples = global.subset(rows);
    c.source_index = rows;
    for (int y : c.samples.labels) ++c.class_counts[y];
    Rng rng(derive_seed(spec.seed, Stream::partition, {1000 + i}));
    c.splits = stratified_splits(c.samples, spec, rng);
    clients.push_back(std::move(c));
  }
  return clients;
}

}  // namespace

std::vector<std::vector<int>> pathological_supports(const PartitionSpec& spec,
                                                    std::size_t num_classes) {
  spec.validate();
  const std::size_t M = spec.classes_per_client;
  const std::size_t L = spec.num_clients;
  if (M > num_classes)
    throw ConfigError("classes_per_client M=" + std::to_string(M) + " exceeds C=" +
                      std::to_string(num_classes));
  if (L * M < num_classes)
    throw ConfigError("L*M=" + std::to_string(L * M) + " slots cannot cover C=" +
                      std::to_string(num_classes) + " classes");
  std::vector<int> perm(num_classes);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(spec.seed, Stream::partition, {1}));
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<int>> supports(L);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t k = 0; k < M; ++k) supports[i].push_back(perm[(i * M + k) % num_classes]);
    std::sort(supports[i].begin(), supports[i].end());
  }
  return supports;
}

std::vector<ClientDataset> partition_pathological(const Dataset& global,
                                                  const PartitionSpec& spec) {
  if (spec.scheme != PartitionScheme::pathological)
    throw ConfigError("partition_pathological called with a non-pathological spec");
  const auto supports = pathological_supports(spec, global.num_classes);
  auto by_class = indices_by_class(global);

  std::vector<std::vector<std::size_t>> holders(global.num_classes);
  for (std::size_t i = 0; i < supports.size(); ++i)
    for (int c : supports[i]) holders[static_cast<std::size_t>(c)].push_back(i);

  Rng rng(derive_seed(spec.seed, Stream::partition, {2}));
  std::uniform_real_distribution<double> frac(spec.low_fraction, spec.high_fraction);
  std::vector<std::vector<std::size_t>> assigned(spec.num_clients);
  for (std::size_t c = 0; c < global.num_classes; ++c) {
    auto& rows = by_class[c];
    const auto& h = holders[c];
    if (h.empty()) continue;
    if (rows.size() < h.size())
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(rows.size()) +
                      " samples for " + std::to_string(h.size()) + " holding clients");
    std::shuffle(rows.begin(), rows.end(), rng);
    const std::vector<double> equal(h.size(), 1.0 / static_cast<double>(h.size()));
    const auto chunks = apportion(rows.size(), equal);
    std::size_t offset = 0;
    for (std::size_t j = 0; j < h.size(); ++j) {
      const std::size_t chunk = chunks[j];
      auto take = static_cast<std::size_t>(std::llround(frac(rng) * static_cast<double>(chunk)));
      take = std::clamp<std::size_t>(take, 1, chunk);
      assigned[h[j]].insert(assigned[h[j]].end(), rows.begin() + static_cast<std::ptrdiff_t>(offset),
                            rows.begin() + static_cast<std::ptrdiff_t>(offset + take));
      offset += chunk;
    }
  }
  return build_clients(global, std::move(assigned), spec);
}

std::vector<double> sample_dirichlet(std::size_t k, double alpha, Rng& rng) {
  if (k == 0) return {};
  if (!(alpha > 0.0)) throw ConfigError("dirichlet alpha must be > 0");
  // Gamma(a) = Gamma(a + 1) * U^(1/a), evaluated in log space so tiny alpha
  // does not underflow every component to zero.
  std::gamma_distribution<double> gamma(alpha + 1.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> logs(k);
  for (auto& l : logs) {
    double u = 0.0;
    while (u <= 0.0) u = uniform(rng);
    l = std::log(gamma(rng)) + std::log(u) / alpha;
  }
  const double m = *std::max_element(logs.begin(), logs.end());
  std::vector<double> p(k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) total += p[i] = std::exp(logs[i] - m);
  for (auto& v : p) v /= total;
  return p;
}

std::vector<std::vector<double>> dirichlet_proportions(std::size_t num_classes,
                                                       const PartitionSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, Stream::partition, {3}));
  std::vector<std::vector<double>> props;
  props.reserve(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c)
    props.push_back(sample_dirichlet(spec.num_clients, spec.dirichlet_alpha, rng));
  return props;
}

std::vector<std::size_t> apportion(std::size_t n, std::span<const double> proportions) {
  std::vector<std::size_t> counts(proportions.size(), 0);
  if (proportions.empty()) return counts;
  const double total = std::accumulate(proportions.begin(), proportions.end(), 0.0);
  double cum = 0.0;
  std::size_t prev = 0;
  for (std::size_t i = 0; i < proportions.size(); ++i) {
    cum += proportions[i];
    std::size_t edge = i + 1 == proportions.size()
                           ? n
                           : static_cast<std::size_t>(std::llround(cum / total * static_cast<double>(n)));
    edge = std::clamp(edge, prev, n);
    counts[i] = edge - prev;
    prev = edge;
  }
  return counts;
}

std::vector<ClientDataset> partition_dirichlet(const Dataset& global, const PartitionSpec& spec) {
  if (spec.scheme != PartitionScheme::dirichlet)
    throw ConfigError("partition_dirichlet called with a non-dirichlet spec");
  const auto props = dirichlet_proportions(global.num_classes, spec);
  auto by_class = indices_by_class(global);
  Rng rng(derive_seed(spec.seed, Stream::partition, {4}));
  std::vector<std::vector<std::size_t>> assigned(spec.num_clients);
  for (std::size_t c = 0; c < global.num_classes; ++c) {
    auto& rows = by_class[c];
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto counts = apportion(rows.size(), props[c]);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
      assigned[i].insert(assigned[i].end(), rows.begin() + static_cast<std::ptrdiff_t>(offset),
                         rows.begin() + static_cast<std::ptrdiff_t>(offset + counts[i]));
      offset += counts[i];
    }
  }
  return build_clients(global, std::move(assigned), spec);
}

std::vector<ClientDataset> partition(const Dataset& global, const PartitionSpec& spec) {
  return spec.scheme == PartitionScheme::pathological ? partition_pathological(global, spec)
                                                      : partition_dirichlet(global, spec);
}

std::vector<int> eligible_query_classes(const ClientDataset& client, std::size_t threshold) {
  std::vector<int> out;
  for (std::size_t c = 0; c < client.samples.num_classes; ++c)
    if (client.count(static_cast<int>(c)) < threshold) out.push_back(static_cast<int>(c));
  return out;
}

QuerySpec select_query(const ClientDataset& client, QueryMode mode, std::size_t threshold,
                       std::uint64_t seed) {
  auto eligible = eligible_query_classes(client, threshold);
  if (eligible.empty())
    throw DataError("client " + std::to_string(client.client_id) +
                    " has no class under the sample threshold " + std::to_string(threshold) +
                    "; lower the threshold");
  Rng rng(seed);
  QuerySpec q;
  q.student_id = client.client_id;
  q.sample_threshold = threshold;
  q.mode = mode;
  if (mode == QueryMode::single) {
    std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
    q.query_classes = {eligible[pick(rng)]};
  } else {
    const std::size_t hi = std::min<std::size_t>(4, eligible.size());
    std::size_t k = hi;
    if (hi >= 2) k = std::uniform_int_distribution<std::size_t>(2, hi)(rng);
    std::shuffle(eligible.begin(), eligible.end(), rng);
    q.query_classes.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(q.query_classes.begin(), q.query_classes.end());
  }
  return q;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_double(const std::string& s, double& out) {
  const char* begin = s.c_str();
  while (*begin == ' ' || *begin == '\t') ++begin;
  char* end = nullptr;
  out = std::strtod(begin, &end);
  if (end == begin) return false;
  while (*end == ' ' || *end == '\t' || *end == '\r') ++end;
  return *end == '\0';
}

}  // namespace

Dataset read_dataset_csv(const std::filesystem::path& path, std::size_t num_classes) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open dataset " + path.string());
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv(line);
    std::vector<double> values(cells.size());
    bool numeric = true;
    for (std::size_t k = 0; k < cells.size() && numeric; ++k) numeric = parse_double(cells[k], values[k]);
    if (!numeric) {
      if (rows.empty() && width == 0) {
        width = cells.size();  // header
        continue;
      }
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": non-numeric cell");
    }
    if (cells.size() < 2)
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": need at least one feature and a label");
    if (width == 0) width = cells.size();
    if (cells.size() != width)
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(width) + " columns, got " + std::to_string(cells.size()));
    const double label = values.back();
    if (label < 0 || label != std::floor(label))
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": label must be a non-negative integer");
    labels.push_back(static_cast<int>(label));
    values.pop_back();
    rows.push_back(std::move(values));
  }
  if (rows.empty()) throw DataError("dataset " + path.string() + " has no rows");
  Dataset ds;
  ds.features.resize(static_cast<Eigen::Index>(rows.size()),
                     static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < rows[r].size(); ++j)
      ds.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = rows[r][j];
  ds.labels = std::move(labels);
  const int max_label = *std::max_element(ds.labels.begin(), ds.labels.end());
  ds.num_classes = num_classes == 0 ? static_cast<std::size_t>(max_label) + 1 : num_classes;
  if (static_cast<std::size_t>(max_label) >= ds.num_classes)
    throw DataError("label " + std::to_string(max_label) + " exceeds num_classes");
  return ds;
}

void write_dataset_csv(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  char buf[32];
  for (std::size_t r = 0; r < data.size(); ++r) {
    for (Eigen::Index j = 0; j < data.features.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", data.features(static_cast<Eigen::Index>(r), j));
      f << buf << ',';
    }
    f << data.labels[r] << '\n';
  }
}

std::string partition_manifest(const std::vector<ClientDataset>& clients) {
  nlohmann::ordered_json doc;
  doc["num_clients"] = clients.size();
  auto& list = doc["clients"] = nlohmann::ordered_json::array();
  for (const auto& c : clients) {
    nlohmann::ordered_json entry;
    entry["client_id"] = c.client_id;
    nlohmann::ordered_json counts = nlohmann::ordered_json::object();
    for (const auto& [cls, n] : c.class_counts) counts[std::to_string(cls)] = n;
    entry["class_counts"] = counts;
    entry["support"] = c.local_classes();
    entry["train"] = c.splits.train.size();
    entry["val"] = c.splits.val.size();
    entry["test"] = c.splits.test.size();
    list.push_back(std::move(entry));
  }
  return doc.dump(2);
}

std::string to_string(PartitionScheme scheme) {
  return scheme == PartitionScheme::pathological ? "pathological" : "dirichlet";
}

std::string to_string(QueryMode mode) { return mode == QueryMode::single ? "single" : "multi"; }

PartitionScheme parse_partition_scheme(const std::string& s) {
  if (s == "pathological") return PartitionScheme::pathological;
  if (s == "dirichlet") return PartitionScheme::dirichlet;
  throw ConfigError("unknown partition scheme '" + s + "' (expected pathological|dirichlet)");
}

QueryMode parse_query_mode(const std::string& s) {
  if (s == "single") return QueryMode::single;
  if (s == "multi") return QueryMode::multi;
  throw ConfigError("unknown query mode '" + s + "' (expected single|multi)");
}

}  // namespace qkt
