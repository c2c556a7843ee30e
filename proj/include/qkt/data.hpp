#pragma once

// Datasets, non-IID client partitions and query-class selection.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qkt/nn.hpp"
#include "qkt/rng.hpp"

namespace qkt {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  Matrix features;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dims() const { return static_cast<std::size_t>(features.cols()); }
  Batch batch(std::span<const std::size_t> rows) const;
  Batch all() const { return Batch{features, labels}; }
  Dataset subset(std::span<const std::size_t> rows) const;
  /// Count per class, length num_classes.
  std::vector<std::size_t> class_counts() const;
};

struct GlobalDataset {
  Dataset train;
  Dataset test;  // balanced: the same number of samples for every class
};

struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t dims = 8;
  std::size_t train_per_class = 600;
  std::size_t test_per_class = 100;
  double cluster_spread = 1.0;
  double center_scale = 2.0;
  std::uint64_t seed = 0;
};

/// Gaussian clusters around fixed random centers; features standardized with
/// the training set's per-feature mean and deviation.
GlobalDataset generate_synthetic(const SyntheticSpec& spec);

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct ClientDataset {
  int client_id = 0;
  Dataset samples;
  std::vector<std::size_t> source_index;  // row in the global training set
  std::map<int, std::size_t> class_counts;  // over all samples, zero counts omitted
  Splits splits;

  Dataset train() const { return samples.subset(splits.train); }
  Dataset val() const { return samples.subset(splits.val); }
  std::map<int, std::size_t> train_class_counts() const;
  /// Classes with at least one sample, ascending.
  std::vector<int> local_classes() const;
  std::size_t count(int cls) const;
};

enum class PartitionScheme { pathological, dirichlet };

struct PartitionSpec {
  PartitionScheme scheme = PartitionScheme::pathological;
  std::size_t num_clients = 10;
  std::size_t classes_per_client = 3;  // M, pathological only
  double dirichlet_alpha = 0.5;        // Dirichlet concentration only
  double low_fraction = 0.3;           // pathological per-class share range
  double high_fraction = 1.0;
  double val_fraction = 0.1;
  double test_fraction = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

std::vector<ClientDataset> partition_pathological(const Dataset& global, const PartitionSpec& spec);
std::vector<ClientDataset> partition_dirichlet(const Dataset& global, const PartitionSpec& spec);
std::vector<ClientDataset> partition(const Dataset& global, const PartitionSpec& spec);

/// Classes held by each client under the round-robin pathological assignment.
std::vector<std::vector<int>> pathological_supports(const PartitionSpec& spec,
                                                    std::size_t num_classes);

/// proportions[c][i]: share of class c assigned to client i.
std::vector<std::vector<double>> dirichlet_proportions(std::size_t num_classes,
                                                       const PartitionSpec& spec);

/// Splits `n` items by cumulative proportions; the counts always sum to n.
std::vector<std::size_t> apportion(std::size_t n, std::span<const double> proportions);

/// Draws from Dir(alpha * 1_k), stable for very small alpha.
std::vector<double> sample_dirichlet(std::size_t k, double alpha, Rng& rng);

enum class QueryMode { single, multi };

struct QuerySpec {
  int student_id = 0;
  std::vector<int> query_classes;  // ascending
  std::size_t sample_threshold = 50;
  QueryMode mode = QueryMode::single;
};

/// Classes with fewer than `threshold` samples in the client's data.
std::vector<int> eligible_query_classes(const ClientDataset& client, std::size_t threshold);

/// Single mode draws one eligible class; multi mode draws a count uniformly in
/// [2, min(4, eligible)] and then that many distinct classes.
QuerySpec select_query(const ClientDataset& client, QueryMode mode, std::size_t threshold,
                       std::uint64_t seed);

/// CSV rows are `f_1,...,f_d,label`. A non-numeric first row is treated as a header.
/// num_classes = 0 infers it as max(label) + 1.
Dataset read_dataset_csv(const std::filesystem::path& path, std::size_t num_classes = 0);
void write_dataset_csv(const std::filesystem::path& path, const Dataset& data);

/// Pretty-printed JSON mapping each client to its class counts and split sizes.
std::string partition_manifest(const std::vector<ClientDataset>& clients);

std::string to_string(PartitionScheme scheme);
std::string to_string(QueryMode mode);
PartitionScheme parse_partition_scheme(const std::string& s);
QueryMode parse_query_mode(const std::string& s);

}  // namespace qkt
