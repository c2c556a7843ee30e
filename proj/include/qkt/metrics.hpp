#pragma once

// Per-class accuracy and the transfer metric suite.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qkt/data.hpp"
#include "qkt/nn.hpp"

namespace qkt {

/// class -> accuracy; classes without test samples are absent.
using PerClassAccuracy = std::map<int, double>;

PerClassAccuracy per_class_accuracy(std::span<const int> predicted, std::span<const int> labels);
PerClassAccuracy per_class_accuracy(const ModelParams& model, const Dataset& test);

/// Class weights behind average_accuracy: the local training-class ratio for
/// local classes, 1 for query classes (query status wins when a class is both).
std::map<int, double> average_accuracy_weights(const std::map<int, std::size_t>& local_counts,
                                               std::span<const int> query);

/// Weighted mean of per-class accuracy over local and query classes.
double average_accuracy(const PerClassAccuracy& acc,
                        const std::map<int, std::size_t>& local_counts,
                        std::span<const int> query);

double query_acc_gain(const PerClassAccuracy& pre, const PerClassAccuracy& post,
                      std::span<const int> query);

/// Mean of min(0, post - pre) over local classes; never positive.
double forgetting(const PerClassAccuracy& pre, const PerClassAccuracy& post,
                  std::span<const int> local_classes);

double uniform_accuracy(const PerClassAccuracy& acc);

double probe_mse(std::span<const double> predicted, std::span<const double> actual);

/// Counts normalized to a length-C distribution.
std::vector<double> normalized_distribution(const std::map<int, std::size_t>& counts,
                                            std::size_t num_classes);

struct MetricsReport {
  std::string protocol;
  std::string sweep_key;
  double sweep_value = 0.0;
  std::uint64_t seed = 0;
  int client_id = 0;
  std::vector<int> query_classes;
  std::vector<int> local_classes;  // local classes excluding queried ones
  PerClassAccuracy per_class_acc_pre;
  PerClassAccuracy per_class_acc_post;
  std::map<int, double> weights;
  double avg_acc = 0.0;
  double uniform_acc = 0.0;
  double query_acc_gain = 0.0;
  double forgetting = 0.0;
  int comm_rounds = 0;
};

/// Computes every metric from pre/post per-class accuracy. `local_counts` are
/// the student's training class counts.
MetricsReport make_report(const PerClassAccuracy& pre, const PerClassAccuracy& post,
                          const std::map<int, std::size_t>& local_counts,
                          std::span<const int> query, int comm_rounds);

/// Column order of the results CSV.
std::string results_csv_header();
std::string results_csv_row(const MetricsReport& r);
/// JSON object with the per-class vectors (length C, null where a class has no test data).
std::string report_json(const MetricsReport& r, std::size_t num_classes);

}  // namespace qkt
