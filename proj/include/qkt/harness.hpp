#pragma once

// Config-driven experiments: data -> partition -> local pretraining ->
// protocols -> metrics -> artifacts.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qkt/baselines.hpp"
#include "qkt/data.hpp"
#include "qkt/metrics.hpp"
#include "qkt/nn.hpp"
#include "qkt/transfer.hpp"

namespace qkt {

struct LocalTrainSpec {
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::size_t batch_size = 32;
  AdamConfig adam{};
};

/// Trains on the client's train split with early stopping on validation
/// accuracy (ties broken by lower validation loss) and returns the
/// best-validation model. With an empty validation split the training split is
/// scored instead.
ModelParams local_pretrain(const ClientDataset& client, const ModelParams& init,
                           const LocalTrainSpec& spec, std::uint64_t seed,
                           std::size_t* epochs_run = nullptr);

struct DatasetSpec {
  std::string source = "synthetic";  // synthetic | csv
  SyntheticSpec synthetic{};
  std::string train_path;
  std::string test_path;
};

enum class MethodKind { transfer, local, fedavg, fedavg1, ft_fedavg, ensemble };

struct ProtocolSpec {
  std::string name;  // label in results, defaults to the method name
  MethodKind kind = MethodKind::transfer;
  TransferConfig transfer{};  // kind == transfer
  FedConfig fed{};            // federated kinds
};

struct SweepSpec {
  std::string key;  // empty = no sweep
  std::vector<double> values;
};

struct QueryPolicy {
  QueryMode mode = QueryMode::single;
  std::size_t sample_threshold = 50;
  std::vector<int> clients;  // empty = every client queries
};

struct ExperimentConfig {
  DatasetSpec dataset;
  PartitionSpec partition;
  std::vector<std::size_t> hidden{64, 32};
  LocalTrainSpec local;
  QueryPolicy query;
  std::vector<ProtocolSpec> protocols;
  SweepSpec sweep;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "results";
  double selection_fraction = 0.5;  // share of the test set used to pick epochs when variable_epochs is on
  bool save_checkpoints = true;
  bool write_instrumentation = true;

  /// Canonical JSON with every default filled in.
  std::string canonical_json() const;
  /// FNV-1a over canonical_json(); equal for semantically identical configs.
  std::string hash() const;
};

/// Parses and validates a JSON config. Errors carry a byte offset or a JSON
/// pointer to the offending value.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

struct RunRecord {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<MetricsReport> reports;
  std::vector<std::string> errors;  // jobs or stages that failed, with cause
  double wall_clock_seconds = 0.0;  // not written to artifacts
  std::vector<std::string> instrumentation_paths;
  std::vector<std::string> checkpoint_digests;  // pretrained models, by client
};

/// One seed's prepared network: data, partition and pretrained models.
struct Scenario {
  GlobalDataset data;
  Dataset selection;  // epoch-selection split carved from the test set, may be empty
  std::vector<ClientDataset> clients;
  std::vector<ModelParams> models;
  std::vector<PerClassAccuracy> pre_accuracy;
};

GlobalDataset load_dataset(const DatasetSpec& spec, std::uint64_t seed);
Scenario build_scenario(const ExperimentConfig& config, std::uint64_t seed,
                        const std::filesystem::path& checkpoint_dir = {});

using LogFn = std::function<void(const std::string&)>;
/// Receives the report row of every transfer job together with its trace.
using TraceFn = std::function<void(const MetricsReport&, const TransferTrace&)>;

struct RunOptions {
  bool write_outputs = true;
  std::filesystem::path checkpoint_dir;  // load pretrained models instead of training
  LogFn log;
  TraceFn on_trace;
};

/// Runs every seed, sweep value, protocol and querying client. A failing seed
/// is logged in its record and the remaining seeds still run.
std::vector<RunRecord> run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Applies one sweep value to a copy of the config.
ExperimentConfig apply_sweep(const ExperimentConfig& config, const std::string& key, double value);

struct SummaryRow {
  std::vector<std::string> group;  // values of the group_by columns
  std::size_t seeds = 0;
  double avg_acc_mean = 0, avg_acc_std = 0;
  double query_acc_gain_mean = 0, query_acc_gain_std = 0;
  double forgetting_mean = 0, forgetting_std = 0;
  double uniform_acc_mean = 0, uniform_acc_std = 0;
};

/// Client rows are first averaged per (group, seed); mean and sample standard
/// deviation are then taken over seeds. An empty group_by yields one group.
std::vector<SummaryRow> summarize(const std::vector<MetricsReport>& reports,
                                  const std::vector<std::string>& group_by);
std::string summary_csv(const std::vector<SummaryRow>& rows, const std::vector<std::string>& group_by);
std::string summary_table(const std::vector<SummaryRow>& rows, const std::vector<std::string>& group_by);

std::vector<MetricsReport> read_results_csv(const std::filesystem::path& path);
std::string results_csv(const std::vector<RunRecord>& records);

}  // namespace qkt
