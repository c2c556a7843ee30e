#pragma once

// Federated and ensemble comparators.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "qkt/data.hpp"
#include "qkt/nn.hpp"

namespace qkt {

struct FedConfig {
  std::size_t rounds = 30;                     // R
  std::size_t local_epochs = 2;                // E_local
  std::optional<std::size_t> finetune_epochs;  // FT-FedAvg, defaults to 2 * E_local
  std::vector<int> participants;               // empty = every client
  std::size_t batch_size = 32;
  AdamConfig adam{};

  /// Rejects R = 0 and E_local = 0. fedavg() itself accepts E_local = 0.
  void validate() const;
  std::size_t effective_finetune_epochs() const;
};

struct FedResult {
  ModelParams global;
  std::vector<double> round_losses;  // size-weighted mean client loss per round
  int comm_rounds = 0;
};

/// Parameter-wise sum of weights[i] * models[i]. Weights are used as given.
ModelParams weighted_average(std::span<const ModelParams> models, std::span<const double> weights);

/// R rounds of: every participant trains E_local epochs from the current global
/// model with a fresh Adam state, then the server averages by train-split size.
/// `start` holds either one common initial model or one model per client; in the
/// latter case round 1 starts each client from its own model.
FedResult fedavg(std::span<const ClientDataset> clients, std::span<const ModelParams> start,
                 const FedConfig& config, std::uint64_t seed);

/// FedAvg restricted to a single round.
FedResult fedavg1(std::span<const ClientDataset> clients, std::span<const ModelParams> start,
                  const FedConfig& config, std::uint64_t seed);

struct FineTunedResult {
  FedResult fed;
  std::vector<ModelParams> client_models;  // indexed like `clients`
};

/// FedAvg followed by per-client fine-tuning of the global model.
FineTunedResult ft_fedavg(std::span<const ClientDataset> clients,
                          std::span<const ModelParams> start, const FedConfig& config,
                          std::uint64_t seed);

/// Mean softmax output of `models`, one row per input.
Matrix ensemble_predict(std::span<const ModelParams> models, const Matrix& x);
std::vector<int> ensemble_classify(std::span<const ModelParams> models, const Matrix& x);

}  // namespace qkt
