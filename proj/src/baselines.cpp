#include "qkt/baselines.hpp"

#include <stdexcept>
#include <string>

#include "qkt/rng.hpp"

namespace qkt {

void FedConfig::validate() const {
  if (rounds == 0) throw ConfigError("rounds must be >= 1");
  if (local_epochs == 0) throw ConfigError("local_epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
}

std::size_t FedConfig::effective_finetune_epochs() const {
  return finetune_epochs ? *finetune_epochs : 2 * local_epochs;
}

ModelParams weighted_average(std::span<const ModelParams> models, std::span<const double> weights) {
  if (models.empty()) throw std::invalid_argument("weighted_average: no models");
  if (models.size() != weights.size())
    throw std::invalid_argument("weighted_average: one weight per model required");
  ModelParams out = models[0];
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    out.layers[l].weights = weights[0] * models[0].layers[l].weights;
    out.layers[l].bias = weights[0] * models[0].layers[l].bias;
  }
  for (std::size_t i = 1; i < models.size(); ++i) {
    if (models[i].layers.size() != out.layers.size() ||
        models[i].split_index != out.split_index)
      throw ShapeError("weighted_average: architectures differ");
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
      const auto& src = models[i].layers[l];
      if (src.weights.rows() != out.layers[l].weights.rows() ||
          src.weights.cols() != out.layers[l].weights.cols())
        throw ShapeError("weighted_average: layer " + std::to_string(l) + " shapes differ");
      out.layers[l].weights += weights[i] * src.weights;
      out.layers[l].bias += weights[i] * src.bias;
    }
  }
  return out;
}

namespace {

std::vector<std::size_t> participant_indices(std::span<const ClientDataset> clients,
                                             const FedConfig& config) {
  std::vector<std::size_t> idx;
  if (config.participants.empty()) {
    for (std::size_t i = 0; i < clients.size(); ++i) idx.push_back(i);
    return idx;
  }
  for (int p : config.participants) {
    if (p < 0 || static_cast<std::size_t>(p) >= clients.size())
      throw std::out_of_range("participant " + std::to_string(p) + " is not a client");
    idx.push_back(static_cast<std::size_t>(p));
  }
  return idx;
}

double local_train(ModelParams& model, const Dataset& train, std::size_t epochs,
                   const FedConfig& config, std::uint64_t seed) {
  if (epochs == 0) return 0.0;
  const FreezeMask freeze = FreezeMask::trainable(model);
  AdamState adam = AdamState::for_model(model, config.adam);
  BatchLoss loss = [&](const ModelParams& m, std::span<const std::size_t> rows) {
    return supervised_loss_and_grads(m, train.batch(rows), freeze);
  };
  const auto history =
      train_epochs(model, train.size(), loss, adam, freeze, {epochs, config.batch_size}, seed);
  return history.back();
}

}  // namespace

FedResult fedavg(std::span<const ClientDataset> clients, std::span<const ModelParams> start,
                 const FedConfig& config, std::uint64_t seed) {
  if (clients.empty()) throw std::invalid_argument("fedavg: no clients");
  if (start.size() != 1 && start.size() != clients.size())
    throw std::invalid_argument("fedavg: need one common start model or one per client");
  if (config.rounds == 0) throw ConfigError("rounds must be >= 1");
  const auto idx = participant_indices(clients, config);

  std::vector<Dataset> train;
  std::vector<double> weights;
  double total = 0.0;
  for (std::size_t i : idx) {
    train.push_back(clients[i].train());
    if (train.back().size() == 0)
      throw DataError("client " + std::to_string(clients[i].client_id) + " has no training data");
    total += static_cast<double>(train.back().size());
  }
  for (const auto& d : train) weights.push_back(static_cast<double>(d.size()) / total);

  FedResult result;
  ModelParams global = start[0];
  for (std::size_t r = 0; r < config.rounds; ++r) {
    std::vector<ModelParams> updates;
    double round_loss = 0.0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      ModelParams m = (r == 0 && start.size() > 1) ? start[idx[k]] : global;
      round_loss += weights[k] * local_train(m, train[k], config.local_epochs, config,
                                             derive_seed(seed, Stream::federated, {r, idx[k]}));
      updates.push_back(std::move(m));
    }
    global = weighted_average(updates, weights);
    result.round_losses.push_back(round_loss);
  }
  result.global = std::move(global);
  result.comm_rounds = static_cast<int>(config.rounds);
  return result;
}

FedResult fedavg1(std::span<const ClientDataset> clients, std::span<const ModelParams> start,
                  const FedConfig& config, std::uint64_t seed) {
  FedConfig one = config;
  one.rounds = 1;
  return fedavg(clients, start, one, seed);
}

FineTunedResult ft_fedavg(std::span<const ClientDataset> clients,
                          std::span<const ModelParams> start, const FedConfig& config,
                          std::uint64_t seed) {
  FineTunedResult out;
  out.fed = fedavg(clients, start, config, seed);
  const std::size_t epochs = config.effective_finetune_epochs();
  for (std::size_t i = 0; i < clients.size(); ++i) {
    ModelParams m = out.fed.global;
    const Dataset train = clients[i].train();
    if (train.size() > 0)
      local_train(m, train, epochs, config,
                  derive_seed(seed, Stream::federated, {config.rounds, i, 1}));
    out.client_models.push_back(std::move(m));
  }
  return out;
}

Matrix ensemble_predict(std::span<const ModelParams> models, const Matrix& x) {
  if (models.empty()) throw std::invalid_argument("ensemble_predict: empty model list");
  Matrix sum = forward(models[0], x).probs;
  for (std::size_t i = 1; i < models.size(); ++i) sum += forward(models[i], x).probs;
  return sum / static_cast<double>(models.size());
}

std::vector<int> ensemble_classify(std::span<const ModelParams> models, const Matrix& x) {
  const Matrix p = ensemble_predict(models, x);
  std::vector<int> out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    Eigen::Index arg = 0;
    p.row(r).maxCoeff(&arg);
    out[static_cast<std::size_t>(r)] = static_cast<int>(arg);
  }
  return out;
}

}  // namespace qkt
