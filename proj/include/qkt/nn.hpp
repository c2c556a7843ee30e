#pragma once

// Dense ReLU classifier with hand-derived gradients.
//
// A model f = h o g is a stack of dense layers. Layers before `split_index`
// form the feature extractor g; layers at and after it form the
// classification head h. Every layer except the last is followed by ReLU.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace qkt {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::size_t layer)
      : std::runtime_error(what), layer_(layer) {}
  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

/// Weights are stored out_dim x in_dim.
struct LayerTensors {
  Matrix weights;
  Vector bias;

  std::size_t in_dim() const { return static_cast<std::size_t>(weights.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weights.rows()); }
  std::size_t size() const { return static_cast<std::size_t>(weights.size() + bias.size()); }
};

struct ModelParams {
  std::vector<LayerTensors> layers;
  std::size_t split_index = 0;

  std::size_t num_layers() const { return layers.size(); }
  std::size_t input_dim() const;
  std::size_t num_classes() const;
  std::size_t parameter_count() const;

  /// Throws ShapeError if adjacent layers do not compose or split_index is out of range.
  void validate() const;
};

/// The classification head: layers [split_index, num_layers).
using HeadParams = std::vector<LayerTensors>;

struct Gradients {
  std::vector<LayerTensors> layers;

  static Gradients zeros_like(const ModelParams& model);
  double max_abs() const;
};

/// Per-parameter trainability flags, 1.0 = trainable and 0.0 = frozen.
struct FreezeMask {
  std::vector<LayerTensors> layers;

  static FreezeMask trainable(const ModelParams& model);
  static FreezeMask frozen(const ModelParams& model);
  /// Extractor frozen, head trainable.
  static FreezeMask head_only(const ModelParams& model);

  void check_shape(const ModelParams& model) const;
  std::size_t trainable_count() const;
};

struct Batch {
  Matrix inputs;
  std::vector<int> labels;

  std::size_t size() const { return static_cast<std::size_t>(inputs.rows()); }
};

struct ForwardResult {
  Matrix features;  // activations entering layer split_index
  Matrix logits;
  Matrix probs;     // softmax(logits / temperature)
};

struct ForwardCache {
  std::vector<Matrix> layer_inputs;  // layer_inputs[i] is the input to layer i
  Matrix logits;
};

struct LossAndGrads {
  double loss = 0.0;
  Gradients grads;
};

/// He-uniform weights, zero biases, head = final linear layer.
ModelParams make_mlp(std::size_t input_dim, std::span<const std::size_t> hidden,
                     std::size_t num_classes, std::uint64_t seed);

Matrix softmax_rows(const Matrix& logits, double temperature = 1.0);
Matrix log_softmax_rows(const Matrix& logits, double temperature = 1.0);

ForwardCache forward_cached(const ModelParams& model, const Matrix& x);
ForwardResult forward(const ModelParams& model, const Matrix& x, double temperature = 1.0);
std::vector<int> predict(const ModelParams& model, const Matrix& x);

/// Backpropagates dL/dlogits through the network. Frozen entries come back as exact zeros.
Gradients backward(const ModelParams& model, const ForwardCache& cache, const Matrix& dlogits,
                   const FreezeMask& freeze);

/// Mean cross-entropy over the batch.
LossAndGrads supervised_loss_and_grads(const ModelParams& model, const Batch& batch,
                                       const FreezeMask& freeze);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 4e-4;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step_count = 0;
  Gradients first_moment;
  Gradients second_moment;

  static AdamState for_model(const ModelParams& model, AdamConfig config = {});
};

/// Weight decay enters as an additive L2 term on the gradient. Frozen entries
/// are skipped entirely, moments included.
void adam_step(ModelParams& model, const Gradients& grads, AdamState& state,
               const FreezeMask& freeze);

using LossFn = std::function<LossAndGrads(const ModelParams&)>;

/// Max relative error between analytic and central-difference gradients.
/// Relative error is |a - n| / max(|a|, |n|, 1e-6).
double gradient_check(const ModelParams& model, const LossFn& loss, double step = 1e-5);
double gradient_check(const ModelParams& model, const Batch& batch, double step = 1e-5);

HeadParams extract_head(const ModelParams& model);
ModelParams replace_head(ModelParams model, const HeadParams& head);

// Training loop shared by local pretraining, distillation phases and FedAvg clients.

using BatchLoss =
    std::function<LossAndGrads(const ModelParams&, std::span<const std::size_t> rows)>;
/// Called after every epoch with (epoch index, model, mean epoch loss). Return false to stop.
using EpochCallback = std::function<bool(std::size_t, const ModelParams&, double)>;

struct TrainOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
};

/// Runs minibatch Adam over `num_samples` rows in a fresh shuffled order every
/// epoch. Returns the mean loss of each completed epoch.
std::vector<double> train_epochs(ModelParams& model, std::size_t num_samples,
                                 const BatchLoss& loss, AdamState& adam,
                                 const FreezeMask& freeze, const TrainOptions& options,
                                 std::uint64_t seed, const EpochCallback& on_epoch = {});

/// True when every parameter is bitwise identical.
bool bitwise_equal(const ModelParams& a, const ModelParams& b);
bool bitwise_equal(const LayerTensors& a, const LayerTensors& b);

}  // namespace qkt
