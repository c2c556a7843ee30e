#include "qkt/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "qkt/rng.hpp"

namespace qkt {

namespace {

std::string dims_str(std::size_t a, std::size_t b) {
  return std::to_string(a) + "x" + std::to_string(b);
}

template <typename Fn>
std::vector<LayerTensors> shaped_like(const ModelParams& model, Fn fill) {
  std::vector<LayerTensors> out;
  out.reserve(model.layers.size());
  for (const auto& l : model.layers) {
    LayerTensors t;
    t.weights = Matrix::Constant(l.weights.rows(), l.weights.cols(), fill);
    t.bias = Vector::Constant(l.bias.size(), fill);
    out.push_back(std::move(t));
  }
  return out;
}

bool same_shape(const LayerTensors& a, const LayerTensors& b) {
  return a.weights.rows() == b.weights.rows() && a.weights.cols() == b.weights.cols() &&
         a.bias.size() == b.bias.size();
}

void check_tensor_shapes(const std::vector<LayerTensors>& t, const ModelParams& model,
                         const char* what) {
  if (t.size() != model.layers.size())
    throw ShapeError(std::string(what) + ": layer count mismatch");
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!same_shape(t[i], model.layers[i]))
      throw ShapeError(std::string(what) + ": shape mismatch at layer " + std::to_string(i));
}

}  // namespace

std::size_t ModelParams::input_dim() const {
  if (layers.empty()) throw ShapeError("model has no layers");
  return layers.front().in_dim();
}

std::size_t ModelParams::num_classes() const {
  if (layers.empty()) throw ShapeError("model has no layers");
  return layers.back().out_dim();
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.size();
  return n;
}

void ModelParams::validate() const {
  if (layers.empty()) throw ShapeError("model has no layers");
  if (split_index >= layers.size())
    throw ShapeError("split_index " + std::to_string(split_index) + " out of range for " +
                     std::to_string(layers.size()) + " layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (static_cast<std::size_t>(l.bias.size()) != l.out_dim())
      throw ShapeError("layer " + std::to_string(i) + ": bias length " +
                       std::to_string(l.bias.size()) + " != out dim " +
                       std::to_string(l.out_dim()));
    if (l.out_dim() == 0 || l.in_dim() == 0)
      throw ShapeError("layer " + std::to_string(i) + " has an empty dimension");
    if (i + 1 < layers.size() && layers[i + 1].in_dim() != l.out_dim())
      throw ShapeError("layers " + std::to_string(i) + " and " + std::to_string(i + 1) +
                       " do not compose: " + dims_str(l.out_dim(), l.in_dim()) + " then " +
                       dims_str(layers[i + 1].out_dim(), layers[i + 1].in_dim()));
  }
}

Gradients Gradients::zeros_like(const ModelParams& model) {
  return Gradients{shaped_like(model, 0.0)};
}

double Gradients::max_abs() const {
  double m = 0.0;
  for (const auto& l : layers) {
    if (l.weights.size() > 0) m = std::max(m, l.weights.cwiseAbs().maxCoeff());
    if (l.bias.size() > 0) m = std::max(m, l.bias.cwiseAbs().maxCoeff());
  }
  return m;
}

FreezeMask FreezeMask::trainable(const ModelParams& model) {
  return FreezeMask{shaped_like(model, 1.0)};
}

FreezeMask FreezeMask::frozen(const ModelParams& model) {
  return FreezeMask{shaped_like(model, 0.0)};
}

FreezeMask FreezeMask::head_only(const ModelParams& model) {
  FreezeMask m = trainable(model);
  for (std::size_t i = 0; i < model.split_index; ++i) {
    m.layers[i].weights.setZero();
    m.layers[i].bias.setZero();
  }
  return m;
}

void FreezeMask::check_shape(const ModelParams& model) const {
  check_tensor_shapes(layers, model, "freeze mask");
}

std::size_t FreezeMask::trainable_count() const {
  std::size_t n = 0;
  for (const auto& l : layers)
    n += static_cast<std::size_t>((l.weights.array() != 0.0).count() +
                                  (l.bias.array() != 0.0).count());
  return n;
}

ModelParams make_mlp(std::size_t input_dim, std::span<const std::size_t> hidden,
                     std::size_t num_classes, std::uint64_t seed) {
  if (input_dim == 0 || num_classes == 0) throw ShapeError("input_dim and num_classes must be > 0");
  Rng rng(derive_seed(seed, Stream::init));
  ModelParams model;
  std::size_t fan_in = input_dim;
  auto add_layer = [&](std::size_t out) {
    if (out == 0) throw ShapeError("hidden width must be > 0");
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    LayerTensors l;
    l.weights.resize(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(fan_in));
    for (Eigen::Index k = 0; k < l.weights.size(); ++k) l.weights.data()[k] = dist(rng);
    l.bias = Vector::Zero(static_cast<Eigen::Index>(out));
    model.layers.push_back(std::move(l));
    fan_in = out;
  };
  for (auto h : hidden) add_layer(h);
  add_layer(num_classes);
  model.split_index = model.layers.size() - 1;
  return model;
}

Matrix log_softmax_rows(const Matrix& logits, double temperature) {
  Matrix z = logits / temperature;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    z.row(r).array() -= lse;
  }
  return z;
}

Matrix softmax_rows(const Matrix& logits, double temperature) {
  Matrix p = logits / temperature;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double m = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - m).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

ForwardCache forward_cached(const ModelParams& model, const Matrix& x) {
  if (model.layers.empty()) throw ShapeError("model has no layers");
  if (static_cast<std::size_t>(x.cols()) != model.input_dim())
    throw ShapeError("input has " + std::to_string(x.cols()) + " columns, model expects " +
                     std::to_string(model.input_dim()));
  ForwardCache cache;
  cache.layer_inputs.reserve(model.layers.size());
  cache.layer_inputs.push_back(x);
  const std::size_t last = model.layers.size() - 1;
  for (std::size_t i = 0; i <= last; ++i) {
    const auto& l = model.layers[i];
    Matrix z = cache.layer_inputs.back() * l.weights.transpose();
    z.rowwise() += l.bias.transpose();
    if (!z.allFinite())
      throw NumericalError("non-finite activation in layer " + std::to_string(i), i);
    if (i == last) {
      cache.logits = std::move(z);
    } else {
      cache.layer_inputs.push_back(z.cwiseMax(0.0));
    }
  }
  return cache;
}

ForwardResult forward(const ModelParams& model, const Matrix& x, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  ForwardCache cache = forward_cached(model, x);
  ForwardResult out;
  out.features = std::move(cache.layer_inputs[model.split_index]);
  out.probs = softmax_rows(cache.logits, temperature);
  out.logits = std::move(cache.logits);
  return out;
}

std::vector<int> predict(const ModelParams& model, const Matrix& x) {
  ForwardCache cache = forward_cached(model, x);
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < cache.logits.rows(); ++r) {
    Eigen::Index arg = 0;
    cache.logits.row(r).maxCoeff(&arg);
    out[static_cast<std::size_t>(r)] = static_cast<int>(arg);
  }
  return out;
}

Gradients backward(const ModelParams& model, const ForwardCache& cache, const Matrix& dlogits,
                   const FreezeMask& freeze) {
  freeze.check_shape(model);
  Gradients g = Gradients::zeros_like(model);

  // Nothing below the lowest trainable layer needs a gradient.
  std::size_t lowest = model.layers.size();
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (freeze.layers[i].weights.any() || freeze.layers[i].bias.any()) {
      lowest = i;
      break;
    }
  }
  if (lowest == model.layers.size()) return g;

  Matrix delta = dlogits;
  for (std::size_t i = model.layers.size(); i-- > lowest;) {
    const Matrix& in = cache.layer_inputs[i];
    g.layers[i].weights = (delta.transpose() * in).cwiseProduct(freeze.layers[i].weights);
    g.layers[i].bias = delta.colwise().sum().transpose().cwiseProduct(freeze.layers[i].bias);
    if (i > lowest) {
      Matrix back = delta * model.layers[i].weights;
      delta = (in.array() > 0.0).select(back, 0.0);
    }
  }
  return g;
}

LossAndGrads supervised_loss_and_grads(const ModelParams& model, const Batch& batch,
                                       const FreezeMask& freeze) {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("empty batch");
  if (batch.labels.size() != n) throw ShapeError("label count does not match input rows");
  const auto classes = static_cast<int>(model.num_classes());
  ForwardCache cache = forward_cached(model, batch.inputs);
  Matrix logp = log_softmax_rows(cache.logits);
  Matrix dlogits = logp.array().exp().matrix();
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = batch.labels[r];
    if (y < 0 || y >= classes)
      throw std::out_of_range("label " + std::to_string(y) + " outside [0, " +
                              std::to_string(classes) + ")");
    loss -= logp(static_cast<Eigen::Index>(r), y);
    dlogits(static_cast<Eigen::Index>(r), y) -= 1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  dlogits *= inv_n;
  return {loss * inv_n, backward(model, cache, dlogits, freeze)};
}

AdamState AdamState::for_model(const ModelParams& model, AdamConfig config) {
  AdamState s;
  s.config = config;
  s.first_moment = Gradients::zeros_like(model);
  s.second_moment = Gradients::zeros_like(model);
  return s;
}

namespace {

void adam_update(double* w, const double* g, double* m, double* v, const double* mask,
                 Eigen::Index n, const AdamConfig& c, double bc1, double bc2) {
  for (Eigen::Index k = 0; k < n; ++k) {
    if (mask[k] == 0.0) continue;
    const double grad = g[k] + c.weight_decay * w[k];
    m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * grad;
    v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * grad * grad;
    const double mhat = m[k] / bc1;
    const double vhat = v[k] / bc2;
    w[k] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
  }
}

}  // namespace

void adam_step(ModelParams& model, const Gradients& grads, AdamState& state,
               const FreezeMask& freeze) {
  check_tensor_shapes(grads.layers, model, "gradients");
  check_tensor_shapes(state.first_moment.layers, model, "adam first moment");
  check_tensor_shapes(state.second_moment.layers, model, "adam second moment");
  freeze.check_shape(model);
  ++state.step_count;
  const auto t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.config.beta1, t);
  const double bc2 = 1.0 - std::pow(state.config.beta2, t);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto& l = model.layers[i];
    adam_update(l.weights.data(), grads.layers[i].weights.data(),
                state.first_moment.layers[i].weights.data(),
                state.second_moment.layers[i].weights.data(), freeze.layers[i].weights.data(),
                l.weights.size(), state.config, bc1, bc2);
    adam_update(l.bias.data(), grads.layers[i].bias.data(),
                state.first_moment.layers[i].bias.data(),
                state.second_moment.layers[i].bias.data(), freeze.layers[i].bias.data(),
                l.bias.size(), state.config, bc1, bc2);
  }
}

double gradient_check(const ModelParams& model, const LossFn& loss, double step) {
  const LossAndGrads analytic = loss(model);
  ModelParams probe = model;
  double worst = 0.0;
  auto check = [&](double* p, const double* a, Eigen::Index n) {
    for (Eigen::Index k = 0; k < n; ++k) {
      const double saved = p[k];
      p[k] = saved + step;
      const double up = loss(probe).loss;
      p[k] = saved - step;
      const double down = loss(probe).loss;
      p[k] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double denom = std::max({std::abs(a[k]), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(a[k] - numeric) / denom);
    }
  };
  for (std::size_t i = 0; i < probe.layers.size(); ++i) {
    check(probe.layers[i].weights.data(), analytic.grads.layers[i].weights.data(),
          probe.layers[i].weights.size());
    check(probe.layers[i].bias.data(), analytic.grads.layers[i].bias.data(),
          probe.layers[i].bias.size());
  }
  return worst;
}

double gradient_check(const ModelParams& model, const Batch& batch, double step) {
  const FreezeMask all = FreezeMask::trainable(model);
  return gradient_check(
      model, [&](const ModelParams& m) { return supervised_loss_and_grads(m, batch, all); },
      step);
}

HeadParams extract_head(const ModelParams& model) {
  model.validate();
  return HeadParams(model.layers.begin() + static_cast<std::ptrdiff_t>(model.split_index),
                    model.layers.end());
}

ModelParams replace_head(ModelParams model, const HeadParams& head) {
  model.validate();
  const std::size_t expected = model.layers.size() - model.split_index;
  if (head.size() != expected)
    throw ShapeError("head has " + std::to_string(head.size()) + " layers, model head has " +
                     std::to_string(expected));
  for (std::size_t k = 0; k < head.size(); ++k)
    if (!same_shape(head[k], model.layers[model.split_index + k]))
      throw ShapeError("head layer " + std::to_string(k) + " shape mismatch");
  std::copy(head.begin(), head.end(),
            model.layers.begin() + static_cast<std::ptrdiff_t>(model.split_index));
  return model;
}

std::vector<double> train_epochs(ModelParams& model, std::size_t num_samples,
                                 const BatchLoss& loss, AdamState& adam,
                                 const FreezeMask& freeze, const TrainOptions& options,
                                 std::uint64_t seed, const EpochCallback& on_epoch) {
  std::vector<double> history;
  if (options.epochs == 0) return history;
  if (num_samples == 0) throw std::invalid_argument("cannot train on an empty dataset");
  if (options.batch_size == 0) throw std::invalid_argument("batch_size must be > 0");
  Rng rng(seed);
  std::vector<std::size_t> order(num_samples);
  for (std::size_t e = 0; e < options.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < num_samples; start += options.batch_size) {
      const std::size_t len = std::min(options.batch_size, num_samples - start);
      std::span<const std::size_t> rows(order.data() + start, len);
      LossAndGrads lg = loss(model, rows);
      total += lg.loss * static_cast<double>(len);
      adam_step(model, lg.grads, adam, freeze);
    }
    const double mean = total / static_cast<double>(num_samples);
    history.push_back(mean);
    if (on_epoch && !on_epoch(e, model, mean)) break;
  }
  return history;
}

bool bitwise_equal(const LayerTensors& a, const LayerTensors& b) {
  if (!same_shape(a, b)) return false;
  return std::memcmp(a.weights.data(), b.weights.data(),
                     sizeof(double) * static_cast<std::size_t>(a.weights.size())) == 0 &&
         std::memcmp(a.bias.data(), b.bias.data(),
                     sizeof(double) * static_cast<std::size_t>(a.bias.size())) == 0;
}

bool bitwise_equal(const ModelParams& a, const ModelParams& b) {
  if (a.split_index != b.split_index || a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    if (!bitwise_equal(a.layers[i], b.layers[i])) return false;
  return true;
}

}  // namespace qkt
