#pragma once

#include <random>
#include <vector>

#include "qkt/nn.hpp"
#include "qkt/rng.hpp"
#include "qkt/transfer.hpp"

namespace qkt::testing {

inline Batch random_batch(std::size_t n, std::size_t dims, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> label(0, static_cast<int>(classes) - 1);
  Batch b;
  b.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dims));
  for (Eigen::Index k = 0; k < b.inputs.size(); ++k) b.inputs.data()[k] = normal(rng);
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(label(rng));
  return b;
}

/// Random rows on the probability simplex.
inline Matrix random_probs(std::size_t n, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.5);
  Matrix logits(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(classes));
  for (Eigen::Index k = 0; k < logits.size(); ++k) logits.data()[k] = normal(rng);
  return softmax_rows(logits);
}

inline ModelParams small_mlp(std::size_t dims, std::size_t classes, std::uint64_t seed,
                             std::vector<std::size_t> hidden = {8, 6}) {
  return make_mlp(dims, hidden, classes, seed);
}

inline TeacherMask random_mask(std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> pick(0, 2);
  TeacherMask m;
  m.selected = true;
  for (std::size_t j = 0; j < classes; ++j) {
    const int v = pick(rng);
    m.weights.push_back(v == 0 ? 0.0 : v == 1 ? 1.0 : 1.5);
  }
  return m;
}

}  // namespace qkt::testing

#include "qkt/harness.hpp"

namespace qkt::testing {

/// A small network that pretrains in well under a second.
inline ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.dataset.synthetic.num_classes = 4;
  c.dataset.synthetic.dims = 4;
  c.dataset.synthetic.train_per_class = 200;
  c.dataset.synthetic.test_per_class = 40;
  c.partition.num_clients = 4;
  c.partition.classes_per_client = 2;
  c.hidden = {16, 8};
  c.local.max_epochs = 40;
  c.local.patience = 5;
  c.local.adam.learning_rate = 1e-2;
  c.protocols.push_back({"qkt", MethodKind::transfer, {}, {}});
  c.protocols.back().transfer.epochs = 3;
  c.write_instrumentation = false;
  c.save_checkpoints = false;
  return c;
}

}  // namespace qkt::testing
