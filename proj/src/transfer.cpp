#include "qkt/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "qkt/metrics.hpp"
#include "qkt/rng.hpp"

namespace qkt {

namespace {

// log p_s is floored here so saturated students never produce -inf.
const double kLogFloor = std::log(1e-12);

enum class KdMode { none, naive, masked_kl, masked_ce };

LossAndGrads distill_loss(const ModelParams& student, std::span<const Matrix> teacher_probs,
                          std::span<const TeacherMask> masks, const Batch& batch,
                          double alpha_kd, double temperature, const FreezeMask& freeze,
                          KdMode mode) {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("empty batch");
  if (batch.labels.size() != n) throw ShapeError("label count does not match input rows");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  const auto C = static_cast<Eigen::Index>(student.num_classes());
  for (const auto& P : teacher_probs)
    if (P.rows() != static_cast<Eigen::Index>(n) || P.cols() != C)
      throw ShapeError("teacher probabilities do not match batch shape");
  if ((mode == KdMode::masked_kl || mode == KdMode::masked_ce) &&
      masks.size() != teacher_probs.size())
    throw ShapeError("need exactly one mask per teacher");
  for (const auto& m : masks)
    if (static_cast<Eigen::Index>(m.weights.size()) != C) throw ShapeError("mask length != C");

  ForwardCache cache = forward_cached(student, batch.inputs);
  const Matrix logp1 = log_softmax_rows(cache.logits);
  Matrix dlogits = logp1.array().exp().matrix();
  double ce = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = batch.labels[r];
    if (y < 0 || y >= C) throw std::out_of_range("label " + std::to_string(y) + " out of range");
    ce -= logp1(static_cast<Eigen::Index>(r), y);
    dlogits(static_cast<Eigen::Index>(r), y) -= 1.0;
  }

  double kd = 0.0;
  if (mode != KdMode::none && !teacher_probs.empty()) {
    const Matrix logpT = temperature == 1.0 ? logp1 : log_softmax_rows(cache.logits, temperature);
    const Matrix pT = logpT.array().exp().matrix();
    const double scale = alpha_kd / temperature;
    for (std::size_t t = 0; t < teacher_probs.size(); ++t) {
      const Matrix& P = teacher_probs[t];
      const double* m = mode == KdMode::naive ? nullptr : masks[t].weights.data();
      for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(n); ++r) {
        switch (mode) {
          case KdMode::naive:
            for (Eigen::Index j = 0; j < C; ++j) {
              const double pt = P(r, j);
              if (pt > 0.0) kd += pt * (std::log(pt) - std::max(logpT(r, j), kLogFloor));
              dlogits(r, j) += scale * (pT(r, j) - pt);
            }
            break;
          case KdMode::masked_kl: {
            double mass = 0.0;
            for (Eigen::Index j = 0; j < C; ++j) {
              const double w = m[j] * P(r, j);
              mass += w;
              if (w > 0.0) kd += w * (std::log(P(r, j)) - std::max(logpT(r, j), kLogFloor));
            }
            // d/dz_k of -sum_j w_j log p_j = -w_k + p_k * sum_j w_j
            for (Eigen::Index j = 0; j < C; ++j)
              dlogits(r, j) += scale * (pT(r, j) * mass - m[j] * P(r, j));
            break;
          }
          case KdMode::masked_ce: {
            // dL/dp_j = -w_j / p_j, pushed through the softmax Jacobian diag(p) - p p^T.
            Eigen::RowVectorXd pg(C);
            for (Eigen::Index j = 0; j < C; ++j) {
              const double w = m[j] * P(r, j);
              kd -= w * std::max(logpT(r, j), kLogFloor);
              const double p = pT(r, j);
              pg(j) = p > 0.0 ? p * (-w / p) : -w;
            }
            const double dot = pg.sum();
            for (Eigen::Index j = 0; j < C; ++j)
              dlogits(r, j) += scale * (pg(j) - pT(r, j) * dot);
            break;
          }
          case KdMode::none:
            break;
        }
      }
    }
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  const double loss = (ce + alpha_kd * kd) * inv_n;
  if (!std::isfinite(loss))
    throw NumericalError("non-finite distillation loss", student.num_layers());
  dlogits *= inv_n;
  return {loss, backward(student, cache, dlogits, freeze)};
}

std::vector<Matrix> teacher_outputs(std::span<const ModelParams> teachers, const Matrix& x,
                                    double temperature) {
  std::vector<Matrix> out;
  out.reserve(teachers.size());
  for (const auto& t : teachers) out.push_back(forward(t, x, temperature).probs);
  return out;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k)
    out.row(static_cast<Eigen::Index>(k)) = m.row(static_cast<Eigen::Index>(rows[k]));
  return out;
}

struct PhaseOutcome {
  ModelParams model;
  std::vector<double> losses;
  std::size_t epochs_kept = 0;
};

// Trains against `set` on the student's training split. With a selector, the
// returned model is the best-scoring epoch (epoch 0 = the starting point).
PhaseOutcome train_phase(ModelParams model, const DistillationSet& set,
                         const TransferConfig& config, const Dataset& train, std::size_t epochs,
                         const FreezeMask& freeze, std::uint64_t seed,
                         const EpochSelector* selector) {
  const std::vector<Matrix> targets = teacher_outputs(set.teachers, train.features, config.temperature);
  const KdMode mode = set.masked() ? KdMode::masked_kl : KdMode::naive;
  BatchLoss loss = [&](const ModelParams& m, std::span<const std::size_t> rows) {
    const Batch b = train.batch(rows);
    std::vector<Matrix> tp;
    tp.reserve(targets.size());
    for (const auto& t : targets) tp.push_back(gather_rows(t, rows));
    return distill_loss(m, tp, set.masks, b, config.alpha_kd, config.temperature, freeze, mode);
  };

  PhaseOutcome out;
  out.epochs_kept = epochs;
  std::optional<ModelParams> best;
  double best_score = -1.0;
  EpochCallback on_epoch;
  if (selector) {
    auto score = [&](const ModelParams& m) {
      return average_accuracy(per_class_accuracy(m, selector->validation), selector->local_counts,
                              selector->query_classes);
    };
    best = model;
    best_score = score(model);
    out.epochs_kept = 0;
    on_epoch = [&](std::size_t e, const ModelParams& m, double) {
      const double s = score(m);
      if (s > best_score) {
        best_score = s;
        best = m;
        out.epochs_kept = e + 1;
      }
      return true;
    };
  }
  AdamState adam = AdamState::for_model(model, config.adam);
  out.losses = train_epochs(model, train.size(), loss, adam, freeze,
                            TrainOptions{epochs, config.batch_size}, seed, on_epoch);
  out.model = selector ? std::move(*best) : std::move(model);
  return out;
}

void record_epochs(TransferTrace* trace, int phase, const std::vector<double>& losses) {
  if (!trace) return;
  for (std::size_t e = 0; e < losses.size(); ++e) trace->epochs.push_back({phase, e, losses[e]});
}

}  // namespace

void TransferConfig::validate() const {
  if (!(tau >= 0.0 && tau < 1.0)) throw ConfigError("tau must lie in [0, 1)");
  if (!(lambda > 0.0)) throw ConfigError("lambda must be > 0");
  if (!(alpha_kd >= 0.0)) throw ConfigError("alpha_kd must be >= 0");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (noise_batch == 0) throw ConfigError("noise batch B must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (selective_mask_z && !(*selective_mask_z >= 0.0 && *selective_mask_z <= 100.0))
    throw ConfigError("selective_mask_z must lie in [0, 100]");
  if (protocol == Protocol::qkt_light && light_variant != LightVariant::local)
    throw ConfigError(
        "only the per-client local light variant is supported; central_server and volunteer "
        "coordination are not implemented");
}

std::size_t TransferConfig::effective_phase2_epochs() const {
  if (phase2_epochs) return *phase2_epochs;
  return protocol == Protocol::qkt_light ? 5 : epochs;
}

TeacherProbe probe_teacher(const ModelParams& teacher, std::size_t noise_batch,
                           std::size_t input_dim, std::uint64_t seed, int teacher_id) {
  if (noise_batch == 0) throw std::invalid_argument("noise batch must be >= 1");
  if (input_dim != teacher.input_dim())
    throw ShapeError("probe input_dim " + std::to_string(input_dim) + " != teacher input_dim " +
                     std::to_string(teacher.input_dim()));
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix noise(static_cast<Eigen::Index>(noise_batch), static_cast<Eigen::Index>(input_dim));
  for (Eigen::Index k = 0; k < noise.size(); ++k) noise.data()[k] = normal(rng);
  const Matrix probs = forward(teacher, noise).probs;
  const Eigen::RowVectorXd mean = probs.colwise().mean();
  TeacherProbe p;
  p.teacher_id = teacher_id;
  p.avg_probs.assign(mean.data(), mean.data() + mean.size());
  p.noise_batch = noise_batch;
  p.seed = seed;
  return p;
}

double probe_mse(const TeacherProbe& probe, std::span<const double> actual) {
  return probe_mse(std::span<const double>(probe.avg_probs), actual);
}

std::vector<int> select_teachers(std::span<const TeacherProbe> probes,
                                 std::span<const int> query, double tau) {
  std::vector<int> selected;
  for (const auto& p : probes) {
    const bool relevant = std::any_of(query.begin(), query.end(), [&](int q) {
      return p.avg_probs.at(static_cast<std::size_t>(q)) >= tau;
    });
    if (relevant) selected.push_back(p.teacher_id);
  }
  if (selected.empty())
    throw NoCompetentTeacherError("no competent teacher: no probe reaches tau=" +
                                  std::to_string(tau) + " on any query class");
  return selected;
}

TeacherMask build_mask(int teacher_id, std::span<const int> query,
                       std::span<const int> student_local_classes, double lambda,
                       std::size_t num_classes) {
  TeacherMask m;
  m.teacher_id = teacher_id;
  m.selected = true;
  m.weights.assign(num_classes, 0.0);
  for (int j : student_local_classes) m.weights.at(static_cast<std::size_t>(j)) = 1.0;
  for (int q : query) m.weights.at(static_cast<std::size_t>(q)) = lambda;  // query wins
  return m;
}

LossAndGrads qkd_loss_from_targets(const ModelParams& student,
                                   std::span<const Matrix> teacher_probs,
                                   std::span<const TeacherMask> masks, const Batch& batch,
                                   double alpha_kd, double temperature, const FreezeMask& freeze,
                                   DivergenceForm form) {
  if (teacher_probs.empty())
    throw NoCompetentTeacherError("masked distillation needs a non-empty teacher set");
  return distill_loss(student, teacher_probs, masks, batch, alpha_kd, temperature, freeze,
                      form == DivergenceForm::kl ? KdMode::masked_kl : KdMode::masked_ce);
}

LossAndGrads naive_kd_loss_from_targets(const ModelParams& student,
                                        std::span<const Matrix> teacher_probs,
                                        const Batch& batch, double alpha_kd, double temperature,
                                        const FreezeMask& freeze) {
  return distill_loss(student, teacher_probs, {}, batch, alpha_kd, temperature, freeze,
                      KdMode::naive);
}

LossAndGrads qkd_loss_and_grads(const ModelParams& student, std::span<const ModelParams> teachers,
                                std::span<const TeacherMask> masks, const Batch& batch,
                                double alpha_kd, double temperature, const FreezeMask& freeze,
                                DivergenceForm form) {
  const auto targets = teacher_outputs(teachers, batch.inputs, temperature);
  return qkd_loss_from_targets(student, targets, masks, batch, alpha_kd, temperature, freeze, form);
}

LossAndGrads naive_kd_loss_and_grads(const ModelParams& student,
                                     std::span<const ModelParams> teachers, const Batch& batch,
                                     double alpha_kd, double temperature,
                                     const FreezeMask& freeze) {
  const auto targets = teacher_outputs(teachers, batch.inputs, temperature);
  return naive_kd_loss_from_targets(student, targets, batch, alpha_kd, temperature, freeze);
}

Phase1Result run_phase1(ModelParams student, const DistillationSet& set,
                        const TransferConfig& config, const ClientDataset& student_data,
                        std::uint64_t seed, TransferTrace* trace, const EpochSelector* selector) {
  Phase1Result r;
  r.saved_head = extract_head(student);
  const Dataset train = student_data.train();
  const FreezeMask all = FreezeMask::trainable(student);
  PhaseOutcome out = train_phase(std::move(student), set, config, train, config.epochs, all,
                                 derive_seed(seed, Stream::transfer, {1}), selector);
  r.student = std::move(out.model);
  r.epoch_losses = std::move(out.losses);
  if (trace) {
    trace->phase1_teachers = set.teacher_ids;
    trace->phase1_masked = set.masked();
    trace->phase1_epochs_kept = out.epochs_kept;
    record_epochs(trace, 1, r.epoch_losses);
  }
  return r;
}

Gradients head_importance(const ModelParams& model, const Dataset& train, std::size_t batch_size) {
  if (train.size() == 0) throw std::invalid_argument("head_importance: empty training data");
  if (batch_size == 0) throw std::invalid_argument("head_importance: batch_size must be > 0");
  const FreezeMask head = FreezeMask::head_only(model);
  Gradients sq = Gradients::zeros_like(model);
  std::size_t batches = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < train.size(); start += batch_size) {
    rows.resize(std::min(batch_size, train.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const auto lg = supervised_loss_and_grads(model, train.batch(rows), head);
    for (std::size_t i = model.split_index; i < model.layers.size(); ++i) {
      sq.layers[i].weights.array() += lg.grads.layers[i].weights.array().square();
      sq.layers[i].bias.array() += lg.grads.layers[i].bias.array().square();
    }
    ++batches;
  }
  for (auto& l : sq.layers) {
    l.weights = (l.weights.array() / static_cast<double>(batches)).sqrt().matrix();
    l.bias = (l.bias.array() / static_cast<double>(batches)).sqrt().matrix();
  }
  return sq;
}

FreezeMask selective_weight_mask(const ModelParams& model, const Dataset& train, double z_percent,
                                 std::size_t batch_size) {
  if (!(z_percent >= 0.0 && z_percent <= 100.0))
    throw std::invalid_argument("selective_weight_mask: Z must lie in [0, 100]");
  FreezeMask mask = FreezeMask::head_only(model);
  if (z_percent == 0.0) return mask;
  const Gradients score = head_importance(model, train, batch_size);

  struct Entry {
    double score;
    double* flag;
  };
  std::vector<Entry> entries;
  for (std::size_t i = model.split_index; i < model.layers.size(); ++i) {
    auto& w = mask.layers[i].weights;
    for (Eigen::Index k = 0; k < w.size(); ++k)
      entries.push_back({score.layers[i].weights.data()[k], w.data() + k});
    auto& b = mask.layers[i].bias;
    for (Eigen::Index k = 0; k < b.size(); ++k)
      entries.push_back({score.layers[i].bias.data()[k], b.data() + k});
  }
  const auto k = static_cast<std::size_t>(
      std::ceil(z_percent / 100.0 * static_cast<double>(entries.size()) - 1e-9));
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return a.score > b.score; });
  for (std::size_t e = 0; e < std::min(k, entries.size()); ++e) *entries[e].flag = 0.0;
  return mask;
}

Phase2Result run_phase2(const ModelParams& student, const HeadParams& saved_head,
                        const DistillationSet& set, const TransferConfig& config,
                        const ClientDataset& student_data, std::uint64_t seed,
                        TransferTrace* trace, const EpochSelector* selector) {
  if (!set.masked() && !set.teachers.empty())
    throw std::invalid_argument("phase 2 expects a masked teacher set");
  ModelParams start = replace_head(student, saved_head);
  const Dataset train = student_data.train();
  const FreezeMask freeze =
      config.selective_mask_z && *config.selective_mask_z > 0.0
          ? selective_weight_mask(start, train, *config.selective_mask_z, config.batch_size)
          : FreezeMask::head_only(start);

  const std::size_t epochs = config.effective_phase2_epochs();
  PhaseOutcome out = train_phase(start, set, config, train, epochs, freeze,
                                 derive_seed(seed, Stream::transfer, {2}), selector);

  Phase2Result r;
  r.extractor_unchanged = true;
  for (std::size_t i = 0; i < start.split_index; ++i)
    r.extractor_unchanged = r.extractor_unchanged && bitwise_equal(start.layers[i], out.model.layers[i]);
  if (trace) {
    const HeadParams restored = extract_head(start);
    trace->ran_phase2 = true;
    trace->phase2_teachers = set.teacher_ids;
    trace->phase2_masked = set.masked();
    trace->phase2_epochs_kept = out.epochs_kept;
    trace->extractor_unchanged_in_phase2 = r.extractor_unchanged;
    trace->head_restored_exactly =
        std::equal(restored.begin(), restored.end(), saved_head.begin(), saved_head.end(),
                   [](const LayerTensors& a, const LayerTensors& b) { return bitwise_equal(a, b); });
    trace->frozen_head_params = 0;
    double delta = 0.0;
    for (std::size_t i = start.split_index; i < start.layers.size(); ++i) {
      trace->frozen_head_params += freeze.layers[i].size() -
                                   static_cast<std::size_t>((freeze.layers[i].weights.array() != 0.0).count() +
                                                            (freeze.layers[i].bias.array() != 0.0).count());
    }
    for (std::size_t i = 0; i < start.layers.size(); ++i) {
      delta = std::max(delta, (start.layers[i].weights - out.model.layers[i].weights).cwiseAbs().maxCoeff());
      delta = std::max(delta, (start.layers[i].bias - out.model.layers[i].bias).cwiseAbs().maxCoeff());
    }
    trace->phase2_param_delta = delta;
    record_epochs(trace, 2, out.losses);
  }
  r.student = std::move(out.model);
  r.epoch_losses = std::move(out.losses);
  return r;
}

TransferResult run_protocol(const QueryJob& job, std::span<const ModelParams> models,
                            const ClientDataset& student_data, const EpochSelector* selector) {
  const TransferConfig& cfg = job.config;
  cfg.validate();
  if (job.student_id < 0 || static_cast<std::size_t>(job.student_id) >= models.size())
    throw std::out_of_range("student id " + std::to_string(job.student_id) + " not in network");
  if (job.query_classes.empty()) throw std::invalid_argument("query class set is empty");
  const ModelParams& student = models[static_cast<std::size_t>(job.student_id)];
  const std::size_t C = student.num_classes();
  for (int q : job.query_classes)
    if (q < 0 || static_cast<std::size_t>(q) >= C)
      throw std::out_of_range("query class " + std::to_string(q) + " out of range");

  TransferResult result;
  TransferTrace& trace = result.trace;
  trace.protocol = cfg.protocol;
  trace.student_id = job.student_id;
  trace.query_classes = job.query_classes;
  trace.non_default_temperature = cfg.temperature != 1.0;
  trace.comm_rounds = 1;  // one receipt of every peer's weights

  std::vector<int> peer_ids;
  for (std::size_t i = 0; i < models.size(); ++i)
    if (static_cast<int>(i) != job.student_id) peer_ids.push_back(static_cast<int>(i));

  auto unmasked = [&](const std::vector<int>& ids) {
    DistillationSet s;
    s.teacher_ids = ids;
    for (int id : ids) s.teachers.push_back(models[static_cast<std::size_t>(id)]);
    return s;
  };

  const std::vector<int> local = student_data.local_classes();
  auto filtered = [&](bool with_masks) {
    for (int id : peer_ids)
      trace.probes.push_back(probe_teacher(models[static_cast<std::size_t>(id)], cfg.noise_batch,
                                           student.input_dim(),
                                           derive_seed(job.seed, Stream::probing,
                                                       {static_cast<std::uint64_t>(id)}),
                                           id));
    trace.selected_teachers = select_teachers(trace.probes, job.query_classes, cfg.tau);
    DistillationSet s = unmasked(trace.selected_teachers);
    for (int id : peer_ids) {
      const bool chosen = std::binary_search(trace.selected_teachers.begin(),
                                             trace.selected_teachers.end(), id);
      TeacherMask m = build_mask(id, job.query_classes, local, cfg.lambda, C);
      if (!chosen) {
        m.selected = false;
        std::fill(m.weights.begin(), m.weights.end(), 0.0);
      }
      trace.masks.push_back(m);
      if (chosen && with_masks) s.masks.push_back(std::move(m));
    }
    return s;
  };

  switch (cfg.protocol) {
    case Protocol::naive_kd: {
      auto p1 = run_phase1(student, unmasked(peer_ids), cfg, student_data, job.seed, &trace, selector);
      result.student = std::move(p1.student);
      break;
    }
    case Protocol::kd_teacher_set: {
      auto p1 = run_phase1(student, filtered(false), cfg, student_data, job.seed, &trace, selector);
      result.student = std::move(p1.student);
      break;
    }
    case Protocol::kd_teacher_set_mask: {
      auto p1 = run_phase1(student, filtered(true), cfg, student_data, job.seed, &trace, selector);
      result.student = std::move(p1.student);
      break;
    }
    case Protocol::qkt: {
      const DistillationSet set = filtered(true);
      auto p1 = run_phase1(student, set, cfg, student_data, job.seed, &trace, selector);
      auto p2 = run_phase2(p1.student, p1.saved_head, set, cfg, student_data, job.seed, &trace,
                           selector);
      result.student = std::move(p2.student);
      break;
    }
    case Protocol::qkt_light: {
      auto p1 = run_phase1(student, unmasked(peer_ids), cfg, student_data, job.seed, &trace, selector);
      const DistillationSet set = filtered(true);
      auto p2 = run_phase2(p1.student, p1.saved_head, set, cfg, student_data, job.seed, &trace,
                           selector);
      result.student = std::move(p2.student);
      break;
    }
  }
  result.comm_rounds = trace.comm_rounds;
  return result;
}

std::string TransferTrace::to_jsonl() const {
  using nlohmann::ordered_json;
  std::string out;
  auto emit = [&](const ordered_json& j) {
    out += j.dump();
    out += '\n';
  };
  emit({{"event", "job"},
        {"protocol", to_string(protocol)},
        {"student", student_id},
        {"query", query_classes},
        {"comm_rounds", comm_rounds},
        {"non_default_temperature", non_default_temperature}});
  for (const auto& p : probes)
    emit({{"event", "probe"}, {"teacher", p.teacher_id}, {"noise_batch", p.noise_batch},
          {"avg_probs", p.avg_probs}});
  if (!probes.empty()) emit({{"event", "teacher_set"}, {"selected", selected_teachers}});
  for (const auto& m : masks)
    emit({{"event", "mask"}, {"teacher", m.teacher_id}, {"selected", m.selected},
          {"weights", m.weights}});
  auto phase = [&](int ph, const std::vector<int>& teachers, bool masked, std::size_t kept) {
    emit({{"event", "phase_begin"}, {"phase", ph}, {"teachers", teachers}, {"masked", masked}});
    for (const auto& e : epochs)
      if (e.phase == ph) emit({{"event", "epoch"}, {"phase", ph}, {"epoch", e.epoch}, {"loss", e.loss}});
    ordered_json end = {{"event", "phase_end"}, {"phase", ph}, {"epochs_kept", kept}};
    if (ph == 2) {
      end["extractor_unchanged"] = extractor_unchanged_in_phase2;
      end["head_restored_exactly"] = head_restored_exactly;
      end["frozen_head_params"] = frozen_head_params;
      end["param_delta"] = phase2_param_delta;
    }
    emit(end);
  };
  phase(1, phase1_teachers, phase1_masked, phase1_epochs_kept);
  if (ran_phase2) phase(2, phase2_teachers, phase2_masked, phase2_epochs_kept);
  return out;
}

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::naive_kd: return "naive_kd";
    case Protocol::kd_teacher_set: return "kd_tq";
    case Protocol::kd_teacher_set_mask: return "kd_tq_mask";
    case Protocol::qkt: return "qkt";
    case Protocol::qkt_light: return "qkt_light";
  }
  return "unknown";
}

Protocol parse_protocol(const std::string& s) {
  if (s == "naive_kd" || s == "kd") return Protocol::naive_kd;
  if (s == "kd_tq") return Protocol::kd_teacher_set;
  if (s == "kd_tq_mask") return Protocol::kd_teacher_set_mask;
  if (s == "qkt") return Protocol::qkt;
  if (s == "qkt_light") return Protocol::qkt_light;
  throw ConfigError("unknown transfer protocol '" + s +
                    "' (expected naive_kd|kd_tq|kd_tq_mask|qkt|qkt_light)");
}

LightVariant parse_light_variant(const std::string& s) {
  if (s == "local") return LightVariant::local;
  if (s == "central_server") return LightVariant::central_server;
  if (s == "volunteer") return LightVariant::volunteer;
  throw ConfigError("unknown light variant '" + s + "' (expected local|central_server|volunteer)");
}

}  // namespace qkt
