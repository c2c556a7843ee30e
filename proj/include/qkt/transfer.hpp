#pragma once

// Query-based knowledge transfer.
//
// A student acquires knowledge of its query classes from peer (teacher)
// models without seeing their data:
//
//   1. Probe every teacher with standard-normal noise and average its softmax
//      output. Teachers with mean probability >= tau on some query class form
//      the teacher set.
//   2. Build one mask per selected teacher: lambda on query classes, 1 on the
//      student's own classes, 0 elsewhere.
//   3. Phase 1 trains the whole student on its own data with cross-entropy plus
//      the mask-weighted element-wise KL to each selected teacher.
//   4. Phase 2 restores the head saved before phase 1, freezes the feature
//      extractor and trains only the head with the same masked loss.
//
// The light variant uses unmasked KD against every teacher in phase 1 and
// applies filtering and masking only in phase 2.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qkt/data.hpp"
#include "qkt/nn.hpp"

namespace qkt {

enum class Protocol {
  naive_kd,             // unmasked KD from every teacher, single phase
  kd_teacher_set,       // unmasked KD from the selected teacher set, single phase
  kd_teacher_set_mask,  // masked KD from the selected teacher set, single phase
  qkt,                  // masked phase 1 + head refinement phase 2
  qkt_light,            // unmasked phase 1 + masked head refinement phase 2
};

/// Who runs phase 1 of the light variant. Only per-client local execution is built.
enum class LightVariant { local, central_server, volunteer };

/// Route used for the masked divergence term. Both give identical gradients;
/// loss values differ by the constant sum_j M[j] p_t[j] log p_t[j].
enum class DivergenceForm {
  kl,             // M[j] * p_t[j] * (log p_t[j] - log p_s[j]), gradient through log-softmax
  cross_entropy,  // -M[j] * p_t[j] * log p_s[j], gradient through the softmax Jacobian
};

class NoCompetentTeacherError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TeacherProbe {
  int teacher_id = 0;
  std::vector<double> avg_probs;  // length C
  std::size_t noise_batch = 0;
  std::uint64_t seed = 0;
};

struct TeacherMask {
  int teacher_id = 0;
  std::vector<double> weights;  // length C, entries in {0, 1, lambda}
  bool selected = false;
};

struct TransferConfig {
  Protocol protocol = Protocol::qkt;
  double tau = 0.01;
  double lambda = 1.5;
  double alpha_kd = 1.0;
  double temperature = 1.0;
  std::size_t epochs = 25;                    // E, phase 1
  std::optional<std::size_t> phase2_epochs;   // defaults to E (5 for qkt_light)
  std::size_t noise_batch = 20;               // B
  std::size_t batch_size = 32;
  std::optional<double> selective_mask_z;     // percent of head weights frozen in phase 2
  LightVariant light_variant = LightVariant::local;
  bool variable_epochs = false;               // pick each phase's epoch count on validation data
  AdamConfig adam{};

  void validate() const;
  std::size_t effective_phase2_epochs() const;
};

struct QueryJob {
  int student_id = 0;
  std::vector<int> query_classes;
  TransferConfig config;
  std::uint64_t seed = 0;
};

/// Teachers used by one training phase, with their masks when masked.
struct DistillationSet {
  std::vector<int> teacher_ids;
  std::vector<ModelParams> teachers;
  std::vector<TeacherMask> masks;  // empty means unmasked naive KD

  bool masked() const { return !masks.empty(); }
};

/// Validation data used to choose the number of epochs per phase.
struct EpochSelector {
  Dataset validation;
  std::map<int, std::size_t> local_counts;
  std::vector<int> query_classes;
};

struct EpochRecord {
  int phase = 1;
  std::size_t epoch = 0;
  double loss = 0.0;
};

/// Audit trail of one transfer job.
struct TransferTrace {
  Protocol protocol = Protocol::qkt;
  int student_id = 0;
  std::vector<int> query_classes;
  std::vector<TeacherProbe> probes;
  std::vector<int> selected_teachers;
  std::vector<TeacherMask> masks;
  std::vector<int> phase1_teachers;
  bool phase1_masked = false;
  std::vector<int> phase2_teachers;
  bool phase2_masked = false;
  bool ran_phase2 = false;
  std::vector<EpochRecord> epochs;
  std::size_t phase1_epochs_kept = 0;
  std::size_t phase2_epochs_kept = 0;
  bool extractor_unchanged_in_phase2 = true;
  bool head_restored_exactly = true;
  std::size_t frozen_head_params = 0;
  double phase2_param_delta = 0.0;  // max |change| of any parameter during phase 2
  bool non_default_temperature = false;
  int comm_rounds = 1;

  /// One JSON object per line: probes, selection, masks, epochs, phase boundaries.
  std::string to_jsonl() const;
};

struct TransferResult {
  ModelParams student;
  TransferTrace trace;
  int comm_rounds = 1;
};

TeacherProbe probe_teacher(const ModelParams& teacher, std::size_t noise_batch,
                           std::size_t input_dim, std::uint64_t seed, int teacher_id = 0);

double probe_mse(const TeacherProbe& probe, std::span<const double> actual);

/// Ids of teachers whose mean probe probability reaches tau on some query class.
/// Throws NoCompetentTeacherError when none qualifies.
std::vector<int> select_teachers(std::span<const TeacherProbe> probes,
                                 std::span<const int> query, double tau);

TeacherMask build_mask(int teacher_id, std::span<const int> query,
                       std::span<const int> student_local_classes, double lambda,
                       std::size_t num_classes);

/// Mean over the batch of CE(p_s, y) + alpha * sum_t <M_t, d(p_t, p_s)>.
LossAndGrads qkd_loss_and_grads(const ModelParams& student, std::span<const ModelParams> teachers,
                                std::span<const TeacherMask> masks, const Batch& batch,
                                double alpha_kd, double temperature, const FreezeMask& freeze,
                                DivergenceForm form = DivergenceForm::kl);

/// Mean over the batch of CE(p_s, y) + alpha * sum_t KL(p_t || p_s).
LossAndGrads naive_kd_loss_and_grads(const ModelParams& student,
                                     std::span<const ModelParams> teachers, const Batch& batch,
                                     double alpha_kd, double temperature,
                                     const FreezeMask& freeze);

/// Same losses against teacher probabilities computed ahead of time (one
/// n x C matrix per teacher, rows aligned with the batch).
LossAndGrads qkd_loss_from_targets(const ModelParams& student,
                                   std::span<const Matrix> teacher_probs,
                                   std::span<const TeacherMask> masks, const Batch& batch,
                                   double alpha_kd, double temperature, const FreezeMask& freeze,
                                   DivergenceForm form = DivergenceForm::kl);
LossAndGrads naive_kd_loss_from_targets(const ModelParams& student,
                                        std::span<const Matrix> teacher_probs,
                                        const Batch& batch, double alpha_kd, double temperature,
                                        const FreezeMask& freeze);

struct Phase1Result {
  ModelParams student;
  HeadParams saved_head;  // head before phase 1
  std::vector<double> epoch_losses;
};

Phase1Result run_phase1(ModelParams student, const DistillationSet& set,
                        const TransferConfig& config, const ClientDataset& student_data,
                        std::uint64_t seed, TransferTrace* trace = nullptr,
                        const EpochSelector* selector = nullptr);

struct Phase2Result {
  ModelParams student;
  std::vector<double> epoch_losses;
  bool extractor_unchanged = true;
};

/// Restores `saved_head`, freezes the extractor (plus the top-Z% head weights
/// when selective masking is on) and refines the head for the phase-2 epochs.
Phase2Result run_phase2(const ModelParams& student, const HeadParams& saved_head,
                        const DistillationSet& set, const TransferConfig& config,
                        const ClientDataset& student_data, std::uint64_t seed,
                        TransferTrace* trace = nullptr, const EpochSelector* selector = nullptr);

/// Head-weight importance: root-mean-square over the student's training
/// batches of each head parameter's cross-entropy gradient.
Gradients head_importance(const ModelParams& model, const Dataset& train, std::size_t batch_size);

/// Freeze mask for phase 2: the extractor plus the top z_percent most
/// important head parameters are frozen.
FreezeMask selective_weight_mask(const ModelParams& model, const Dataset& train, double z_percent,
                                 std::size_t batch_size = 32);

/// `models` is indexed by client id; every model except the student's acts as a teacher.
TransferResult run_protocol(const QueryJob& job, std::span<const ModelParams> models,
                            const ClientDataset& student_data,
                            const EpochSelector* selector = nullptr);

std::string to_string(Protocol p);
Protocol parse_protocol(const std::string& s);
LightVariant parse_light_variant(const std::string& s);

}  // namespace qkt
