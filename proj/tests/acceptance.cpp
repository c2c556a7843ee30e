// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "qkt/baselines.hpp"
#include "qkt/checkpoint.hpp"
#include "qkt/harness.hpp"
#include "qkt/metrics.hpp"
#include "qkt/transfer.hpp"

using namespace qkt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double max_diff(const Gradients& a, const Gradients& b) {
  double d = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    d = std::max(d, (a.layers[l].weights - b.layers[l].weights).cwiseAbs().maxCoeff());
    d = std::max(d, (a.layers[l].bias - b.layers[l].bias).cwiseAbs().maxCoeff());
  }
  return d;
}

double max_diff(const ModelParams& a, const ModelParams& b) {
  double d = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    d = std::max(d, (a.layers[l].weights - b.layers[l].weights).cwiseAbs().maxCoeff());
    d = std::max(d, (a.layers[l].bias - b.layers[l].bias).cwiseAbs().maxCoeff());
  }
  return d;
}

// The fixed desk-scale network: 10 clients, 10 classes, 3 classes per client,
// one query class per student, 5 seeds.
ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.partition.scheme = PartitionScheme::pathological;
  c.partition.num_clients = 10;
  c.partition.classes_per_client = 3;
  c.dataset.synthetic.num_classes = 10;
  c.query.mode = QueryMode::single;
  c.seeds = {0, 1, 2, 3, 4};
  c.write_instrumentation = false;
  c.save_checkpoints = false;
  return c;
}

ProtocolSpec transfer_protocol(const std::string& name, Protocol p) {
  ProtocolSpec s;
  s.name = name;
  s.kind = MethodKind::transfer;
  s.transfer.protocol = p;
  return s;
}

ProtocolSpec method(const std::string& name, MethodKind k) {
  ProtocolSpec s;
  s.name = name;
  s.kind = k;
  return s;
}

struct Run {
  std::vector<RunRecord> records;
  std::vector<MetricsReport> reports;
  std::size_t skipped = 0;
};

Run run(const ExperimentConfig& cfg, const TraceFn& on_trace = {}) {
  RunOptions opts;
  opts.write_outputs = false;
  opts.on_trace = on_trace;
  Run r;
  r.records = run_experiment(cfg, opts);
  for (const auto& rec : r.records) {
    r.reports.insert(r.reports.end(), rec.reports.begin(), rec.reports.end());
    r.skipped += rec.errors.size();
  }
  return r;
}

// Seed means keyed by the first group column (protocol or sweep value).
std::map<std::string, SummaryRow> seed_means(const std::vector<MetricsReport>& reports,
                                             const std::string& key) {
  std::map<std::string, SummaryRow> out;
  for (const auto& row : summarize(reports, {key})) out[row.group[0]] = row;
  return out;
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  double worst_ce = 0, worst_kd = 0, worst_qkd = 0;
  std::size_t max_params = 0;
  const std::size_t seeds = 20;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    const ModelParams s = make_mlp(6, std::vector<std::size_t>{16, 12}, 5, seed);
    max_params = std::max(max_params, s.parameter_count());
    const Batch b = qkt::testing::random_batch(8, 6, 5, seed + 1000);
    const FreezeMask all = FreezeMask::trainable(s);
    const std::vector<ModelParams> teachers{make_mlp(6, std::vector<std::size_t>{16, 12}, 5, seed + 2000),
                                            make_mlp(6, std::vector<std::size_t>{16, 12}, 5, seed + 3000)};
    std::vector<int> query{static_cast<int>(seed % 5)};
    std::vector<int> local{static_cast<int>((seed + 1) % 5), static_cast<int>((seed + 2) % 5)};
    const std::vector<TeacherMask> masks{build_mask(1, query, local, 1.5, 5), build_mask(2, query, local, 1.5, 5)};
    worst_ce = std::max(worst_ce, gradient_check(s, b));
    worst_kd = std::max(worst_kd, gradient_check(s, [&](const ModelParams& m) {
                          return naive_kd_loss_and_grads(m, teachers, b, 1.0, 1.0, all);
                        }));
    worst_qkd = std::max(worst_qkd, gradient_check(s, [&](const ModelParams& m) {
                           return qkd_loss_and_grads(m, teachers, masks, b, 1.0, 1.0, all);
                         }));
  }
  const double worst = std::max({worst_ce, worst_kd, worst_qkd});
  return {worst < 1e-4 && max_params <= 2000,
          std::to_string(seeds) + " seeds, " + std::to_string(max_params) +
              " params; max rel err CE " + fmt("%.2e", worst_ce) + ", KD " + fmt("%.2e", worst_kd) +
              ", masked " + fmt("%.2e", worst_qkd) + " (< 1e-4)"};
}

Outcome reduction_identity() {
  double worst = 0.0;
  Rng rng(42);
  std::uniform_int_distribution<int> teachers_n(1, 4), classes_n(2, 8);
  std::uniform_real_distribution<double> alpha(0.1, 2.0);
  for (std::uint64_t k = 0; k < 100; ++k) {
    const std::size_t C = static_cast<std::size_t>(classes_n(rng));
    const std::size_t T = static_cast<std::size_t>(teachers_n(rng));
    const double a = alpha(rng);
    const ModelParams s = qkt::testing::small_mlp(5, C, k);
    const Batch b = qkt::testing::random_batch(7, 5, C, k + 500);
    const FreezeMask all = FreezeMask::trainable(s);
    std::vector<ModelParams> teachers;
    std::vector<TeacherMask> ones;
    std::vector<int> every_class(C);
    for (std::size_t c = 0; c < C; ++c) every_class[c] = static_cast<int>(c);
    for (std::size_t t = 0; t < T; ++t) {
      teachers.push_back(qkt::testing::small_mlp(5, C, 10000 + 10 * k + t));
      ones.push_back(build_mask(static_cast<int>(t), std::span<const int>(every_class).first(1),
                                every_class, 1.0, C));
    }
    const double q = qkd_loss_and_grads(s, teachers, ones, b, a, 1.0, all).loss;
    const double n = naive_kd_loss_and_grads(s, teachers, b, a, 1.0, all).loss;
    worst = std::max(worst, std::abs(q - n));
  }
  return {worst <= 1e-12, "100 instances, max |qkd - naive_kd| = " + fmt("%.2e", worst) + " (<= 1e-12)"};
}

Outcome gradient_form_equivalence() {
  double worst = 0.0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    const std::size_t C = 3 + k % 6;
    const ModelParams s = qkt::testing::small_mlp(5, C, k);
    const Batch b = qkt::testing::random_batch(9, 5, C, k + 77);
    const FreezeMask all = FreezeMask::trainable(s);
    const std::vector<Matrix> targets{qkt::testing::random_probs(9, C, k + 1),
                                      qkt::testing::random_probs(9, C, k + 2)};
    const std::vector<TeacherMask> masks{qkt::testing::random_mask(C, k + 3),
                                         qkt::testing::random_mask(C, k + 4)};
    const auto kl = qkd_loss_from_targets(s, targets, masks, b, 1.0, 1.0, all, DivergenceForm::kl);
    const auto ce =
        qkd_loss_from_targets(s, targets, masks, b, 1.0, 1.0, all, DivergenceForm::cross_entropy);
    worst = std::max(worst, max_diff(kl.grads, ce.grads));
  }
  return {worst < 1e-10, "100 instances, max gradient difference " + fmt("%.2e", worst) + " (< 1e-10)"};
}

Outcome probe_fidelity() {
  const ExperimentConfig cfg = desk_config();
  std::size_t agree = 0, pairs = 0;
  double mse = 0.0;
  std::size_t probes = 0;
  for (std::uint64_t seed : cfg.seeds) {
    const Scenario s = build_scenario(cfg, seed);
    const std::size_t C = s.data.train.num_classes;
    for (std::size_t i = 0; i < s.models.size(); ++i) {
      const auto p = probe_teacher(s.models[i], 20, s.data.train.dims(),
                                   derive_seed(seed, Stream::probing, {i}), static_cast<int>(i));
      const auto counts = s.clients[i].train_class_counts();
      const auto actual = normalized_distribution(counts, C);
      for (std::size_t c = 0; c < C; ++c) {
        const bool predicted = p.avg_probs[c] >= 0.01;
        const bool held = counts.count(static_cast<int>(c)) > 0;
        agree += predicted == held ? 1 : 0;
        ++pairs;
      }
      mse += probe_mse(p, actual);
      ++probes;
    }
  }
  const double rate = static_cast<double>(agree) / static_cast<double>(pairs);
  const double mean_mse = mse / static_cast<double>(probes);
  return {rate >= 0.95 && mean_mse < 0.02,
          "support agreement " + fmt("%.4f", rate) + " (>= 0.95), mean probe MSE " +
              fmt("%.4f", mean_mse) + " (< 0.02), " + std::to_string(probes) + " probes"};
}

struct PhaseTwoAudit {
  std::size_t runs = 0;
  std::size_t violations = 0;
};

Outcome ablation(PhaseTwoAudit& audit) {
  ExperimentConfig cfg = desk_config();
  cfg.protocols = {method("local", MethodKind::local),
                   transfer_protocol("naive_kd", Protocol::naive_kd),
                   transfer_protocol("kd_tq", Protocol::kd_teacher_set),
                   transfer_protocol("kd_tq_mask", Protocol::kd_teacher_set_mask),
                   transfer_protocol("qkt", Protocol::qkt)};
  const Run r = run(cfg, [&](const MetricsReport&, const TransferTrace& t) {
    if (!t.ran_phase2) return;
    ++audit.runs;
    if (!t.extractor_unchanged_in_phase2 || !t.head_restored_exactly) ++audit.violations;
  });
  auto m = seed_means(r.reports, "protocol");
  const double qkt = m["qkt"].avg_acc_mean, mask = m["kd_tq_mask"].avg_acc_mean,
               naive = m["naive_kd"].avg_acc_mean, local = m["local"].avg_acc_mean;
  const double f_mask = m["kd_tq_mask"].forgetting_mean, f_tq = m["kd_tq"].forgetting_mean;
  const bool ok = qkt > mask && mask > naive && naive > local && std::abs(f_mask) < std::abs(f_tq);
  std::string d = "avg_acc qkt " + fmt("%.2f", 100 * qkt) + (qkt > mask ? " > " : " !> ") +
                  "kd_tq_mask " + fmt("%.2f", 100 * mask) + (mask > naive ? " > " : " !> ") +
                  "naive_kd " + fmt("%.2f", 100 * naive) + (naive > local ? " > " : " !> ") +
                  "local " + fmt("%.2f", 100 * local) + "; |F| kd_tq_mask " +
                  fmt("%.2f", 100 * std::abs(f_mask)) +
                  (std::abs(f_mask) < std::abs(f_tq) ? " < " : " !< ") + "kd_tq " +
                  fmt("%.2f", 100 * std::abs(f_tq)) + " (5 seeds";
  if (r.skipped) d += ", " + std::to_string(r.skipped) + " jobs without a competent teacher";
  return {ok, d + ")"};
}

Outcome phase_two_contract(const PhaseTwoAudit& audit) {
  // Head-replacement round trip on its own, then the audit of every phase-2 run.
  const ModelParams a = make_mlp(8, std::vector<std::size_t>{64, 32}, 10, 1);
  const ModelParams b = make_mlp(8, std::vector<std::size_t>{64, 32}, 10, 2);
  const HeadParams saved = extract_head(a);
  const ModelParams swapped = replace_head(b, saved);
  const bool round_trip = bitwise_equal(replace_head(swapped, extract_head(b)), b) &&
                          bitwise_equal(extract_head(swapped)[0], saved[0]);
  const bool ok = round_trip && audit.runs > 0 && audit.violations == 0;
  return {ok, std::to_string(audit.runs) + " phase-2 runs audited, " +
                  std::to_string(audit.violations) +
                  " with a changed extractor or inexact head restore; standalone round trip " +
                  (round_trip ? "exact" : "NOT exact")};
}

Outcome lambda_trend() {
  ExperimentConfig cfg = desk_config();
  cfg.protocols = {transfer_protocol("qkt", Protocol::qkt)};
  cfg.sweep = {"lambda", {1.0, 1.5, 2.0, 4.0}};
  const Run r = run(cfg);
  auto m = seed_means(r.reports, "sweep_value");
  const std::vector<std::string> order{"1", "1.5", "2", "4"};
  bool ok = true;
  std::string d = "gain";
  for (std::size_t k = 0; k < order.size(); ++k) {
    d += " " + fmt("%.2f", 100 * m[order[k]].query_acc_gain_mean);
    if (k > 0 && m[order[k]].query_acc_gain_mean < m[order[k - 1]].query_acc_gain_mean - 0.01) ok = false;
  }
  d += "; |F|";
  for (std::size_t k = 0; k < order.size(); ++k) {
    d += " " + fmt("%.2f", 100 * std::abs(m[order[k]].forgetting_mean));
    if (k > 0 && std::abs(m[order[k]].forgetting_mean) < std::abs(m[order[k - 1]].forgetting_mean) - 0.01)
      ok = false;
  }
  return {ok, d + " for lambda 1, 1.5, 2, 4 (1-point allowance per step)"};
}

Outcome selective_mask_trend() {
  ExperimentConfig cfg = desk_config();
  cfg.protocols = {transfer_protocol("qkt", Protocol::qkt)};
  cfg.sweep = {"selective_mask_z", {0.0, 1.0, 5.0, 10.0, 100.0}};
  double worst_delta_z100 = 0.0;
  std::size_t z100_runs = 0;
  const Run r = run(cfg, [&](const MetricsReport& rep, const TransferTrace& t) {
    if (rep.sweep_value == 100.0) {
      ++z100_runs;
      worst_delta_z100 = std::max(worst_delta_z100, t.phase2_param_delta);
    }
  });
  auto m = seed_means(r.reports, "sweep_value");
  const std::vector<std::string> order{"0", "1", "5", "10", "100"};
  bool monotone = true;
  std::string d = "|F|";
  for (std::size_t k = 0; k < order.size(); ++k) {
    d += " " + fmt("%.2f", 100 * std::abs(m[order[k]].forgetting_mean));
    if (k > 0 && std::abs(m[order[k]].forgetting_mean) > std::abs(m[order[k - 1]].forgetting_mean))
      monotone = false;
  }
  const double g0 = m["0"].query_acc_gain_mean, g100 = m["100"].query_acc_gain_mean;
  const bool gain_ok = g100 <= g0;
  const bool delta_ok = z100_runs > 0 && worst_delta_z100 == 0.0;
  d += " for Z 0, 1, 5, 10, 100" + std::string(monotone ? "" : " (not non-increasing)") +
       "; gain Z=100 " + fmt("%.2f", 100 * g100) + (gain_ok ? " <= " : " > ") + "Z=0 " +
       fmt("%.2f", 100 * g0) + "; max phase-2 delta at Z=100 " + fmt("%.1e", worst_delta_z100) +
       " over " + std::to_string(z100_runs) + " runs";
  return {monotone && gain_ok && delta_ok, d};
}

Outcome comm_accounting() {
  ExperimentConfig cfg = desk_config();
  cfg.seeds = {0};
  const std::size_t R = 4;
  cfg.protocols = {transfer_protocol("naive_kd", Protocol::naive_kd),
                   transfer_protocol("qkt", Protocol::qkt),
                   transfer_protocol("qkt_light", Protocol::qkt_light),
                   method("fedavg", MethodKind::fedavg), method("ft_fedavg", MethodKind::ft_fedavg)};
  for (auto& p : cfg.protocols) {
    p.transfer.epochs = 2;
    p.fed.rounds = R;
    p.fed.local_epochs = 1;
  }
  const Run r = run(cfg);
  const std::map<std::string, int> expected{{"naive_kd", 1}, {"qkt", 1}, {"qkt_light", 1},
                                            {"fedavg", static_cast<int>(R)},
                                            {"ft_fedavg", static_cast<int>(R)}};
  std::map<std::string, std::size_t> seen;
  bool ok = true;
  for (const auto& rep : r.reports) {
    ++seen[rep.protocol];
    if (rep.comm_rounds != expected.at(rep.protocol)) ok = false;
  }
  std::string d;
  for (const auto& [name, comm] : expected) {
    if (!seen[name]) ok = false;
    d += (d.empty() ? "" : ", ") + name + "=" + std::to_string(comm);
  }
  return {ok, "comm rounds " + d + " (R=" + std::to_string(R) + ") on " +
                  std::to_string(r.reports.size()) + " rows"};
}

Outcome metric_oracles() {
  double worst = 0.0;
  auto track = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };
  const std::vector<int> q2{2};
  track(average_accuracy({{0, 0.8}, {1, 0.4}, {2, 0.6}}, {{0, 75}, {1, 25}}, q2), 0.65);
  const std::vector<int> q0{0};
  track(query_acc_gain({{0, 0.0}}, {{0, 0.78}}, q0), 0.78);
  track(query_acc_gain({{0, 0.3}}, {{0, 0.3}}, q0), 0.0);
  const std::vector<int> q01{0, 1};
  track(query_acc_gain({{0, 0.1}, {1, 0.2}}, {{0, 0.6}, {1, 0.4}}, q01), 0.35);
  track(forgetting({{0, 0.9}, {1, 0.8}}, {{0, 0.7}, {1, 0.85}}, q01), -0.10);
  track(forgetting({{0, 0.2}, {1, 0.3}}, {{0, 0.5}, {1, 0.3}}, q01), 0.0);
  track(forgetting({{0, 1.0}, {1, 1.0}}, {{0, 0.0}, {1, 0.0}}, q01), -1.0);
  track(uniform_accuracy({{0, 0.5}, {1, 1.0}}), 0.75);
  PerClassAccuracy constant;
  for (int c = 0; c < 10; ++c) constant[c] = c == 0 ? 1.0 : 0.0;
  track(uniform_accuracy(constant), 0.1);
  const PerClassAccuracy acc{{0, 0.1}, {1, 0.7}, {2, 0.4}};
  track(average_accuracy(acc, {{0, 1}, {1, 1}, {2, 1}}, {}), uniform_accuracy(acc));
  track(average_accuracy({{0, 0.3}, {1, 0.3}, {2, 0.3}}, {{0, 3}, {1, 9}}, q2), 0.3);
  return {worst <= 1e-12, "11 worked examples, max abs error " + fmt("%.2e", worst) + " (<= 1e-12)"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  ExperimentConfig cfg = desk_config();
  cfg.seeds = {3};
  cfg.save_checkpoints = true;
  cfg.protocols = {transfer_protocol("qkt", Protocol::qkt),
                   transfer_protocol("naive_kd", Protocol::naive_kd)};
  const fs::path root = fs::temp_directory_path() / "qkt_acceptance_determinism";
  fs::remove_all(root);
  cfg.output_dir = (root / "a").string();
  (void)run_experiment(cfg);
  cfg.output_dir = (root / "b").string();
  (void)run_experiment(cfg);
  bool ok = slurp(root / "a" / "results.csv") == slurp(root / "b" / "results.csv");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a" / "checkpoints")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path other = root / "b" / fs::relative(e.path(), root / "a");
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) ok = false;
  }
  const bool csv_nonempty = slurp(root / "a" / "results.csv").size() > results_csv_header().size() + 1;
  fs::remove_all(root);
  ok = ok && files == 10 && csv_nonempty;
  return {ok, "results.csv and " + std::to_string(files) + " checkpoint files byte-identical across two runs"};
}

Outcome fedavg_sanity() {
  ExperimentConfig cfg = desk_config();
  const Scenario s = build_scenario(cfg, 0);
  FedConfig fc;
  fc.rounds = 1;
  fc.local_epochs = 2;
  const std::vector<ModelParams> start{make_mlp(8, cfg.hidden, 10, 99)};
  const auto a = fedavg(s.clients, start, fc, 5);
  const auto b = fedavg1(s.clients, start, fc, 5);
  const bool same = bitwise_equal(a.global, b.global) && a.comm_rounds == 1 && b.comm_rounds == 1;

  fc.local_epochs = 0;
  const auto z = fedavg(s.clients, s.models, fc, 5);
  double total = 0.0;
  for (const auto& c : s.clients) total += static_cast<double>(c.splits.train.size());
  ModelParams expected = s.models[0];
  for (std::size_t l = 0; l < expected.layers.size(); ++l) {
    expected.layers[l].weights.setZero();
    expected.layers[l].bias.setZero();
  }
  for (std::size_t i = 0; i < s.models.size(); ++i) {
    const double w = static_cast<double>(s.clients[i].splits.train.size()) / total;
    for (std::size_t l = 0; l < expected.layers.size(); ++l) {
      expected.layers[l].weights += w * s.models[i].layers[l].weights;
      expected.layers[l].bias += w * s.models[i].layers[l].bias;
    }
  }
  const double err = max_diff(z.global, expected);
  return {same && err <= 1e-12, std::string("R=1 vs FedAvg(1) ") + (same ? "bit-identical" : "DIFFER") +
                                    "; zero-epoch average vs size-weighted mean max error " +
                                    fmt("%.2e", err) + " (<= 1e-12)"};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<Outcome()> check;
  };
  PhaseTwoAudit audit;
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", 30, gradient_correctness},
      {2, "reduction identity", 5, reduction_identity},
      {3, "gradient-form equivalence", 5, gradient_form_equivalence},
      {4, "noise-probe fidelity", 300, probe_fidelity},
      {5, "ablation ordering", 900, [&] { return ablation(audit); }},
      {7, "phase-2 contract", 0, [&] { return phase_two_contract(audit); }},
      {6, "lambda trend", 1200, lambda_trend},
      {8, "selective-mask trend", 900, selective_mask_trend},
      {9, "single-round comm accounting", 0, comm_accounting},
      {10, "metric oracles", 0, metric_oracles},
      {11, "determinism", 0, determinism},
      {12, "FedAvg sanity", 0, fedavg_sanity},
  };

  std::map<int, std::string> lines;
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_seconds > 0 && secs > c.budget_seconds) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f", c.budget_seconds) + " s budget";
    }
    if (!o.pass) ++failures;
    char head[96];
    std::snprintf(head, sizeof head, "%s  %2d  %-30s ", o.pass ? "PASS" : "FAIL", c.id, c.name);
    lines[c.id] = std::string(head) + o.detail + " [" + fmt("%.1f", secs) + " s]";
    std::printf("%s\n", lines[c.id].c_str());
    std::fflush(stdout);
  }
  std::printf("\nsummary (by criterion):\n");
  for (const auto& [id, line] : lines) std::printf("%s\n", line.c_str());
  std::printf("\n%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures,
              criteria.size());
  return failures == 0 ? 0 : 1;
}
