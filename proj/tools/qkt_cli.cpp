// qkt: command-line front end for the experiment harness.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "qkt/checkpoint.hpp"
#include "qkt/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config = true) {
  auto* opt = cmd->add_option("--config", c.config, "Experiment config (JSON)");
  if (needs_config) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Run a single seed instead of the config's seed list");
  cmd->add_option("--out", c.out, "Output directory (overrides output_dir)");
}

qkt::ExperimentConfig load(const Common& c) {
  qkt::ExperimentConfig cfg = qkt::load_config(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.out.empty()) cfg.output_dir = c.out;
  return cfg;
}

std::uint64_t first_seed(const qkt::ExperimentConfig& cfg) { return cfg.seeds.front(); }

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

ordered_json accuracy_json(const qkt::PerClassAccuracy& acc, std::size_t C) {
  ordered_json a = ordered_json::array();
  for (std::size_t c = 0; c < C; ++c) {
    auto it = acc.find(static_cast<int>(c));
    if (it == acc.end())
      a.push_back(nullptr);
    else
      a.push_back(it->second);
  }
  return a;
}

qkt::LogFn stderr_log() {
  return [](const std::string& s) { std::cerr << "[qkt] " << s << "\n"; };
}

void keep_protocols(qkt::ExperimentConfig& cfg, bool transfer) {
  std::vector<qkt::ProtocolSpec> kept;
  for (const auto& p : cfg.protocols) {
    const bool is_transfer = p.kind == qkt::MethodKind::transfer || p.kind == qkt::MethodKind::local;
    if (is_transfer == transfer) kept.push_back(p);
  }
  if (kept.empty())
    throw qkt::ConfigError(std::string("/protocols: config lists no ") +
                           (transfer ? "transfer" : "baseline") + " protocol");
  cfg.protocols = std::move(kept);
}

int run_and_summarize(const qkt::ExperimentConfig& cfg, const std::string& checkpoints) {
  qkt::RunOptions opts;
  opts.log = stderr_log();
  opts.checkpoint_dir = checkpoints;
  const auto records = qkt::run_experiment(cfg, opts);
  std::ifstream in(fs::path(cfg.output_dir) / "summary.txt");
  std::cout << in.rdbuf();
  std::size_t failures = 0;
  for (const auto& r : records) failures += r.errors.size();
  std::cerr << "[qkt] wrote " << cfg.output_dir << " (config " << cfg.hash() << ", "
            << failures << " logged failures)\n";
  return 0;
}

std::string error_type(const std::exception& e) {
  if (dynamic_cast<const qkt::ConfigError*>(&e)) return "config_error";
  if (dynamic_cast<const qkt::DataError*>(&e)) return "data_error";
  if (dynamic_cast<const qkt::CheckpointError*>(&e)) return "checkpoint_error";
  if (dynamic_cast<const qkt::NoCompetentTeacherError*>(&e)) return "no_competent_teacher";
  if (dynamic_cast<const qkt::ShapeError*>(&e)) return "shape_error";
  if (dynamic_cast<const qkt::NumericalError*>(&e)) return "numerical_error";
  return "error";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Query-based knowledge transfer simulator"};
  app.require_subcommand(1);

  Common gen, part, pre, tr, base, sweep, eval;
  std::string transfer_ckpt, baseline_ckpt, eval_ckpt;
  std::string results;
  std::vector<std::string> group_by{"protocol", "sweep_key", "sweep_value"};
  std::string report_out;

  auto* c_gen = app.add_subcommand("gen-data", "Write the global train/test sets as CSV");
  add_common(c_gen, gen);
  auto* c_part = app.add_subcommand("partition", "Partition the data and write per-client CSVs");
  add_common(c_part, part);
  auto* c_pre = app.add_subcommand("pretrain", "Pretrain every client and write checkpoints");
  add_common(c_pre, pre);
  auto* c_tr = app.add_subcommand("transfer", "Run the config's transfer protocols");
  add_common(c_tr, tr);
  c_tr->add_option("--checkpoints", transfer_ckpt, "Load pretrained client checkpoints from DIR")
      ->check(CLI::ExistingDirectory);
  auto* c_base = app.add_subcommand("baseline", "Run the config's baseline methods");
  add_common(c_base, base);
  c_base->add_option("--checkpoints", baseline_ckpt, "Load pretrained client checkpoints from DIR")
      ->check(CLI::ExistingDirectory);
  auto* c_eval = app.add_subcommand("evaluate", "Per-class test accuracy of a checkpoint");
  add_common(c_eval, eval);
  c_eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  auto* c_rep = app.add_subcommand("report", "Summarize a results CSV (mean +- std over seeds)");
  c_rep->add_option("--results", results, "results.csv")->required()->check(CLI::ExistingFile);
  c_rep->add_option("--group-by", group_by, "Grouping columns")->delimiter(',');
  c_rep->add_option("--out", report_out, "Write summary.csv and summary.txt here");
  auto* c_sweep = app.add_subcommand("sweep", "Run the full experiment, including any sweep");
  add_common(c_sweep, sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    ordered_json err = {{"error", {{"type", "usage_error"}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return 2;
  }

  try {
    if (*c_gen) {
      const auto cfg = load(gen);
      const auto data = qkt::load_dataset(cfg.dataset, first_seed(cfg));
      const fs::path out = cfg.output_dir;
      fs::create_directories(out);
      qkt::write_dataset_csv(out / "train.csv", data.train);
      qkt::write_dataset_csv(out / "test.csv", data.test);
      std::cout << "train " << data.train.size() << " rows, test " << data.test.size()
                << " rows -> " << out.string() << "\n";
    } else if (*c_part) {
      const auto cfg = load(part);
      const std::uint64_t seed = first_seed(cfg);
      const auto data = qkt::load_dataset(cfg.dataset, seed);
      qkt::PartitionSpec ps = cfg.partition;
      ps.seed = qkt::derive_seed(seed, qkt::Stream::partition);
      const auto clients = qkt::partition(data.train, ps);
      const fs::path out = cfg.output_dir;
      write_file(out / "partition.json", qkt::partition_manifest(clients) + "\n");
      for (const auto& c : clients) {
        const std::string stem = "client" + std::to_string(c.client_id);
        qkt::write_dataset_csv(out / (stem + "_train.csv"), c.train());
        qkt::write_dataset_csv(out / (stem + "_val.csv"), c.val());
      }
      std::cout << qkt::partition_manifest(clients) << "\n";
    } else if (*c_pre) {
      const auto cfg = load(pre);
      const std::uint64_t seed = first_seed(cfg);
      const auto scen = qkt::build_scenario(cfg, seed);
      const fs::path out = cfg.output_dir;
      fs::create_directories(out);
      ordered_json summary = ordered_json::array();
      const std::size_t C = scen.data.train.num_classes;
      for (std::size_t i = 0; i < scen.models.size(); ++i) {
        const fs::path p = out / ("client" + std::to_string(i) + ".qktm");
        qkt::write_checkpoint_file(p, scen.models[i]);
        summary.push_back({{"client", i},
                           {"checkpoint", p.filename().string()},
                           {"digest", qkt::checkpoint_digest(scen.models[i])},
                           {"local_classes", scen.clients[i].local_classes()},
                           {"per_class_acc", accuracy_json(scen.pre_accuracy[i], C)}});
      }
      write_file(out / "pretrain.json", summary.dump(2) + "\n");
      std::cout << summary.dump(2) << "\n";
    } else if (*c_tr) {
      auto cfg = load(tr);
      keep_protocols(cfg, true);
      return run_and_summarize(cfg, transfer_ckpt);
    } else if (*c_base) {
      auto cfg = load(base);
      keep_protocols(cfg, false);
      return run_and_summarize(cfg, baseline_ckpt);
    } else if (*c_sweep) {
      return run_and_summarize(load(sweep), "");
    } else if (*c_eval) {
      const auto cfg = load(eval);
      const auto data = qkt::load_dataset(cfg.dataset, first_seed(cfg));
      const auto model = qkt::read_checkpoint_file(eval_ckpt);
      const auto acc = qkt::per_class_accuracy(model, data.test);
      ordered_json j = {{"checkpoint", eval_ckpt},
                        {"digest", qkt::checkpoint_digest(model)},
                        {"per_class_acc", accuracy_json(acc, data.test.num_classes)},
                        {"uniform_acc", qkt::uniform_accuracy(acc)}};
      if (!eval.out.empty()) write_file(fs::path(eval.out) / "evaluation.json", j.dump(2) + "\n");
      std::cout << j.dump(2) << "\n";
    } else if (*c_rep) {
      const auto rows = qkt::summarize(qkt::read_results_csv(results), group_by);
      const std::string table = qkt::summary_table(rows, group_by);
      if (!report_out.empty()) {
        write_file(fs::path(report_out) / "summary.csv", qkt::summary_csv(rows, group_by));
        write_file(fs::path(report_out) / "summary.txt", table);
      }
      std::cout << table;
    }
  } catch (const std::exception& e) {
    ordered_json err = {{"error", {{"type", error_type(e)}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return error_type(e) == "config_error" ? 2 : 1;
  }
  return 0;
}
