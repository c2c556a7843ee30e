#include "qkt/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "qkt/checkpoint.hpp"
#include "qkt/rng.hpp"

namespace qkt {

using nlohmann::json;
using nlohmann::ordered_json;

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Local pretraining

ModelParams local_pretrain(const ClientDataset& client, const ModelParams& init,
                           const LocalTrainSpec& spec, std::uint64_t seed,
                           std::size_t* epochs_run) {
  const Dataset train = client.train();
  if (train.size() == 0)
    throw DataError("client " + std::to_string(client.client_id) + " has an empty train split");
  const Dataset val_split = client.val();
  const Dataset& val = val_split.size() > 0 ? val_split : train;

  ModelParams model = init;
  const FreezeMask freeze = FreezeMask::trainable(model);
  AdamState adam = AdamState::for_model(model, spec.adam);
  BatchLoss loss = [&](const ModelParams& m, std::span<const std::size_t> rows) {
    return supervised_loss_and_grads(m, train.batch(rows), freeze);
  };
  // Scored by validation accuracy; ties go to the lower validation loss.
  auto score = [&](const ModelParams& m) {
    const ForwardResult f = forward(m, val.features);
    std::size_t hits = 0;
    double nll = 0.0;
    for (std::size_t k = 0; k < val.size(); ++k) {
      const auto r = static_cast<Eigen::Index>(k);
      Eigen::Index arg = 0;
      f.probs.row(r).maxCoeff(&arg);
      hits += arg == val.labels[k] ? 1 : 0;
      nll -= std::log(std::max(f.probs(r, val.labels[k]), 1e-300));
    }
    const double n = static_cast<double>(val.size());
    return std::pair{static_cast<double>(hits) / n, nll / n};
  };

  ModelParams best = model;
  std::pair<double, double> best_score{-1.0, 0.0};
  std::size_t since_best = 0;
  std::size_t ran = 0;
  EpochCallback on_epoch = [&](std::size_t, const ModelParams& m, double) {
    ++ran;
    const auto sc = score(m);
    if (sc.first > best_score.first || (sc.first == best_score.first && sc.second < best_score.second)) {
      best_score = sc;
      best = m;
      since_best = 0;
    } else if (++since_best >= spec.patience) {
      return false;
    }
    return true;
  };
  train_epochs(model, train.size(), loss, adam, freeze, {spec.max_epochs, spec.batch_size}, seed,
               on_epoch);
  if (epochs_run) *epochs_run = ran;
  return ran == 0 ? model : best;
}

// ---------------------------------------------------------------------------
// Config

namespace {

std::string method_name(MethodKind k) {
  switch (k) {
    case MethodKind::transfer: return "transfer";
    case MethodKind::local: return "local";
    case MethodKind::fedavg: return "fedavg";
    case MethodKind::fedavg1: return "fedavg1";
    case MethodKind::ft_fedavg: return "ft_fedavg";
    case MethodKind::ensemble: return "ensemble";
  }
  return "unknown";
}

// Walks a JSON document, tracking the JSON pointer of the current node so
// every error names the offending value.
class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError((path_.empty() ? std::string("/") : path_) + ": " + msg);
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  Node at(const std::string& key) const { return Node(j_.at(key), path_ + "/" + key); }
  Node at(std::size_t i) const { return Node(j_.at(i), path_ + "/" + std::to_string(i)); }
  const json& raw() const { return j_; }
  const std::string& path() const { return path_; }

  void expect_object(std::initializer_list<const char*> allowed) const {
    if (!j_.is_object()) fail("expected an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!ok.count(it.key())) Node(it.value(), path_ + "/" + it.key()).fail("unknown key");
  }
  std::size_t array_size() const {
    if (!j_.is_array()) fail("expected an array");
    return j_.size();
  }

  double number() const {
    if (!j_.is_number()) fail("expected a number");
    const double v = j_.get<double>();
    if (!std::isfinite(v)) fail("expected a finite number");
    return v;
  }
  std::uint64_t uint() const {
    if (j_.is_number_unsigned()) return j_.get<std::uint64_t>();
    if (j_.is_number_integer()) {
      if (j_.get<std::int64_t>() < 0) fail("expected a non-negative integer");
      return static_cast<std::uint64_t>(j_.get<std::int64_t>());
    }
    fail("expected a non-negative integer");
  }
  bool boolean() const {
    if (!j_.is_boolean()) fail("expected true or false");
    return j_.get<bool>();
  }
  std::string string() const {
    if (!j_.is_string()) fail("expected a string");
    return j_.get<std::string>();
  }

  template <class T, class F>
  void opt(const std::string& key, T& out, F get) const {
    if (has(key)) out = get(at(key));
  }

 private:
  const json& j_;
  std::string path_;
};

double num(const Node& n) { return n.number(); }
std::size_t size(const Node& n) { return static_cast<std::size_t>(n.uint()); }

template <class F>
auto guarded(const Node& n, F f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    if (!what.empty() && what[0] == '/') throw;
    n.fail(what);
  }
}

void parse_adam(const Node& n, AdamConfig& adam) {
  n.opt("learning_rate", adam.learning_rate, num);
  n.opt("weight_decay", adam.weight_decay, num);
  if (!(adam.learning_rate > 0.0)) n.fail("learning_rate must be > 0");
  if (!(adam.weight_decay >= 0.0)) n.fail("weight_decay must be >= 0");
}

ProtocolSpec parse_protocol_spec(const Node& n) {
  ProtocolSpec p;
  std::string method;
  if (n.raw().is_string()) {
    method = n.string();
  } else {
    n.expect_object({"method", "name", "tau", "lambda", "alpha_kd", "temperature", "epochs",
                     "phase2_epochs", "noise_batch", "batch_size", "selective_mask_z",
                     "light_variant", "variable_epochs", "learning_rate", "weight_decay", "rounds",
                     "local_epochs", "finetune_epochs", "participants"});
    if (!n.has("method")) n.fail("missing required key 'method'");
    method = n.at("method").string();
  }
  if (method == "local") p.kind = MethodKind::local;
  else if (method == "fedavg") p.kind = MethodKind::fedavg;
  else if (method == "fedavg1") p.kind = MethodKind::fedavg1;
  else if (method == "ft_fedavg") p.kind = MethodKind::ft_fedavg;
  else if (method == "ensemble") p.kind = MethodKind::ensemble;
  else {
    p.kind = MethodKind::transfer;
    guarded(n, [&] { p.transfer.protocol = parse_protocol(method); return 0; });
  }
  p.name = method;
  if (!n.raw().is_object()) return p;

  n.opt("name", p.name, [](const Node& x) { return x.string(); });
  const bool fed = p.kind == MethodKind::fedavg || p.kind == MethodKind::fedavg1 ||
                   p.kind == MethodKind::ft_fedavg;
  const char* transfer_only[] = {"tau", "lambda", "alpha_kd", "temperature", "epochs",
                                 "phase2_epochs", "noise_batch", "selective_mask_z",
                                 "light_variant", "variable_epochs"};
  const char* fed_only[] = {"rounds", "local_epochs", "finetune_epochs", "participants"};
  if (p.kind != MethodKind::transfer)
    for (const char* k : transfer_only)
      if (n.has(k)) n.at(k).fail("not valid for method '" + method + "'");
  if (!fed)
    for (const char* k : fed_only)
      if (n.has(k)) n.at(k).fail("not valid for method '" + method + "'");

  if (p.kind == MethodKind::transfer) {
    TransferConfig& t = p.transfer;
    n.opt("tau", t.tau, num);
    n.opt("lambda", t.lambda, num);
    n.opt("alpha_kd", t.alpha_kd, num);
    n.opt("temperature", t.temperature, num);
    n.opt("epochs", t.epochs, size);
    if (n.has("phase2_epochs")) t.phase2_epochs = size(n.at("phase2_epochs"));
    n.opt("noise_batch", t.noise_batch, size);
    n.opt("batch_size", t.batch_size, size);
    if (n.has("selective_mask_z")) t.selective_mask_z = num(n.at("selective_mask_z"));
    if (n.has("light_variant")) {
      const Node lv = n.at("light_variant");
      guarded(lv, [&] { t.light_variant = parse_light_variant(lv.string()); return 0; });
    }
    n.opt("variable_epochs", t.variable_epochs, [](const Node& x) { return x.boolean(); });
    parse_adam(n, t.adam);
    guarded(n, [&] { t.validate(); return 0; });
  } else if (fed) {
    FedConfig& f = p.fed;
    n.opt("rounds", f.rounds, size);
    n.opt("local_epochs", f.local_epochs, size);
    if (n.has("finetune_epochs")) f.finetune_epochs = size(n.at("finetune_epochs"));
    if (n.has("participants")) {
      const Node a = n.at("participants");
      for (std::size_t i = 0; i < a.array_size(); ++i)
        f.participants.push_back(static_cast<int>(a.at(i).uint()));
    }
    n.opt("batch_size", f.batch_size, size);
    parse_adam(n, f.adam);
    guarded(n, [&] { f.validate(); return 0; });
  } else {
    if (n.has("batch_size") || n.has("learning_rate") || n.has("weight_decay"))
      n.fail("method '" + method + "' takes no training options");
  }
  return p;
}

const std::set<std::string>& scenario_sweep_keys() {
  static const std::set<std::string> k{"classes_per_client", "dirichlet_alpha", "num_clients"};
  return k;
}
const std::set<std::string>& transfer_sweep_keys() {
  static const std::set<std::string> k{"lambda", "tau", "alpha_kd", "temperature",
                                       "selective_mask_z", "epochs", "phase2_epochs",
                                       "noise_batch"};
  return k;
}
const std::set<std::string>& fed_sweep_keys() {
  static const std::set<std::string> k{"rounds", "local_epochs"};
  return k;
}

bool is_integer_key(const std::string& key) {
  return key == "classes_per_client" || key == "num_clients" || key == "epochs" ||
         key == "phase2_epochs" || key == "noise_batch" || key == "rounds" ||
         key == "local_epochs";
}

void validate_config(const ExperimentConfig& c) {
  if (c.protocols.empty()) throw ConfigError("/protocols: at least one protocol is required");
  if (c.seeds.empty()) throw ConfigError("/seeds: at least one seed is required");
  if (c.hidden.empty()) throw ConfigError("/model/hidden: at least one hidden layer is required");
  for (std::size_t i = 0; i < c.hidden.size(); ++i)
    if (c.hidden[i] == 0)
      throw ConfigError("/model/hidden/" + std::to_string(i) + ": width must be >= 1");
  if (c.local.max_epochs == 0) throw ConfigError("/local_training/max_epochs: must be >= 1");
  if (c.local.batch_size == 0) throw ConfigError("/local_training/batch_size: must be >= 1");
  for (std::size_t i = 0; i < c.query.clients.size(); ++i)
    if (c.query.clients[i] < 0 ||
        static_cast<std::size_t>(c.query.clients[i]) >= c.partition.num_clients)
      throw ConfigError("/query/clients/" + std::to_string(i) + ": client id " +
                        std::to_string(c.query.clients[i]) + " does not exist");
  for (std::size_t i = 0; i < c.protocols.size(); ++i)
    for (int p : c.protocols[i].fed.participants)
      if (p < 0 || static_cast<std::size_t>(p) >= c.partition.num_clients)
        throw ConfigError("/protocols/" + std::to_string(i) + "/participants: client id " +
                          std::to_string(p) + " does not exist");
  std::set<std::string> names;
  for (std::size_t i = 0; i < c.protocols.size(); ++i)
    if (!names.insert(c.protocols[i].name).second)
      throw ConfigError("/protocols/" + std::to_string(i) + "/name: duplicate protocol name '" +
                        c.protocols[i].name + "'");
  if (!(c.selection_fraction > 0.0 && c.selection_fraction < 1.0))
    throw ConfigError("/selection_fraction: must lie in (0, 1)");
  if (c.dataset.source == "csv" && (c.dataset.train_path.empty() || c.dataset.test_path.empty()))
    throw ConfigError("/dataset: csv source needs train_path and test_path");
  try {
    c.partition.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("/partition: ") + e.what());
  }
  if (c.dataset.source == "synthetic" &&
      c.partition.scheme == PartitionScheme::pathological &&
      c.partition.classes_per_client > c.dataset.synthetic.num_classes)
    throw ConfigError("/partition/classes_per_client: exceeds the number of classes");
  if (c.dataset.source == "synthetic" &&
      c.partition.scheme == PartitionScheme::pathological &&
      c.partition.num_clients * c.partition.classes_per_client < c.dataset.synthetic.num_classes)
    throw ConfigError("/partition: num_clients * classes_per_client = " +
                      std::to_string(c.partition.num_clients * c.partition.classes_per_client) +
                      " slots cannot cover " + std::to_string(c.dataset.synthetic.num_classes) +
                      " classes");
  if (!c.sweep.key.empty()) {
    if (c.sweep.values.empty()) throw ConfigError("/sweep/values: at least one value is required");
    for (double v : c.sweep.values) {
      try {
        (void)apply_sweep(c, c.sweep.key, v);
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("/sweep/values: ") + e.what());
      }
    }
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  ExperimentConfig c;
  const Node root(doc, "");
  root.expect_object({"dataset", "partition", "model", "local_training", "query", "protocols",
                      "sweep", "seeds", "output_dir", "selection_fraction", "save_checkpoints",
                      "write_instrumentation"});

  if (root.has("dataset")) {
    const Node d = root.at("dataset");
    d.expect_object({"source", "num_classes", "dims", "train_per_class", "test_per_class",
                     "cluster_spread", "center_scale", "train_path", "test_path"});
    d.opt("source", c.dataset.source, [](const Node& x) { return x.string(); });
    if (c.dataset.source != "synthetic" && c.dataset.source != "csv")
      d.at("source").fail("expected 'synthetic' or 'csv'");
    auto& s = c.dataset.synthetic;
    d.opt("num_classes", s.num_classes, size);
    d.opt("dims", s.dims, size);
    d.opt("train_per_class", s.train_per_class, size);
    d.opt("test_per_class", s.test_per_class, size);
    d.opt("cluster_spread", s.cluster_spread, num);
    d.opt("center_scale", s.center_scale, num);
    d.opt("train_path", c.dataset.train_path, [](const Node& x) { return x.string(); });
    d.opt("test_path", c.dataset.test_path, [](const Node& x) { return x.string(); });
    if (s.num_classes < 2) d.fail("num_classes must be >= 2");
    if (s.dims == 0) d.fail("dims must be >= 1");
    if (s.train_per_class == 0 || s.test_per_class == 0) d.fail("per-class sample counts must be >= 1");
    if (!(s.cluster_spread >= 0.0)) d.fail("cluster_spread must be >= 0");
  }
  if (root.has("partition")) {
    const Node p = root.at("partition");
    p.expect_object({"scheme", "num_clients", "classes_per_client", "dirichlet_alpha",
                     "low_fraction", "high_fraction", "val_fraction", "test_fraction"});
    if (p.has("scheme")) {
      const Node s = p.at("scheme");
      guarded(s, [&] { c.partition.scheme = parse_partition_scheme(s.string()); return 0; });
    }
    p.opt("num_clients", c.partition.num_clients, size);
    p.opt("classes_per_client", c.partition.classes_per_client, size);
    p.opt("dirichlet_alpha", c.partition.dirichlet_alpha, num);
    p.opt("low_fraction", c.partition.low_fraction, num);
    p.opt("high_fraction", c.partition.high_fraction, num);
    p.opt("val_fraction", c.partition.val_fraction, num);
    p.opt("test_fraction", c.partition.test_fraction, num);
  }
  if (root.has("model")) {
    const Node m = root.at("model");
    m.expect_object({"hidden"});
    if (m.has("hidden")) {
      const Node h = m.at("hidden");
      c.hidden.clear();
      for (std::size_t i = 0; i < h.array_size(); ++i) c.hidden.push_back(size(h.at(i)));
    }
  }
  if (root.has("local_training")) {
    const Node l = root.at("local_training");
    l.expect_object({"max_epochs", "patience", "batch_size", "learning_rate", "weight_decay"});
    l.opt("max_epochs", c.local.max_epochs, size);
    l.opt("patience", c.local.patience, size);
    l.opt("batch_size", c.local.batch_size, size);
    parse_adam(l, c.local.adam);
  }
  if (root.has("query")) {
    const Node q = root.at("query");
    q.expect_object({"mode", "sample_threshold", "clients"});
    if (q.has("mode")) {
      const Node m = q.at("mode");
      guarded(m, [&] { c.query.mode = parse_query_mode(m.string()); return 0; });
    }
    q.opt("sample_threshold", c.query.sample_threshold, size);
    if (q.has("clients")) {
      const Node a = q.at("clients");
      for (std::size_t i = 0; i < a.array_size(); ++i)
        c.query.clients.push_back(static_cast<int>(a.at(i).uint()));
    }
  }
  if (root.has("protocols")) {
    const Node a = root.at("protocols");
    for (std::size_t i = 0; i < a.array_size(); ++i) c.protocols.push_back(parse_protocol_spec(a.at(i)));
  }
  if (root.has("sweep")) {
    const Node s = root.at("sweep");
    s.expect_object({"key", "values"});
    if (!s.has("key")) s.fail("missing required key 'key'");
    c.sweep.key = s.at("key").string();
    const auto& k = c.sweep.key;
    if (!scenario_sweep_keys().count(k) && !transfer_sweep_keys().count(k) && !fed_sweep_keys().count(k))
      s.at("key").fail("unknown sweep key '" + k + "'");
    if (!s.has("values")) s.fail("missing required key 'values'");
    const Node v = s.at("values");
    for (std::size_t i = 0; i < v.array_size(); ++i) {
      const double x = v.at(i).number();
      if (is_integer_key(k) && (x < 0 || x != std::floor(x)))
        v.at(i).fail("sweep key '" + k + "' takes non-negative integers");
      c.sweep.values.push_back(x);
    }
  }
  if (root.has("seeds")) {
    const Node s = root.at("seeds");
    c.seeds.clear();
    for (std::size_t i = 0; i < s.array_size(); ++i) c.seeds.push_back(s.at(i).uint());
  }
  root.opt("output_dir", c.output_dir, [](const Node& x) { return x.string(); });
  root.opt("selection_fraction", c.selection_fraction, num);
  root.opt("save_checkpoints", c.save_checkpoints, [](const Node& x) { return x.boolean(); });
  root.opt("write_instrumentation", c.write_instrumentation, [](const Node& x) { return x.boolean(); });
  validate_config(c);
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string ExperimentConfig::canonical_json() const {
  ordered_json j;
  const auto& s = dataset.synthetic;
  j["dataset"] = {{"source", dataset.source},
                  {"num_classes", s.num_classes},
                  {"dims", s.dims},
                  {"train_per_class", s.train_per_class},
                  {"test_per_class", s.test_per_class},
                  {"cluster_spread", s.cluster_spread},
                  {"center_scale", s.center_scale},
                  {"train_path", dataset.train_path},
                  {"test_path", dataset.test_path}};
  j["partition"] = {{"scheme", to_string(partition.scheme)},
                    {"num_clients", partition.num_clients},
                    {"classes_per_client", partition.classes_per_client},
                    {"dirichlet_alpha", partition.dirichlet_alpha},
                    {"low_fraction", partition.low_fraction},
                    {"high_fraction", partition.high_fraction},
                    {"val_fraction", partition.val_fraction},
                    {"test_fraction", partition.test_fraction}};
  j["model"] = {{"hidden", hidden}};
  j["local_training"] = {{"max_epochs", local.max_epochs},
                         {"patience", local.patience},
                         {"batch_size", local.batch_size},
                         {"learning_rate", local.adam.learning_rate},
                         {"weight_decay", local.adam.weight_decay}};
  j["query"] = {{"mode", to_string(query.mode)},
                {"sample_threshold", query.sample_threshold},
                {"clients", query.clients}};
  ordered_json protos = ordered_json::array();
  for (const auto& p : protocols) {
    ordered_json o;
    o["name"] = p.name;
    if (p.kind == MethodKind::transfer) {
      const auto& t = p.transfer;
      o["method"] = to_string(t.protocol);
      o["tau"] = t.tau;
      o["lambda"] = t.lambda;
      o["alpha_kd"] = t.alpha_kd;
      o["temperature"] = t.temperature;
      o["epochs"] = t.epochs;
      o["phase2_epochs"] = t.effective_phase2_epochs();
      o["noise_batch"] = t.noise_batch;
      o["batch_size"] = t.batch_size;
      if (t.selective_mask_z) o["selective_mask_z"] = *t.selective_mask_z;
      o["light_variant"] = "local";
      o["variable_epochs"] = t.variable_epochs;
      o["learning_rate"] = t.adam.learning_rate;
      o["weight_decay"] = t.adam.weight_decay;
    } else {
      o["method"] = method_name(p.kind);
      if (p.kind != MethodKind::local && p.kind != MethodKind::ensemble) {
        const auto& f = p.fed;
        o["rounds"] = p.kind == MethodKind::fedavg1 ? std::size_t{1} : f.rounds;
        o["local_epochs"] = f.local_epochs;
        o["finetune_epochs"] = f.effective_finetune_epochs();
        o["participants"] = f.participants;
        o["batch_size"] = f.batch_size;
        o["learning_rate"] = f.adam.learning_rate;
        o["weight_decay"] = f.adam.weight_decay;
      }
    }
    protos.push_back(o);
  }
  j["protocols"] = protos;
  if (!sweep.key.empty()) j["sweep"] = {{"key", sweep.key}, {"values", sweep.values}};
  j["seeds"] = seeds;
  j["selection_fraction"] = selection_fraction;
  return j.dump();
}

std::string ExperimentConfig::hash() const {
  const std::string s = canonical_json();
  return fnv1a_hex(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

ExperimentConfig apply_sweep(const ExperimentConfig& config, const std::string& key, double value) {
  ExperimentConfig c = config;
  const auto as_size = [&] { return static_cast<std::size_t>(std::llround(value)); };
  if (key == "classes_per_client") c.partition.classes_per_client = as_size();
  else if (key == "dirichlet_alpha") c.partition.dirichlet_alpha = value;
  else if (key == "num_clients") c.partition.num_clients = as_size();
  else if (transfer_sweep_keys().count(key)) {
    for (auto& p : c.protocols) {
      if (p.kind != MethodKind::transfer) continue;
      auto& t = p.transfer;
      if (key == "lambda") t.lambda = value;
      else if (key == "tau") t.tau = value;
      else if (key == "alpha_kd") t.alpha_kd = value;
      else if (key == "temperature") t.temperature = value;
      else if (key == "selective_mask_z") t.selective_mask_z = value;
      else if (key == "epochs") t.epochs = as_size();
      else if (key == "phase2_epochs") t.phase2_epochs = as_size();
      else if (key == "noise_batch") t.noise_batch = as_size();
      t.validate();
    }
  } else if (fed_sweep_keys().count(key)) {
    for (auto& p : c.protocols) {
      if (key == "rounds") p.fed.rounds = as_size();
      else p.fed.local_epochs = as_size();
      if (p.kind == MethodKind::fedavg || p.kind == MethodKind::ft_fedavg) p.fed.validate();
    }
  } else {
    throw ConfigError("unknown sweep key '" + key + "'");
  }
  c.partition.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Scenario

GlobalDataset load_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.source == "csv") {
    GlobalDataset g;
    g.train = read_dataset_csv(spec.train_path);
    g.test = read_dataset_csv(spec.test_path, g.train.num_classes);
    const std::size_t C = std::max(g.train.num_classes, g.test.num_classes);
    g.train.num_classes = g.test.num_classes = C;
    if (g.train.dims() != g.test.dims())
      throw DataError("train and test CSV files have different feature counts");
    return g;
  }
  SyntheticSpec s = spec.synthetic;
  s.seed = derive_seed(seed, Stream::data);
  return generate_synthetic(s);
}

namespace {

// Stratified split of `data`: `fraction` of every class goes to the first part.
std::pair<Dataset, Dataset> stratified_split(const Dataset& data, double fraction, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t r = 0; r < data.size(); ++r) by_class[data.labels[r]].push_back(r);
  Rng rng(seed);
  std::vector<std::size_t> a, b;
  for (auto& [c, rows] : by_class) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(rows.size())));
    a.insert(a.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(k));
    b.insert(b.end(), rows.begin() + static_cast<std::ptrdiff_t>(k), rows.end());
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {data.subset(a), data.subset(b)};
}

bool wants_selection(const ExperimentConfig& c) {
  return std::any_of(c.protocols.begin(), c.protocols.end(), [](const ProtocolSpec& p) {
    return p.kind == MethodKind::transfer && p.transfer.variable_epochs;
  });
}

fs::path checkpoint_path(const fs::path& dir, std::size_t client) {
  return dir / ("client" + std::to_string(client) + ".qktm");
}

}  // namespace

Scenario build_scenario(const ExperimentConfig& config, std::uint64_t seed,
                        const fs::path& checkpoint_dir) {
  Scenario s;
  s.data = load_dataset(config.dataset, seed);
  if (wants_selection(config)) {
    auto [sel, test] = stratified_split(s.data.test, config.selection_fraction,
                                        derive_seed(seed, Stream::data, {1}));
    s.selection = std::move(sel);
    s.data.test = std::move(test);
  }
  PartitionSpec ps = config.partition;
  ps.seed = derive_seed(seed, Stream::partition);
  s.clients = partition(s.data.train, ps);
  const std::size_t C = s.data.train.num_classes;
  const std::size_t d = s.data.train.dims();
  for (std::size_t i = 0; i < s.clients.size(); ++i) {
    ModelParams m;
    if (!checkpoint_dir.empty()) {
      m = read_checkpoint_file(checkpoint_path(checkpoint_dir, i));
      if (m.input_dim() != d || m.num_classes() != C)
        throw ShapeError("checkpoint for client " + std::to_string(i) +
                         " does not match the dataset shape");
    } else {
      const ModelParams init =
          make_mlp(d, config.hidden, C, derive_seed(seed, Stream::init, {i}));
      m = local_pretrain(s.clients[i], init, config.local,
                         derive_seed(seed, Stream::training, {i}));
    }
    s.pre_accuracy.push_back(per_class_accuracy(m, s.data.test));
    s.models.push_back(std::move(m));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Experiment loop

namespace {

std::string fmt_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

PerClassAccuracy accuracy_of(const std::vector<int>& predicted, const Dataset& test) {
  return per_class_accuracy(predicted, test.labels);
}

struct SeedContext {
  const ExperimentConfig& config;
  const RunOptions& options;
  RunRecord& record;
  fs::path out_dir;
};

void log_line(const RunOptions& o, const std::string& s) {
  if (o.log) o.log(s);
}

void run_value(SeedContext& ctx, const ExperimentConfig& cfg, const Scenario& scen,
               const std::string& sweep_key, double sweep_value) {
  const std::uint64_t seed = ctx.record.seed;
  std::vector<int> students = cfg.query.clients;
  if (students.empty())
    for (std::size_t i = 0; i < scen.clients.size(); ++i) students.push_back(static_cast<int>(i));

  std::map<int, QuerySpec> queries;
  for (int sid : students) {
    try {
      queries[sid] = select_query(scen.clients[static_cast<std::size_t>(sid)], cfg.query.mode,
                                  cfg.query.sample_threshold,
                                  derive_seed(seed, Stream::query, {static_cast<std::uint64_t>(sid)}));
      for (int q : queries[sid].query_classes)
        if (scen.clients[static_cast<std::size_t>(sid)].count(q) > 0)
          log_line(ctx.options, "seed " + std::to_string(seed) + ": client " + std::to_string(sid) +
                                    " queries class " + std::to_string(q) +
                                    " which it also holds; weighted as a query class");
    } catch (const std::exception& e) {
      ctx.record.errors.push_back("client " + std::to_string(sid) + ": " + e.what());
      log_line(ctx.options, "seed " + std::to_string(seed) + ": " + ctx.record.errors.back());
    }
  }

  std::vector<std::string> digests;
  for (const auto& m : scen.models) digests.push_back(checkpoint_digest(m));

  const std::string tag = sweep_key.empty() ? "" : "_" + sweep_key + "-" + fmt_value(sweep_value);
  for (const auto& proto : cfg.protocols) {
    for (std::size_t i = 0; i < scen.models.size(); ++i)
      if (checkpoint_digest(scen.models[i]) != digests[i])
        throw std::logic_error("pretrained model " + std::to_string(i) + " changed between protocols");

    auto emit = [&](int sid, const PerClassAccuracy& post, int comm) {
      const auto& client = scen.clients[static_cast<std::size_t>(sid)];
      const auto& q = queries.at(sid);
      MetricsReport r = make_report(scen.pre_accuracy[static_cast<std::size_t>(sid)], post,
                                    client.train_class_counts(), q.query_classes, comm);
      r.protocol = proto.name;
      r.sweep_key = sweep_key;
      r.sweep_value = sweep_value;
      r.seed = seed;
      r.client_id = sid;
      ctx.record.reports.push_back(std::move(r));
    };

    switch (proto.kind) {
      case MethodKind::local:
        for (const auto& [sid, q] : queries) emit(sid, scen.pre_accuracy[static_cast<std::size_t>(sid)], 0);
        break;
      case MethodKind::ensemble: {
        const auto post = accuracy_of(ensemble_classify(scen.models, scen.data.test.features), scen.data.test);
        for (const auto& [sid, q] : queries) emit(sid, post, 1);
        break;
      }
      case MethodKind::fedavg:
      case MethodKind::fedavg1:
      case MethodKind::ft_fedavg: {
        const ModelParams init = make_mlp(scen.data.train.dims(), cfg.hidden,
                                          scen.data.train.num_classes,
                                          derive_seed(seed, Stream::federated));
        const std::vector<ModelParams> start{init};
        const std::uint64_t fseed = derive_seed(seed, Stream::federated, {1});
        if (proto.kind == MethodKind::ft_fedavg) {
          const auto res = ft_fedavg(scen.clients, start, proto.fed, fseed);
          for (const auto& [sid, q] : queries)
            emit(sid, per_class_accuracy(res.client_models[static_cast<std::size_t>(sid)], scen.data.test),
                 res.fed.comm_rounds);
        } else {
          const auto res = proto.kind == MethodKind::fedavg1
                               ? fedavg1(scen.clients, start, proto.fed, fseed)
                               : fedavg(scen.clients, start, proto.fed, fseed);
          const auto post = per_class_accuracy(res.global, scen.data.test);
          for (const auto& [sid, q] : queries) emit(sid, post, res.comm_rounds);
        }
        break;
      }
      case MethodKind::transfer: {
        for (const auto& [sid, q] : queries) {
          const auto& client = scen.clients[static_cast<std::size_t>(sid)];
          QueryJob job{sid, q.query_classes, proto.transfer,
                       derive_seed(seed, Stream::transfer, {static_cast<std::uint64_t>(sid)})};
          std::optional<EpochSelector> selector;
          if (proto.transfer.variable_epochs)
            selector = EpochSelector{scen.selection, client.train_class_counts(), q.query_classes};
          try {
            TransferResult res = run_protocol(job, scen.models, client, selector ? &*selector : nullptr);
            if (res.trace.ran_phase2 && !res.trace.extractor_unchanged_in_phase2)
              throw std::logic_error("feature extractor changed during phase 2");
            emit(sid, per_class_accuracy(res.student, scen.data.test), res.comm_rounds);
            if (ctx.options.on_trace) ctx.options.on_trace(ctx.record.reports.back(), res.trace);
            if (ctx.options.write_outputs && cfg.write_instrumentation) {
              const fs::path p = ctx.out_dir / "instrumentation" /
                                 ("seed" + std::to_string(seed)) /
                                 (proto.name + tag + "_client" + std::to_string(sid) + ".jsonl");
              write_text(p, res.trace.to_jsonl());
              ctx.record.instrumentation_paths.push_back(p.string());
            }
          } catch (const NoCompetentTeacherError& e) {
            ctx.record.errors.push_back(proto.name + tag + " client " + std::to_string(sid) + ": " + e.what());
            log_line(ctx.options, "seed " + std::to_string(seed) + ": " + ctx.record.errors.back());
          }
        }
        break;
      }
    }
  }
}

std::string run_json(const RunRecord& r, std::size_t num_classes) {
  ordered_json j;
  j["config_hash"] = r.config_hash;
  j["seed"] = r.seed;
  j["comm_rounds"] = ordered_json::object();
  ordered_json reports = ordered_json::array();
  for (const auto& m : r.reports) {
    reports.push_back(ordered_json::parse(report_json(m, num_classes)));
    j["comm_rounds"][m.protocol] = m.comm_rounds;
  }
  j["checkpoint_digests"] = r.checkpoint_digests;
  j["errors"] = r.errors;
  j["reports"] = reports;
  return j.dump(2) + "\n";
}

}  // namespace

std::vector<RunRecord> run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  std::vector<RunRecord> records;
  const fs::path out_dir = config.output_dir;
  const std::string hash = config.hash();
  const bool scenario_sweep = scenario_sweep_keys().count(config.sweep.key) > 0;
  std::vector<std::pair<std::string, double>> values;
  if (config.sweep.key.empty())
    values.push_back({"", 0.0});
  else
    for (double v : config.sweep.values) values.push_back({config.sweep.key, v});

  for (std::uint64_t seed : config.seeds) {
    const auto t0 = std::chrono::steady_clock::now();
    RunRecord rec;
    rec.config_hash = hash;
    rec.seed = seed;
    SeedContext ctx{config, options, rec, out_dir};
    std::size_t num_classes = 0;
    try {
      std::optional<Scenario> shared;
      for (const auto& [key, value] : values) {
        const ExperimentConfig cfg = key.empty() ? config : apply_sweep(config, key, value);
        std::optional<Scenario> own;
        if (scenario_sweep) {
          own = build_scenario(cfg, seed, options.checkpoint_dir);
        } else if (!shared) {
          shared = build_scenario(cfg, seed, options.checkpoint_dir);
        }
        const Scenario& scen = scenario_sweep ? *own : *shared;
        num_classes = scen.data.train.num_classes;
        if (scenario_sweep || rec.checkpoint_digests.empty()) {
          for (std::size_t i = 0; i < scen.models.size(); ++i) {
            rec.checkpoint_digests.push_back(checkpoint_digest(scen.models[i]));
            if (options.write_outputs && config.save_checkpoints) {
              fs::path dir = out_dir / "checkpoints" / ("seed" + std::to_string(seed));
              if (scenario_sweep) dir /= key + "-" + fmt_value(value);
              fs::create_directories(dir);
              write_checkpoint_file(checkpoint_path(dir, i), scen.models[i]);
            }
          }
          if (options.write_outputs) {
            fs::path p = out_dir / "partitions" / ("seed" + std::to_string(seed) +
                                                   (scenario_sweep ? "_" + key + "-" + fmt_value(value) : "") +
                                                   ".json");
            write_text(p, partition_manifest(scen.clients) + "\n");
          }
        }
        log_line(options, "seed " + std::to_string(seed) +
                              (key.empty() ? "" : " " + key + "=" + fmt_value(value)) +
                              ": scenario ready");
        run_value(ctx, cfg, scen, key, value);
      }
    } catch (const std::exception& e) {
      rec.errors.push_back(std::string("seed aborted: ") + e.what());
      log_line(options, "seed " + std::to_string(seed) + ": " + rec.errors.back());
    }
    rec.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (options.write_outputs)
      write_text(out_dir / "runs" / ("seed" + std::to_string(seed) + ".json"), run_json(rec, num_classes));
    records.push_back(std::move(rec));
  }

  if (options.write_outputs) {
    write_text(out_dir / "results.csv", results_csv(records));
    std::vector<MetricsReport> all;
    for (const auto& r : records) all.insert(all.end(), r.reports.begin(), r.reports.end());
    const std::vector<std::string> group{"protocol", "sweep_key", "sweep_value"};
    const auto rows = summarize(all, group);
    write_text(out_dir / "summary.csv", summary_csv(rows, group));
    write_text(out_dir / "summary.txt", summary_table(rows, group));
    write_text(out_dir / "config.json", config.canonical_json() + "\n");
  }
  return records;
}

std::string results_csv(const std::vector<RunRecord>& records) {
  std::string s = results_csv_header() + "\n";
  for (const auto& r : records)
    for (const auto& m : r.reports) s += results_csv_row(m) + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::string group_value(const MetricsReport& r, const std::string& key) {
  if (key == "protocol") return r.protocol;
  if (key == "sweep_key") return r.sweep_key;
  if (key == "sweep_value") return fmt_value(r.sweep_value);
  if (key == "client_id") return std::to_string(r.client_id);
  if (key == "seed") return std::to_string(r.seed);
  throw ConfigError("unknown group_by column '" + key + "'");
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace

std::vector<SummaryRow> summarize(const std::vector<MetricsReport>& reports,
                                  const std::vector<std::string>& group_by) {
  struct Acc {
    double avg = 0, gain = 0, forget = 0, uni = 0;
    std::size_t n = 0;
  };
  // group -> seed -> client-level sums; insertion order of groups is kept
  std::vector<std::vector<std::string>> order;
  std::map<std::vector<std::string>, std::map<std::uint64_t, Acc>> groups;
  for (const auto& r : reports) {
    std::vector<std::string> g;
    for (const auto& k : group_by) g.push_back(group_value(r, k));
    if (!groups.count(g)) order.push_back(g);
    Acc& a = groups[g][r.seed];
    a.avg += r.avg_acc;
    a.gain += r.query_acc_gain;
    a.forget += r.forgetting;
    a.uni += r.uniform_acc;
    ++a.n;
  }
  std::vector<SummaryRow> rows;
  for (const auto& g : order) {
    std::vector<double> avg, gain, forget, uni;
    for (const auto& [seed, a] : groups[g]) {
      const double n = static_cast<double>(a.n);
      avg.push_back(a.avg / n);
      gain.push_back(a.gain / n);
      forget.push_back(a.forget / n);
      uni.push_back(a.uni / n);
    }
    SummaryRow row;
    row.group = g;
    row.seeds = avg.size();
    std::tie(row.avg_acc_mean, row.avg_acc_std) = mean_std(avg);
    std::tie(row.query_acc_gain_mean, row.query_acc_gain_std) = mean_std(gain);
    std::tie(row.forgetting_mean, row.forgetting_std) = mean_std(forget);
    std::tie(row.uniform_acc_mean, row.uniform_acc_std) = mean_std(uni);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string summary_csv(const std::vector<SummaryRow>& rows, const std::vector<std::string>& group_by) {
  std::string s;
  for (const auto& k : group_by) s += k + ",";
  s += "seeds,avg_acc_mean,avg_acc_std,query_acc_gain_mean,query_acc_gain_std,forgetting_mean,"
       "forgetting_std,uniform_acc_mean,uniform_acc_std\n";
  char buf[64];
  auto f = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    for (const auto& g : r.group) s += g + ",";
    s += std::to_string(r.seeds) + "," + f(r.avg_acc_mean) + "," + f(r.avg_acc_std) + "," +
         f(r.query_acc_gain_mean) + "," + f(r.query_acc_gain_std) + "," + f(r.forgetting_mean) +
         "," + f(r.forgetting_std) + "," + f(r.uniform_acc_mean) + "," + f(r.uniform_acc_std) + "\n";
  }
  return s;
}

std::string summary_table(const std::vector<SummaryRow>& rows, const std::vector<std::string>& group_by) {
  std::vector<std::string> header = group_by;
  for (const char* h : {"seeds", "avg_acc", "query_gain", "forgetting", "uniform_acc"}) header.push_back(h);
  std::vector<std::vector<std::string>> cells{header};
  char buf[64];
  auto pm = [&](double m, double sd) {
    std::snprintf(buf, sizeof buf, "%.2f +- %.2f", 100.0 * m, 100.0 * sd);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    std::vector<std::string> line = r.group;
    line.push_back(std::to_string(r.seeds));
    line.push_back(pm(r.avg_acc_mean, r.avg_acc_std));
    line.push_back(pm(r.query_acc_gain_mean, r.query_acc_gain_std));
    line.push_back(pm(r.forgetting_mean, r.forgetting_std));
    line.push_back(pm(r.uniform_acc_mean, r.uniform_acc_std));
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t k = 0; k < line.size(); ++k) width[k] = std::max(width[k], line[k].size());
  std::string s;
  for (const auto& line : cells) {
    for (std::size_t k = 0; k < line.size(); ++k) {
      s += line[k];
      if (k + 1 < line.size()) s += std::string(width[k] - line[k].size() + 2, ' ');
    }
    s += "\n";
  }
  return s;
}

std::vector<MetricsReport> read_results_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open results file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != results_csv_header())
    throw DataError(path.string() + ": unexpected header, expected '" + results_csv_header() + "'");
  auto ints = [](const std::string& s) {
    std::vector<int> v;
    std::stringstream ss(s);
    std::string x;
    while (std::getline(ss, x, ';'))
      if (!x.empty()) v.push_back(std::stoi(x));
    return v;
  };
  std::vector<MetricsReport> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.push_back("");
    if (f.size() != 12)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 12 fields, got " +
                      std::to_string(f.size()));
    try {
      MetricsReport r;
      r.protocol = f[0];
      r.sweep_key = f[1];
      r.sweep_value = std::stod(f[2]);
      r.seed = std::stoull(f[3]);
      r.client_id = std::stoi(f[4]);
      r.query_classes = ints(f[5]);
      r.local_classes = ints(f[6]);
      r.avg_acc = std::stod(f[7]);
      r.query_acc_gain = std::stod(f[8]);
      r.forgetting = std::stod(f[9]);
      r.uniform_acc = std::stod(f[10]);
      r.comm_rounds = std::stoi(f[11]);
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return out;
}

}  // namespace qkt
