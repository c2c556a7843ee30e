#include "qkt/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace qkt {

PerClassAccuracy per_class_accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (labels.empty()) throw std::invalid_argument("per_class_accuracy: empty test set");
  if (predicted.size() != labels.size())
    throw std::invalid_argument("per_class_accuracy: prediction/label count mismatch");
  std::map<int, std::pair<std::size_t, std::size_t>> tally;  // hits, total
  for (std::size_t k = 0; k < labels.size(); ++k) {
    auto& t = tally[labels[k]];
    t.first += predicted[k] == labels[k] ? 1 : 0;
    ++t.second;
  }
  PerClassAccuracy acc;
  for (const auto& [c, t] : tally)
    acc[c] = static_cast<double>(t.first) / static_cast<double>(t.second);
  return acc;
}

PerClassAccuracy per_class_accuracy(const ModelParams& model, const Dataset& test) {
  if (test.size() == 0) throw std::invalid_argument("per_class_accuracy: empty test set");
  return per_class_accuracy(predict(model, test.features), test.labels);
}

std::map<int, double> average_accuracy_weights(const std::map<int, std::size_t>& local_counts,
                                               std::span<const int> query) {
  std::size_t total = 0;
  for (const auto& [c, n] : local_counts) total += n;
  std::map<int, double> w;
  for (const auto& [c, n] : local_counts)
    if (n > 0) w[c] = static_cast<double>(n) / static_cast<double>(total);
  for (int q : query) w[q] = 1.0;
  return w;
}

double average_accuracy(const PerClassAccuracy& acc,
                        const std::map<int, std::size_t>& local_counts,
                        std::span<const int> query) {
  double num = 0.0;
  double den = 0.0;
  for (const auto& [c, w] : average_accuracy_weights(local_counts, query)) {
    auto it = acc.find(c);
    if (it == acc.end()) continue;
    num += w * it->second;
    den += w;
  }
  if (den == 0.0) throw std::invalid_argument("average_accuracy: no local or query class with test data");
  return num / den;
}

namespace {

double lookup(const PerClassAccuracy& acc, int c, const char* what) {
  auto it = acc.find(c);
  if (it == acc.end())
    throw std::invalid_argument(std::string(what) + ": no accuracy for class " + std::to_string(c));
  return it->second;
}

}  // namespace

double query_acc_gain(const PerClassAccuracy& pre, const PerClassAccuracy& post,
                      std::span<const int> query) {
  if (query.empty()) throw std::invalid_argument("query_acc_gain: empty query set");
  double sum = 0.0;
  for (int q : query) sum += lookup(post, q, "query_acc_gain") - lookup(pre, q, "query_acc_gain");
  return sum / static_cast<double>(query.size());
}

double forgetting(const PerClassAccuracy& pre, const PerClassAccuracy& post,
                  std::span<const int> local_classes) {
  if (local_classes.empty()) return 0.0;
  double sum = 0.0;
  for (int c : local_classes)
    sum += std::min(0.0, lookup(post, c, "forgetting") - lookup(pre, c, "forgetting"));
  return sum / static_cast<double>(local_classes.size());
}

double uniform_accuracy(const PerClassAccuracy& acc) {
  if (acc.empty()) throw std::invalid_argument("uniform_accuracy: no classes");
  double sum = 0.0;
  for (const auto& [c, a] : acc) sum += a;
  return sum / static_cast<double>(acc.size());
}

double probe_mse(std::span<const double> predicted, std::span<const double> actual) {
  if (predicted.size() != actual.size() || predicted.empty())
    throw std::invalid_argument("probe_mse: length mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < predicted.size(); ++k) {
    const double d = predicted[k] - actual[k];
    s += d * d;
  }
  return s / static_cast<double>(predicted.size());
}

std::vector<double> normalized_distribution(const std::map<int, std::size_t>& counts,
                                            std::size_t num_classes) {
  std::vector<double> p(num_classes, 0.0);
  std::size_t total = 0;
  for (const auto& [c, n] : counts) total += n;
  if (total == 0) return p;
  for (const auto& [c, n] : counts)
    p.at(static_cast<std::size_t>(c)) = static_cast<double>(n) / static_cast<double>(total);
  return p;
}

MetricsReport make_report(const PerClassAccuracy& pre, const PerClassAccuracy& post,
                          const std::map<int, std::size_t>& local_counts,
                          std::span<const int> query, int comm_rounds) {
  MetricsReport r;
  r.query_classes.assign(query.begin(), query.end());
  std::sort(r.query_classes.begin(), r.query_classes.end());
  for (const auto& [c, n] : local_counts)
    if (n > 0 && !std::binary_search(r.query_classes.begin(), r.query_classes.end(), c))
      r.local_classes.push_back(c);
  r.per_class_acc_pre = pre;
  r.per_class_acc_post = post;
  r.weights = average_accuracy_weights(local_counts, query);
  r.avg_acc = average_accuracy(post, local_counts, query);
  r.uniform_acc = uniform_accuracy(post);
  r.query_acc_gain = query.empty() ? 0.0 : query_acc_gain(pre, post, query);
  r.forgetting = forgetting(pre, post, r.local_classes);
  r.comm_rounds = comm_rounds;
  return r;
}

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (k) s += ';';
    s += std::to_string(v[k]);
  }
  return s;
}

}  // namespace

std::string results_csv_header() {
  return "protocol,sweep_key,sweep_value,seed,client_id,query_classes,local_classes,avg_acc,"
         "query_acc_gain,forgetting,uniform_acc,comm_rounds";
}

std::string results_csv_row(const MetricsReport& r) {
  std::string row;
  row += r.protocol + ',' + r.sweep_key + ',' + fmt_double(r.sweep_value) + ',' +
         std::to_string(r.seed) + ',' + std::to_string(r.client_id) + ',' +
         join(r.query_classes) + ',' + join(r.local_classes) + ',' + fmt_double(r.avg_acc) +
         ',' + fmt_double(r.query_acc_gain) + ',' + fmt_double(r.forgetting) + ',' +
         fmt_double(r.uniform_acc) + ',' + std::to_string(r.comm_rounds);
  return row;
}

std::string report_json(const MetricsReport& r, std::size_t num_classes) {
  auto vec = [&](const PerClassAccuracy& acc) {
    nlohmann::ordered_json a = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < num_classes; ++c) {
      auto it = acc.find(static_cast<int>(c));
      if (it == acc.end())
        a.push_back(nullptr);
      else
        a.push_back(it->second);
    }
    return a;
  };
  nlohmann::ordered_json j;
  j["protocol"] = r.protocol;
  j["sweep_key"] = r.sweep_key;
  j["sweep_value"] = r.sweep_value;
  j["seed"] = r.seed;
  j["client_id"] = r.client_id;
  j["query_classes"] = r.query_classes;
  j["local_classes"] = r.local_classes;
  j["per_class_acc_pre"] = vec(r.per_class_acc_pre);
  j["per_class_acc_post"] = vec(r.per_class_acc_post);
  nlohmann::ordered_json w = nlohmann::ordered_json::object();
  for (const auto& [c, v] : r.weights) w[std::to_string(c)] = v;
  j["weights"] = w;
  j["avg_acc"] = r.avg_acc;
  j["uniform_acc"] = r.uniform_acc;
  j["query_acc_gain"] = r.query_acc_gain;
  j["forgetting"] = r.forgetting;
  j["comm_rounds"] = r.comm_rounds;
  return j.dump();
}

}  // namespace qkt
