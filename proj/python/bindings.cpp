// Python bindings: models, synthetic data, metrics and the experiment runner.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "qkt/checkpoint.hpp"
#include "qkt/harness.hpp"
#include "qkt/metrics.hpp"
#include "qkt/transfer.hpp"

namespace py = pybind11;
using namespace qkt;

namespace {

py::dict report_dict(const MetricsReport& r) {
  py::dict d;
  d["protocol"] = r.protocol;
  d["sweep_key"] = r.sweep_key;
  d["sweep_value"] = r.sweep_value;
  d["seed"] = r.seed;
  d["client_id"] = r.client_id;
  d["query_classes"] = r.query_classes;
  d["local_classes"] = r.local_classes;
  d["per_class_acc_pre"] = r.per_class_acc_pre;
  d["per_class_acc_post"] = r.per_class_acc_post;
  d["avg_acc"] = r.avg_acc;
  d["uniform_acc"] = r.uniform_acc;
  d["query_acc_gain"] = r.query_acc_gain;
  d["forgetting"] = r.forgetting;
  d["comm_rounds"] = r.comm_rounds;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Query-based knowledge transfer simulator";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<NoCompetentTeacherError>(m, "NoCompetentTeacherError", PyExc_RuntimeError);

  py::class_<ModelParams>(m, "Model")
      .def_property_readonly("input_dim", &ModelParams::input_dim)
      .def_property_readonly("num_classes", &ModelParams::num_classes)
      .def_property_readonly("num_layers", &ModelParams::num_layers)
      .def_property_readonly("parameter_count", &ModelParams::parameter_count)
      .def("predict_proba",
           [](const ModelParams& model, const Matrix& x, double temperature) {
             return forward(model, x, temperature).probs;
           },
           py::arg("x"), py::arg("temperature") = 1.0)
      .def("predict", [](const ModelParams& model, const Matrix& x) { return predict(model, x); })
      .def("digest", [](const ModelParams& model) { return checkpoint_digest(model); })
      .def("save", [](const ModelParams& model, const std::filesystem::path& p) {
        write_checkpoint_file(p, model);
      })
      .def("__eq__", [](const ModelParams& a, const ModelParams& b) { return bitwise_equal(a, b); });

  m.def("make_mlp",
        [](std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t num_classes,
           std::uint64_t seed) { return make_mlp(input_dim, hidden, num_classes, seed); },
        py::arg("input_dim"), py::arg("hidden"), py::arg("num_classes"), py::arg("seed"));
  m.def("load_model", [](const std::filesystem::path& p) { return read_checkpoint_file(p); });

  m.def("generate_synthetic",
        [](std::size_t num_classes, std::size_t dims, std::size_t train_per_class,
           std::size_t test_per_class, std::uint64_t seed) {
          SyntheticSpec s;
          s.num_classes = num_classes;
          s.dims = dims;
          s.train_per_class = train_per_class;
          s.test_per_class = test_per_class;
          s.seed = seed;
          const GlobalDataset g = generate_synthetic(s);
          return py::make_tuple(g.train.features, g.train.labels, g.test.features, g.test.labels);
        },
        py::arg("num_classes") = 10, py::arg("dims") = 8, py::arg("train_per_class") = 600,
        py::arg("test_per_class") = 100, py::arg("seed") = 0,
        "Returns (x_train, y_train, x_test, y_test).");

  m.def("probe",
        [](const ModelParams& model, std::size_t noise_batch, std::uint64_t seed) {
          return probe_teacher(model, noise_batch, model.input_dim(), seed).avg_probs;
        },
        py::arg("model"), py::arg("noise_batch") = 20, py::arg("seed") = 0,
        "Mean softmax output over standard-normal inputs.");
  m.def("build_mask",
        [](std::vector<int> query, std::vector<int> local, double lambda, std::size_t num_classes) {
          return build_mask(0, query, local, lambda, num_classes).weights;
        },
        py::arg("query"), py::arg("local_classes"), py::arg("lam"), py::arg("num_classes"));

  m.def("average_accuracy",
        [](const PerClassAccuracy& acc, const std::map<int, std::size_t>& counts,
           std::vector<int> query) { return average_accuracy(acc, counts, query); });
  m.def("query_acc_gain", [](const PerClassAccuracy& pre, const PerClassAccuracy& post,
                             std::vector<int> query) { return query_acc_gain(pre, post, query); });
  m.def("forgetting", [](const PerClassAccuracy& pre, const PerClassAccuracy& post,
                         std::vector<int> local) { return forgetting(pre, post, local); });
  m.def("uniform_accuracy", &uniform_accuracy);

  m.def("config_hash", [](const std::string& text) { return parse_config(text).hash(); });
  m.def("canonical_config", [](const std::string& text) { return parse_config(text).canonical_json(); });
  m.def("run_experiment",
        [](const std::string& config_json, bool write_outputs,
           std::optional<std::string> output_dir) {
          ExperimentConfig cfg = parse_config(config_json);
          if (output_dir) cfg.output_dir = *output_dir;
          RunOptions opts;
          opts.write_outputs = write_outputs;
          std::vector<RunRecord> records;
          {
            py::gil_scoped_release release;
            records = run_experiment(cfg, opts);
          }
          py::list rows, errors;
          for (const auto& rec : records) {
            for (const auto& r : rec.reports) rows.append(report_dict(r));
            for (const auto& e : rec.errors) errors.append(e);
          }
          return py::make_tuple(rows, errors);
        },
        py::arg("config_json"), py::arg("write_outputs") = false, py::arg("output_dir") = py::none(),
        "Runs a JSON config; returns (report rows, logged failures).");
}
