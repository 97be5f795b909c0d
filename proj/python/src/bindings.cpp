#include <string>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "smartjm/errors.hpp"
#include "smartjm/harness.hpp"
#include "smartjm/io.hpp"
#include "smartjm/iptw.hpp"
#include "smartjm/mcb.hpp"
#include "smartjm/parallel.hpp"

namespace py = pybind11;
using namespace smartjm;
using nlohmann::json;

namespace {

// Subjects held on the C++ side between calls.
struct Dataset {
  std::vector<SubjectRecord> subjects;
};

StudyConfig config_from(const std::string& text) {
  return study_config_from_json(text.empty() ? json::object() : json::parse(text));
}

std::string dump(const json& j) { return j.dump(); }

py::dict subject_dict(const SubjectRecord& s) {
  py::dict d;
  d["id"] = s.id;
  d["x0"] = s.x0;
  d["times"] = s.times;
  d["values"] = s.values;
  d["v1"] = std::string(1, to_char(s.v1));
  d["responder"] = s.responder ? py::cast(*s.responder) : py::none();
  d["v2"] = s.v2 ? py::cast(std::string(1, to_char(*s.v2))) : py::none();
  d["obs_time"] = s.obs_time;
  d["event"] = s.event;
  return d;
}

FitResult fit_with(const Dataset& data, const StudyConfig& s) {
  FitOptions fo;
  fo.quadrature_order = s.k_fit;
  fo.threads = s.threads;
  return fit_joint_model(data.subjects, s.design(), fo);
}

RegimenValueTable jm_values(const FitResult& fit, const Dataset& data, const StudyConfig& s) {
  GFormulaOptions go;
  go.marginal_order = s.k_marg;
  go.grid_size = s.grid_rmst;
  const DesignConfig cfg = s.design();
  return propagate_uncertainty(fit, cfg.coding.embedded_regimens(), s.estimands(),
                               Standardization::empirical(data.subjects), cfg, s.n_jm,
                               derive_seed(s.seed, 1), go, s.threads);
}

BootstrapResult iptw_boot(const Dataset& data, const StudyConfig& s) {
  const DesignConfig cfg = s.design();
  return bootstrap_covariance(data.subjects, cfg.coding.embedded_regimens(), s.estimands(), cfg,
                              s.n_boot, derive_seed(s.seed, 2), s.threads);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Joint longitudinal-survival evaluation of SMART regimens";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<PreconditionError>(m, "PreconditionError", base.ptr());
  py::register_exception<FitError>(m, "FitError", base.ptr());
  py::register_exception<EstimationError>(m, "EstimationError", base.ptr());
  py::register_exception<EvaluationError>(m, "EvaluationError", base.ptr());
  py::register_exception<DecompositionError>(m, "DecompositionError", base.ptr());

  py::class_<Dataset>(m, "Dataset")
      .def("__len__", [](const Dataset& d) { return d.subjects.size(); })
      .def("__getitem__",
           [](const Dataset& d, std::size_t i) {
             if (i >= d.subjects.size()) throw py::index_error();
             return subject_dict(d.subjects[i]);
           })
      .def("events",
           [](const Dataset& d) {
             int n = 0;
             for (const auto& s : d.subjects) n += s.event ? 1 : 0;
             return n;
           })
      .def("save", [](const Dataset& d, const std::string& subjects,
                      const std::string& longitudinal) {
        save_dataset({subjects, longitudinal}, d.subjects);
      });

  m.def("simulate", [](const std::string& config) {
    const StudyConfig s = config_from(config);
    return Dataset{simulate_trial(s.seed, s.n, s.truth, s.design(), s.threads)};
  });
  m.def("load", [](const std::string& subjects, const std::string& longitudinal,
                   const std::string& config) {
    return Dataset{load_dataset({subjects, longitudinal}, config_from(config).design())};
  });
  m.def("normalize_config", [](const std::string& config) {
    const StudyConfig s = config_from(config);
    json doc = to_json(s);
    doc["config_hash"] = config_hash(s);
    return dump(doc);
  });
  m.def("fit", [](const Dataset& data, const std::string& config) {
    const StudyConfig s = config_from(config);
    py::gil_scoped_release release;
    return dump(to_json(fit_with(data, s), s.design().coding));
  });
  m.def("gformula", [](const Dataset& data, const std::string& config) {
    const StudyConfig s = config_from(config);
    py::gil_scoped_release release;
    const FitResult fit = fit_with(data, s);
    json doc;
    doc["converged"] = fit.converged;
    doc["values"] = to_json(jm_values(fit, data, s));
    return dump(doc);
  });
  m.def("iptw", [](const Dataset& data, const std::string& config) {
    const StudyConfig s = config_from(config);
    py::gil_scoped_release release;
    const BootstrapResult b = iptw_boot(data, s);
    json doc;
    doc["values"] = value_table_json(s.design().coding.embedded_regimens(), s.estimands(),
                                     b.values, b.se);
    doc["dropped_replicates"] = b.dropped;
    return dump(doc);
  });
  m.def("mcb", [](const Eigen::VectorXd& values, const Eigen::MatrixXd& cov, double zeta,
                  int n_mc, std::uint64_t seed) {
    const McbResult r = mcb_best_set(values, cov, zeta, n_mc, seed);
    py::dict d;
    d["in_best_set"] = r.in_best_set;
    d["margin"] = r.margin;
    d["cutoff"] = r.cutoff;
    return d;
  });
  m.def("true_values", [](const std::string& config) {
    const StudyConfig s = config_from(config);
    TruthOptions to;
    to.method = s.truth_method;
    to.draws = s.truth_draws;
    to.grid_size = s.grid_truth;
    to.seed = derive_seed(s.seed, 0xC0FFEE);
    to.threads = s.threads;
    py::gil_scoped_release release;
    return dump(to_json(compute_true_values(s.truth, s.design(), s.estimands(), to)));
  });
  m.def("run_replication", [](int index, const std::string& config) {
    const StudyConfig s = config_from(config);
    py::gil_scoped_release release;
    return dump(to_json(run_replication(index, s)));
  });
}
