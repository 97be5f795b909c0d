#include "smartjm/io.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "smartjm/errors.hpp"

namespace smartjm {

using nlohmann::json;

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

namespace {

std::vector<std::string> split_row(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, const char* field, int line) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) {
    throw ParseError(std::string("invalid ") + field + " '" + s + "'", line);
  }
  return v;
}

int parse_int(const std::string& s, const char* field, int line) {
  int v = 0;
  const char* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) {
    throw ParseError(std::string("invalid ") + field + " '" + s + "'", line);
  }
  return v;
}

bool parse_flag(const std::string& s, const char* field, int line) {
  if (s == "1") return true;
  if (s == "0") return false;
  throw ParseError(std::string("invalid ") + field + " '" + s + "' (expected 0 or 1)", line);
}

Treatment parse_treatment_cell(const std::string& s, const char* field, int line) {
  try {
    return parse_treatment(s);
  } catch (const Error&) {
    throw ParseError(std::string("invalid ") + field + " '" + s + "'", line);
  }
}

}  // namespace

void write_subjects(std::ostream& out, const std::vector<SubjectRecord>& data) {
  const std::size_t p = data.empty() ? 2 : data.front().x0.size();
  out << "id";
  for (std::size_t k = 0; k < p; ++k) out << ",x0" << (k + 1);
  out << ",v1,responder,v2,obs_time,event\n";
  for (const auto& s : data) {
    SMARTJM_REQUIRE(s.x0.size() == p, "write_subjects: subjects differ in covariate count");
    out << s.id;
    for (double x : s.x0) out << ',' << format_double(x);
    out << ',' << to_char(s.v1) << ',';
    if (s.responder) out << (*s.responder ? '1' : '0');
    out << ',';
    if (s.v2) out << to_char(*s.v2);
    out << ',' << format_double(s.obs_time) << ',' << (s.event ? 1 : 0) << '\n';
  }
}

void write_longitudinal(std::ostream& out, const std::vector<SubjectRecord>& data) {
  out << "id,time,value\n";
  for (const auto& s : data) {
    for (std::size_t j = 0; j < s.times.size(); ++j) {
      out << s.id << ',' << format_double(s.times[j]) << ',' << format_double(s.values[j])
          << '\n';
    }
  }
}

std::vector<SubjectRecord> read_dataset(std::istream& subjects, std::istream& longitudinal,
                                        const DesignConfig& cfg) {
  std::string line;
  if (!std::getline(subjects, line)) throw ParseError("subjects file is empty", 1);
  const auto header = split_row(line);
  const std::vector<std::string> tail{"v1", "responder", "v2", "obs_time", "event"};
  if (header.size() < tail.size() + 1 || header.front() != "id" ||
      !std::equal(tail.begin(), tail.end(), header.end() - tail.size())) {
    throw ParseError("subjects header must be id,<covariates..>,v1,responder,v2,obs_time,event",
                     1);
  }
  const std::size_t p = header.size() - tail.size() - 1;

  std::vector<SubjectRecord> data;
  std::map<int, std::size_t> index;
  int lineno = 1;
  while (std::getline(subjects, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_row(line);
    if (cells.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields, found " +
                           std::to_string(cells.size()),
                       lineno);
    }
    SubjectRecord s;
    s.id = parse_int(cells[0], "id", lineno);
    for (std::size_t k = 0; k < p; ++k) s.x0.push_back(parse_number(cells[1 + k], "covariate", lineno));
    s.v1 = parse_treatment_cell(cells[p + 1], "v1", lineno);
    if (!cells[p + 2].empty()) s.responder = parse_flag(cells[p + 2], "responder", lineno);
    if (!cells[p + 3].empty()) s.v2 = parse_treatment_cell(cells[p + 3], "v2", lineno);
    s.obs_time = parse_number(cells[p + 4], "obs_time", lineno);
    s.event = parse_flag(cells[p + 5], "event", lineno);
    if (!index.emplace(s.id, data.size()).second) {
      throw ParseError("duplicate subject id " + std::to_string(s.id), lineno);
    }
    data.push_back(std::move(s));
  }

  if (!std::getline(longitudinal, line)) throw ParseError("longitudinal file is empty", 1);
  if (split_row(line) != std::vector<std::string>{"id", "time", "value"}) {
    throw ParseError("longitudinal header must be id,time,value", 1);
  }
  std::vector<std::vector<std::pair<double, double>>> rows(data.size());
  lineno = 1;
  while (std::getline(longitudinal, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_row(line);
    if (cells.size() != 3) {
      throw ParseError("expected 3 fields, found " + std::to_string(cells.size()), lineno);
    }
    const int id = parse_int(cells[0], "id", lineno);
    const auto it = index.find(id);
    if (it == index.end()) {
      throw ParseError("longitudinal id " + std::to_string(id) + " has no subject row", lineno);
    }
    const double t = parse_number(cells[1], "time", lineno);
    const double y = parse_number(cells[2], "value", lineno);
    const SubjectRecord& s = data[it->second];
    if (t < 0.0 || t > s.obs_time) {
      throw ParseError("measurement time " + cells[1] + " outside [0, obs_time] of subject " +
                           std::to_string(id),
                       lineno);
    }
    rows[it->second].emplace_back(t, y);
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::stable_sort(rows[i].begin(), rows[i].end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [t, y] : rows[i]) {
      data[i].times.push_back(t);
      data[i].values.push_back(y);
    }
    validate_subject(data[i], cfg);
  }
  return data;
}

DatasetPaths DatasetPaths::in(const std::filesystem::path& dir) {
  return {dir / "subjects.csv", dir / "longitudinal.csv"};
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return in;
}

}  // namespace

void save_dataset(const DatasetPaths& paths, const std::vector<SubjectRecord>& data) {
  auto s = open_out(paths.subjects);
  write_subjects(s, data);
  auto l = open_out(paths.longitudinal);
  write_longitudinal(l, data);
  if (!s || !l) throw Error("write failed for dataset files");
}

std::vector<SubjectRecord> load_dataset(const DatasetPaths& paths, const DesignConfig& cfg) {
  auto s = open_in(paths.subjects);
  auto l = open_in(paths.longitudinal);
  return read_dataset(s, l, cfg);
}

namespace {

template <class T>
T get_field(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

}  // namespace

StudyConfig study_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be an object");
  StudyConfig s;
  for (const auto& [key, value] : j.items()) {
    if (key == "n") s.n = get_field<int>(j, "n");
    else if (key == "replications") s.replications = get_field<int>(j, "replications");
    else if (key == "seed") s.seed = get_field<std::uint64_t>(j, "seed");
    else if (key == "schedule") {
      if (value.is_string()) {
        try {
          s.schedule = measurement_schedule(parse_schedule(value.get<std::string>()));
        } catch (const Error& e) {
          throw ConfigError(std::string("config field 'schedule': ") + e.what());
        }
      } else {
        s.schedule = get_field<std::vector<double>>(j, "schedule");
      }
    } else if (key == "horizons") s.horizons = get_field<std::vector<double>>(j, "horizons");
    else if (key == "k_fit") s.k_fit = get_field<int>(j, "k_fit");
    else if (key == "k_marg") s.k_marg = get_field<int>(j, "k_marg");
    else if (key == "n_jm") s.n_jm = get_field<int>(j, "n_jm");
    else if (key == "n_boot") s.n_boot = get_field<int>(j, "n_boot");
    else if (key == "n_mc") s.n_mc = get_field<int>(j, "n_mc");
    else if (key == "grid_rmst") s.grid_rmst = get_field<int>(j, "grid_rmst");
    else if (key == "grid_truth") s.grid_truth = get_field<int>(j, "grid_truth");
    else if (key == "truth_draws") s.truth_draws = get_field<int>(j, "truth_draws");
    else if (key == "truth_method") {
      s.truth_method = parse_truth_method(get_field<std::string>(j, "truth_method"));
    } else if (key == "zeta") s.zeta = get_field<double>(j, "zeta");
    else if (key == "threads") s.threads = get_field<int>(j, "threads");
    else if (key == "fit_only") s.fit_only = get_field<bool>(j, "fit_only");
    else if (key == "coverage_uses_aese") s.coverage_uses_aese = get_field<bool>(j, "coverage_uses_aese");
    else if (key == "truth") {
      if (!value.is_object()) throw ConfigError("config field 'truth' must be an object");
      for (const auto& [tk, tv] : value.items()) {
        if (tk == "censor_rate") s.truth.censor_rate = get_field<double>(value, "censor_rate");
        else if (tk == "p_x01") s.truth.p_x01 = get_field<double>(value, "p_x01");
        else if (tk == "theta") {
          const auto v = get_field<std::vector<double>>(value, "theta");
          const ParamLayout lay = ParamLayout::of(s.truth.theta);
          if (static_cast<int>(v.size()) != lay.size()) {
            throw ConfigError("config field 'truth.theta' needs " + std::to_string(lay.size()) +
                              " values");
          }
          s.truth.theta = unflatten(Eigen::Map<const Eigen::VectorXd>(v.data(), v.size()), lay);
        } else {
          throw ConfigError("unknown config field 'truth." + tk + "'");
        }
      }
    } else {
      throw ConfigError("unknown config field '" + key + "'");
    }
  }
  s.validate();
  return s;
}

json to_json(const StudyConfig& s) {
  const Eigen::VectorXd theta = flatten(s.truth.theta);
  return json{{"n", s.n},
              {"replications", s.replications},
              {"seed", s.seed},
              {"schedule", s.schedule},
              {"horizons", s.horizons},
              {"k_fit", s.k_fit},
              {"k_marg", s.k_marg},
              {"n_jm", s.n_jm},
              {"n_boot", s.n_boot},
              {"n_mc", s.n_mc},
              {"grid_rmst", s.grid_rmst},
              {"grid_truth", s.grid_truth},
              {"truth_draws", s.truth_draws},
              {"truth_method", std::string(to_string(s.truth_method))},
              {"zeta", s.zeta},
              {"threads", s.threads},
              {"fit_only", s.fit_only},
              {"coverage_uses_aese", s.coverage_uses_aese},
              {"truth",
               {{"theta", std::vector<double>(theta.data(), theta.data() + theta.size())},
                {"censor_rate", s.truth.censor_rate},
                {"p_x01", s.truth.p_x01}}}};
}

StudyConfig load_study_config(const std::filesystem::path& path) {
  auto in = open_in(path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("config '" + path.string() + "': " + e.what(), 0);
  }
  return study_config_from_json(j);
}

std::string config_hash(const StudyConfig& study) {
  json j = to_json(study);
  j.erase("threads");  // scheduling does not change results
  const std::string text = j.dump();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json result_envelope(std::string_view command, const StudyConfig& study) {
  return json{{"schema_version", kResultSchemaVersion},
              {"command", std::string(command)},
              {"config_hash", config_hash(study)},
              {"seed", study.seed}};
}

namespace {

std::vector<double> to_vector(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

json matrix_rows(const Eigen::MatrixXd& m) {
  json out = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(to_vector(m.row(i).transpose()));
  return out;
}

std::vector<std::string> labels(const std::vector<Dtr>& regimens) {
  std::vector<std::string> out;
  for (const auto& g : regimens) out.push_back(g.label());
  return out;
}

}  // namespace

json to_json(const Theta& theta, const TreatmentCoding& coding) {
  const ParamLayout lay = ParamLayout::of(theta);
  const auto names = lay.names(coding);
  const Eigen::VectorXd v = flatten(theta);
  json out = json::object();
  for (int k = 0; k < lay.size(); ++k) out[names[k]] = v[k];
  return out;
}

json to_json(const FitResult& fit, const TreatmentCoding& coding) {
  const ParamLayout lay = ParamLayout::of(fit.theta_hat);
  const auto names = lay.names(coding);
  const Eigen::VectorXd v = flatten(fit.theta_hat);
  json params = json::array();
  for (int k = 0; k < lay.size(); ++k) {
    json row{{"name", names[k]}, {"estimate", v[k]}};
    row["se"] = fit.se.size() == lay.size() ? json(fit.se[k]) : json(nullptr);
    params.push_back(row);
  }
  json out{{"converged", fit.converged},
           {"loglik", fit.loglik},
           {"iterations", fit.iterations},
           {"projected_grad_norm", fit.projected_grad_norm},
           {"pseudo_inverse", fit.pseudo_inverse},
           {"message", fit.message},
           {"parameters", params}};
  if (fit.vcov.rows() == lay.size()) out["vcov"] = matrix_rows(fit.vcov);
  return out;
}

json value_table_json(const std::vector<Dtr>& regimens, const std::vector<Estimand>& estimands,
                      const Eigen::MatrixXd& values, const Eigen::MatrixXd& se) {
  json rows = json::array();
  for (std::size_t e = 0; e < estimands.size(); ++e) {
    for (std::size_t g = 0; g < regimens.size(); ++g) {
      json row{{"estimand", estimands[e].label()},
               {"regimen", regimens[g].label()},
               {"value", values(e, g)}};
      if (se.size() > 0) row["se"] = se(e, g);
      rows.push_back(row);
    }
  }
  return rows;
}

json to_json(const RegimenValueTable& table) {
  json cov = json::object();
  for (std::size_t e = 0; e < table.estimands.size() && e < table.cov.size(); ++e) {
    cov[table.estimands[e].label()] = matrix_rows(table.cov[e]);
  }
  return json{{"regimens", labels(table.regimens)},
              {"rows", value_table_json(table.regimens, table.estimands, table.values, table.se)},
              {"cov", cov},
              {"redraws", table.redraws}};
}

json to_json(const McbResult& mcb, const std::vector<Dtr>& regimens) {
  json rows = json::array();
  for (std::size_t g = 0; g < regimens.size(); ++g) {
    rows.push_back({{"regimen", regimens[g].label()},
                    {"estimate", mcb.q_hat[g]},
                    {"cutoff", mcb.cutoff[g]},
                    {"margin", mcb.margin[g]},
                    {"in_best_set", static_cast<bool>(mcb.in_best_set[g])}});
  }
  return json{{"best_set_size", mcb.best_set_size()}, {"rows", rows}};
}

json to_json(const TruthTable& truths) {
  return value_table_json(truths.regimens, truths.estimands, truths.values, Eigen::MatrixXd());
}

json to_json(const MetricRow& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return json{{"kind", r.kind},
              {"name", r.name},
              {"regimen", r.regimen},
              {"method", r.method},
              {"truth", r.truth},
              {"mean", r.mean},
              {"rel_bias", r.rel_bias},
              {"rel_is_absolute", r.rel_is_absolute},
              {"mcse", r.mcse},
              {"aese", r.aese},
              {"rmse", r.rmse},
              {"coverage", r.coverage},
              {"point", opt(r.point)},
              {"mcb", opt(r.mcb)},
              {"best_set_size", opt(r.best_set_size)},
              {"re", opt(r.re)},
              {"count", r.count}};
}

json to_json(const StudyMetrics& m) {
  json rows = json::array();
  for (const auto& r : m.rows) rows.push_back(to_json(r));
  return json{{"replications", m.replications},
              {"convergence_rate", m.convergence_rate},
              {"rows", rows}};
}

json to_json(const ReplicationRecord& rec) {
  auto method = [](const MethodRecord& m) {
    if (!m.available) return json{{"available", false}};
    json mcb = json::array();
    for (const auto& r : m.mcb) {
      std::vector<bool> in(r.in_best_set.begin(), r.in_best_set.end());
      mcb.push_back({{"in_best_set", in}, {"margin", to_vector(r.margin)}});
    }
    return json{{"available", true},
                {"values", matrix_rows(m.values)},
                {"se", matrix_rows(m.se)},
                {"mcb", mcb},
                {"contrast", to_vector(m.contrast)},
                {"contrast_se", to_vector(m.contrast_se)}};
  };
  return json{{"index", rec.index},
              {"seed", rec.seed},
              {"fit_ok", rec.fit_ok},
              {"converged", rec.converged},
              {"error", rec.error},
              {"iterations", rec.iterations},
              {"projected_grad_norm", rec.projected_grad_norm},
              {"fit_seconds", rec.fit_seconds},
              {"theta_hat", to_vector(rec.theta_hat)},
              {"theta_se", to_vector(rec.theta_se)},
              {"jm", method(rec.jm)},
              {"iptw", method(rec.iptw)}};
}

json to_json(const SurvivalCurves& curves, const std::vector<Dtr>& regimens) {
  json series = json::object();
  for (std::size_t g = 0; g < regimens.size(); ++g) {
    series[regimens[g].label()] = to_vector(curves.survival.col(g));
  }
  return json{{"times", curves.times}, {"survival", series}};
}

namespace {

std::string cell(double v, int width, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%*.*f", width, precision, v);
  return buf;
}

std::string cell(const std::optional<double>& v, int width, int precision) {
  if (!v) return std::string(static_cast<std::size_t>(width - 1), ' ') + "-";
  return cell(*v, width, precision);
}

std::string text(const std::string& s, int width) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-*s", width, s.c_str());
  return buf;
}

std::string rel_cell(const MetricRow& r) {
  return cell(r.rel_bias, 8, 2) + (r.rel_is_absolute ? "*" : " ");
}

}  // namespace

std::string parameter_report(const StudyMetrics& m) {
  std::string out = text("Parameter", 14) + "    True     Mean     Rel%      MCSE     AESE     RMSE    Cov%\n";
  for (const auto& r : m.rows) {
    if (r.kind != "parameter") continue;
    out += text(r.name, 14) + cell(r.truth, 8, 3) + cell(r.mean, 9, 3) + rel_cell(r) +
           cell(r.mcse, 9, 3) + cell(r.aese, 9, 3) + cell(r.rmse, 9, 3) + cell(r.coverage, 8, 1) +
           "\n";
  }
  out += "(* absolute bias where the true value is zero)\n";
  out += "Convergence: " + cell(m.convergence_rate, 0, 1) + "% of " +
         std::to_string(m.replications) + " replications\n";
  return out;
}

std::string value_report(const StudyMetrics& m) {
  std::string out = text("Estimand", 10) + text("DTR", 9) + text("Method", 6) +
                    "    True     Mean     Rel%      MCSE     AESE     RMSE    Cov%  Point%    MCB%    |S|      RE\n";
  for (const auto& r : m.rows) {
    if (r.kind != "value") continue;
    out += text(r.name, 10) + text(r.regimen, 9) + text(r.method, 6) + cell(r.truth, 8, 4) +
           cell(r.mean, 9, 4) + rel_cell(r) + cell(r.mcse, 9, 4) + cell(r.aese, 9, 4) +
           cell(r.rmse, 9, 4) + cell(r.coverage, 8, 1) + cell(r.point, 8, 1) +
           cell(r.mcb, 8, 1) + cell(r.best_set_size, 7, 2) + cell(r.re, 8, 3) + "\n";
  }
  return out;
}

std::string contrast_report(const StudyMetrics& m) {
  std::string out = text("Contrast", 28) + text("Method", 6) +
                    "    True     Mean     Bias      MCSE     AESE     RMSE    Cov%\n";
  for (const auto& r : m.rows) {
    if (r.kind != "contrast") continue;
    out += text(r.name, 28) + text(r.method, 6) + cell(r.truth, 8, 4) + cell(r.mean, 9, 4) +
           cell(r.mean - r.truth, 9, 4) + " " + cell(r.mcse, 9, 4) + cell(r.aese, 9, 4) +
           cell(r.rmse, 9, 4) + cell(r.coverage, 8, 1) + "\n";
  }
  return out;
}

void write_json(const std::filesystem::path& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace smartjm
