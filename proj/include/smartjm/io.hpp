#pragma once

// Delimited data files, structured-text configuration and result documents.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "smartjm/estimation.hpp"
#include "smartjm/gformula.hpp"
#include "smartjm/harness.hpp"
#include "smartjm/mcb.hpp"
#include "smartjm/model.hpp"

namespace smartjm {

inline constexpr int kResultSchemaVersion = 1;

// Shortest text that reads back to the same double (17 significant digits).
std::string format_double(double x);

// Subjects: id,x01,..,x0p,v1,responder,v2,obs_time,event with empty
// responder/v2 when unobserved. Longitudinal: id,time,value in weeks.
void write_subjects(std::ostream& out, const std::vector<SubjectRecord>& data);
void write_longitudinal(std::ostream& out, const std::vector<SubjectRecord>& data);

// Throws ParseError carrying the 1-based line number of the offending row,
// and PreconditionError when an assembled subject violates the design.
std::vector<SubjectRecord> read_dataset(std::istream& subjects, std::istream& longitudinal,
                                        const DesignConfig& cfg);

struct DatasetPaths {
  std::filesystem::path subjects;
  std::filesystem::path longitudinal;

  static DatasetPaths in(const std::filesystem::path& dir);  // subjects.csv, longitudinal.csv
};

void save_dataset(const DatasetPaths& paths, const std::vector<SubjectRecord>& data);
std::vector<SubjectRecord> load_dataset(const DatasetPaths& paths, const DesignConfig& cfg);

// Keys mirror the StudyConfig field names; "schedule" is "dense", "sparse"
// or an array of weeks. Unknown keys and invalid settings are rejected with
// ConfigError.
StudyConfig study_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StudyConfig& study);
StudyConfig load_study_config(const std::filesystem::path& path);

// FNV-1a of the canonical (sorted-key, compact) config text, as 16 hex digits.
std::string config_hash(const StudyConfig& study);

// Result document skeleton carrying schema version, command, config hash and seed.
nlohmann::json result_envelope(std::string_view command, const StudyConfig& study);

nlohmann::json to_json(const Theta& theta, const TreatmentCoding& coding);
nlohmann::json to_json(const FitResult& fit, const TreatmentCoding& coding);
nlohmann::json to_json(const RegimenValueTable& table);
nlohmann::json value_table_json(const std::vector<Dtr>& regimens,
                                const std::vector<Estimand>& estimands,
                                const Eigen::MatrixXd& values, const Eigen::MatrixXd& se);
nlohmann::json to_json(const McbResult& mcb, const std::vector<Dtr>& regimens);
nlohmann::json to_json(const TruthTable& truths);
nlohmann::json to_json(const MetricRow& row);
nlohmann::json to_json(const StudyMetrics& metrics);
nlohmann::json to_json(const ReplicationRecord& rec);
nlohmann::json to_json(const SurvivalCurves& curves, const std::vector<Dtr>& regimens);

// Plain-text tables shaped like the parameter, regimen-value and contrast
// summaries of a simulation study.
std::string parameter_report(const StudyMetrics& metrics);
std::string value_report(const StudyMetrics& metrics);
std::string contrast_report(const StudyMetrics& metrics);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace smartjm
