#include <sstream>

#include "doctest.h"

#include "smartjm/errors.hpp"
#include "smartjm/io.hpp"
#include "smartjm/simgen.hpp"

using namespace smartjm;

namespace {

std::pair<std::string, std::string> emit(const std::vector<SubjectRecord>& data) {
  std::ostringstream subjects, longitudinal;
  write_subjects(subjects, data);
  write_longitudinal(longitudinal, data);
  return {subjects.str(), longitudinal.str()};
}

std::vector<SubjectRecord> ingest(const std::string& subjects, const std::string& longitudinal,
                                  const DesignConfig& cfg = {}) {
  std::istringstream s(subjects), l(longitudinal);
  return read_dataset(s, l, cfg);
}

int parse_error_line(const std::string& subjects, const std::string& longitudinal) {
  try {
    ingest(subjects, longitudinal);
  } catch (const ParseError& e) {
    return e.line();
  }
  return -1;
}

const std::string kHeader = "id,x01,x02,v1,responder,v2,obs_time,event\n";

}  // namespace

TEST_SUITE("io") {
  TEST_CASE("numbers round-trip through their text form") {
    for (double x : {0.1, 1.0 / 3.0, -2.5e-300, 13.352512345678901, 24.0}) {
      CHECK(std::stod(format_double(x)) == x);
    }
    CHECK(format_double(24.0) == "24");
  }

  TEST_CASE("simulate, ingest and re-emit is byte-identical") {
    for (const auto schedule : {Schedule::Dense, Schedule::Sparse}) {
      DesignConfig cfg;
      cfg.measurement_schedule = measurement_schedule(schedule);
      const auto data = simulate_trial(31, 120, DgmTruth{}, cfg);
      const auto [subjects, longitudinal] = emit(data);
      const auto back = ingest(subjects, longitudinal, cfg);
      REQUIRE(back.size() == data.size());
      for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(back[i].values == data[i].values);
        CHECK(back[i].times == data[i].times);
        CHECK(back[i].obs_time == data[i].obs_time);
        CHECK(back[i].responder == data[i].responder);
      }
      const auto [subjects2, longitudinal2] = emit(back);
      CHECK(subjects2 == subjects);
      CHECK(longitudinal2 == longitudinal);
    }
  }

  TEST_CASE("subject rows with an absent second stage") {
    const std::string subjects = kHeader + "7,1,0.5,B,,,3.25,1\n";
    const std::string longitudinal = "id,time,value\n7,0,3.1\n7,2,2.9\n";
    const auto data = ingest(subjects, longitudinal);
    REQUIRE(data.size() == 1);
    CHECK(data[0].id == 7);
    CHECK(data[0].v1 == Treatment::B);
    CHECK_FALSE(data[0].responder.has_value());
    CHECK_FALSE(data[0].v2.has_value());
    CHECK(data[0].event);
    CHECK(data[0].times == std::vector<double>{0.0, 2.0});
  }

  TEST_CASE("longitudinal rows may arrive out of order and with gaps") {
    const std::string subjects = kHeader + "1,0,0,A,1,A,20,0\n";
    const std::string longitudinal = "id,time,value\n1,8,2.0\n1,0,3.5\n1,16,1.0\n";
    const auto data = ingest(subjects, longitudinal);
    CHECK(data[0].times == std::vector<double>{0.0, 8.0, 16.0});
    CHECK(data[0].values == std::vector<double>{3.5, 2.0, 1.0});
  }

  TEST_CASE("parse errors carry the line number") {
    const std::string ok_long = "id,time,value\n1,0,3\n2,0,3\n";
    CHECK(parse_error_line(kHeader + "1,0,0,A,,,5,1\n2,0,0,A,,,5\n", ok_long) == 3);
    CHECK(parse_error_line(kHeader + "1,0,0,A,,,5,1\n2,0,zero,A,,,5,1\n", ok_long) == 3);
    CHECK(parse_error_line(kHeader + "1,0,0,A,,,5,1\n1,0,0,A,,,5,1\n", ok_long) == 3);
    CHECK(parse_error_line(kHeader + "1,0,0,E,,,5,1\n", ok_long) == 2);
    CHECK(parse_error_line(kHeader + "1,0,0,A,,,5,2\n", ok_long) == 2);
    CHECK(parse_error_line("id,x,v1\n", ok_long) == 1);
    CHECK(parse_error_line(kHeader + "1,0,0,A,,,5,1\n", "id,time,value\n1,0,3\n9,0,3\n") == 3);
    CHECK(parse_error_line(kHeader + "1,0,0,A,,,5,1\n", "id,time,value\n1,0,3\n1,6,2\n") == 3);
    CHECK(parse_error_line(kHeader + "1,0,0,A,,,5,1\n", "id,time,value\n1,0\n") == 2);
    try {
      ingest(kHeader + "1,0,0,A,,,5,1\n2,0,zero,A,,,5,1\n", ok_long);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("(line 3)") != std::string::npos);
    }
  }

  TEST_CASE("assembled subjects are validated against the design") {
    // Responder flag without a stage-2 treatment.
    const std::string subjects = kHeader + "1,0,0,A,1,,20,0\n";
    CHECK_THROWS_AS(ingest(subjects, "id,time,value\n1,0,3\n"), PreconditionError);
  }

  TEST_CASE("configuration parsing is strict") {
    const auto study = study_config_from_json(nlohmann::json::parse(
        R"({"n": 600, "schedule": "sparse", "horizons": [16], "zeta": 0.1, "truth_method": "mc"})"));
    CHECK(study.n == 600);
    CHECK(study.schedule == measurement_schedule(Schedule::Sparse));
    CHECK(study.horizons == std::vector<double>{16.0});
    CHECK(study.truth_method == TruthMethod::MonteCarlo);
    CHECK(study.zeta == 0.1);

    CHECK_THROWS_AS(study_config_from_json(nlohmann::json::parse(R"({"nn": 3})")), ConfigError);
    CHECK_THROWS_AS(study_config_from_json(nlohmann::json::parse(R"({"n": "many"})")),
                    ConfigError);
    CHECK_THROWS_AS(study_config_from_json(nlohmann::json::parse(R"({"schedule": [0, 4, 12]})")),
                    ConfigError);
    CHECK_THROWS_AS(study_config_from_json(nlohmann::json::parse(R"({"truth": {"theta": [1]}})")),
                    ConfigError);
  }

  TEST_CASE("configuration round-trips through its document") {
    StudyConfig study;
    study.n = 450;
    study.schedule = {0.0, 4.0, 8.0, 24.0};
    study.truth.theta.alpha = 0.35;
    study.coverage_uses_aese = true;
    const StudyConfig back = study_config_from_json(to_json(study));
    CHECK(to_json(back) == to_json(study));
    CHECK(config_hash(back) == config_hash(study));
  }

  TEST_CASE("config hash ignores the thread count only") {
    StudyConfig a;
    StudyConfig b = a;
    b.threads = 8;
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a).size() == 16);
    b.n = 301;
    CHECK(config_hash(a) != config_hash(b));
    const auto env = result_envelope("fit", a);
    CHECK(env["schema_version"] == kResultSchemaVersion);
    CHECK(env["config_hash"] == config_hash(a));
    CHECK(env["seed"] == a.seed);
    CHECK(env["command"] == "fit");
  }

  TEST_CASE("metric rows serialize every field") {
    MetricRow row;
    row.kind = "value";
    row.name = "S(16)";
    row.regimen = "(A,A,C)";
    row.method = "JM";
    row.point = 99.0;
    const auto j = to_json(row);
    for (const char* key : {"kind", "name", "regimen", "method", "truth", "mean", "rel_bias",
                            "rel_is_absolute", "mcse", "aese", "rmse", "coverage", "point", "mcb",
                            "best_set_size", "re", "count"}) {
      CAPTURE(key);
      CHECK(j.contains(key));
    }
    CHECK(j["point"] == 99.0);
    CHECK(j["mcb"].is_null());
  }
}
