#pragma once

// Experiment reports. Schema (all keys always present):
//   name:       experiment name
//   config:     resolved configuration (key -> string)
//   columns:    names of the primary table's columns
//   rows:       primary table, numbers only
//   seeds:      seeds the experiment ran with
//   tables:     auxiliary tables {name: {columns, rows}}
//   summary:    named scalars derived from the tables
//   codes:      categorical encodings used in numeric columns {column: {code: label}}
//   provenance: dataset hashes, timings, and other bookkeeping
// Every table also has a CSV mirror.

#include <stepnav/error.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace stepnav {

inline constexpr int kReportSchemaVersion = 1;

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  void add(std::vector<double> row) {
    if (row.size() != columns.size()) {
      throw DataError("table row has " + std::to_string(row.size()) + " cells, expected " +
                      std::to_string(columns.size()));
    }
    rows.push_back(std::move(row));
  }

  std::size_t column(const std::string &name) const {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (columns[i] == name) {
        return i;
      }
    }
    throw DataError("no column '" + name + "'");
  }
};

struct Report {
  std::string name;
  nlohmann::json config = nlohmann::json::object();
  Table table;
  std::vector<long long> seeds;
  std::map<std::string, Table> tables;
  nlohmann::json summary = nlohmann::json::object();
  nlohmann::json codes = nlohmann::json::object();
  nlohmann::json provenance = nlohmann::json::object();

  double scalar(const std::string &key) const {
    if (!summary.contains(key)) {
      throw DataError("report '" + name + "' has no summary value '" + key + "'");
    }
    return summary.at(key).get<double>();
  }
};

// Non-finite cells are written as null so the JSON stays valid.
inline nlohmann::json table_rows_json(const Table &t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto &r : t.rows) {
    nlohmann::json row = nlohmann::json::array();
    for (double v : r) {
      if (std::isfinite(v)) {
        row.push_back(v);
      } else {
        row.push_back(nullptr);
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json to_json(const Report &r) {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["name"] = r.name;
  j["config"] = r.config;
  j["columns"] = r.table.columns;
  j["rows"] = table_rows_json(r.table);
  j["seeds"] = r.seeds;
  nlohmann::json tables = nlohmann::json::object();
  for (const auto &[k, t] : r.tables) {
    tables[k] = {{"columns", t.columns}, {"rows", table_rows_json(t)}};
  }
  j["tables"] = tables;
  j["summary"] = r.summary;
  j["codes"] = r.codes;
  j["provenance"] = r.provenance;
  return j;
}

inline Table table_from_json(const nlohmann::json &columns, const nlohmann::json &rows) {
  Table t;
  t.columns = columns.get<std::vector<std::string>>();
  for (const auto &row : rows) {
    std::vector<double> r;
    for (const auto &v : row) {
      r.push_back(v.is_null() ? std::nan("") : v.get<double>());
    }
    t.add(std::move(r));
  }
  return t;
}

inline Report report_from_json(const nlohmann::json &j) {
  for (const char *key : {"name", "config", "columns", "rows", "seeds"}) {
    if (!j.contains(key)) {
      throw DataError(std::string("report is missing '") + key + "'");
    }
  }
  Report r;
  try {
    r.name = j.at("name").get<std::string>();
    r.config = j.at("config");
    r.table = table_from_json(j.at("columns"), j.at("rows"));
    r.seeds = j.at("seeds").get<std::vector<long long>>();
    if (j.contains("tables")) {
      for (const auto &[k, t] : j.at("tables").items()) {
        r.tables[k] = table_from_json(t.at("columns"), t.at("rows"));
      }
    }
    r.summary = j.value("summary", nlohmann::json::object());
    r.codes = j.value("codes", nlohmann::json::object());
    r.provenance = j.value("provenance", nlohmann::json::object());
  } catch (const nlohmann::json::exception &e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
  return r;
}

inline void write_csv(std::ostream &os, const Table &t) {
  for (std::size_t i = 0; i < t.columns.size(); ++i) {
    os << (i ? "," : "") << t.columns[i];
  }
  os << '\n';
  os.precision(10);
  for (const auto &r : t.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) {
        os << ',';
      }
      if (std::isfinite(r[i])) {
        os << r[i];
      }
    }
    os << '\n';
  }
}

// <dir>/<name>.json, <dir>/<name>.csv and <dir>/<name>.<table>.csv.
inline std::vector<std::filesystem::path> write_report(const std::filesystem::path &dir,
                                                       const Report &r) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto open = [&](const std::filesystem::path &p) {
    std::ofstream os(p);
    if (!os) {
      throw DataError("cannot write " + p.string());
    }
    written.push_back(p);
    return os;
  };
  {
    auto os = open(dir / (r.name + ".json"));
    os << to_json(r).dump(2) << '\n';
  }
  {
    auto os = open(dir / (r.name + ".csv"));
    write_csv(os, r.table);
  }
  for (const auto &[k, t] : r.tables) {
    auto os = open(dir / (r.name + "." + k + ".csv"));
    write_csv(os, t);
  }
  return written;
}

inline Report read_report(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is) {
    throw DataError("cannot read report " + path.string());
  }
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception &e) {
    throw DataError(std::string("report is not valid JSON: ") + e.what());
  }
  return report_from_json(j);
}

} // namespace stepnav
