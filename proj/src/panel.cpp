#include "didmean/panel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "didmean/errors.hpp"

namespace didmean {

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& field, std::size_t row) {
  double value = 0.0;
  const char* begin = field.data();
  const char* end = begin + field.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw ValidationError("non-numeric field '" + field + "' at data row " +
                          std::to_string(row));
  }
  return value;
}

// Minimal CSV reader: quoted fields with "" escapes, CRLF tolerated.
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  out.push_back(field);
  return out;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

}  // namespace

void validate_panel(const PanelDataset& data) {
  if (data.n_units <= 0) throw ValidationError("panel has no units");
  if (data.horizon < 0) throw ValidationError("panel horizon is negative");
  const int T = data.n_times();
  if (data.treatment.rows() != data.n_units || data.treatment.cols() != T)
    throw ValidationError("treatment matrix shape mismatch");
  if (data.outcome.rows() != data.n_units || data.outcome.cols() != T)
    throw ValidationError("outcome matrix shape mismatch");
  if (static_cast<int>(data.covariates.size()) != T)
    throw ValidationError("covariate blocks do not cover every time");
  for (int t = 0; t < T; ++t) {
    const auto& X = data.covariates[static_cast<std::size_t>(t)];
    if (X.rows() != data.n_units)
      throw ValidationError("covariate block at t=" + std::to_string(t) +
                            " has wrong row count");
    if (static_cast<int>(data.covariate_names[static_cast<std::size_t>(t)].size()) !=
        X.cols())
      throw ValidationError("covariate names at t=" + std::to_string(t) +
                            " do not match the block width");
    if (!X.allFinite())
      throw ValidationError("missing or non-finite covariate at t=" + std::to_string(t));
  }
  if (!data.outcome.allFinite()) throw ValidationError("missing or non-finite outcome");
  for (int i = 0; i < data.n_units; ++i) {
    for (int t = 0; t < T; ++t) {
      const int code = data.treatment(i, t);
      if (!std::binary_search(data.treatment_alphabet.begin(),
                              data.treatment_alphabet.end(), code)) {
        throw ValidationError("treatment code " + std::to_string(code) +
                              " at unit " + std::to_string(i) + ", t=" +
                              std::to_string(t) + " outside the declared alphabet");
      }
    }
  }
}

void validate_regime(const PanelDataset& data, const Regime& regime) {
  if (static_cast<int>(regime.path.size()) != data.n_times())
    throw ValidationError("regime length " + std::to_string(regime.path.size()) +
                          " does not match horizon+1 = " +
                          std::to_string(data.n_times()));
  for (int code : regime.path) {
    if (!std::binary_search(data.treatment_alphabet.begin(),
                            data.treatment_alphabet.end(), code))
      throw ValidationError("regime value " + std::to_string(code) +
                            " outside the treatment alphabet");
  }
}

AdjustmentSchedule default_schedule(const PanelDataset& data) {
  AdjustmentSchedule schedule;
  schedule.selection.resize(static_cast<std::size_t>(data.horizon));
  for (int k = 1; k <= data.horizon; ++k) {
    auto& sel = schedule.selection[static_cast<std::size_t>(k - 1)];
    for (int t = 0; t <= k; ++t)
      for (int c = 0; c < data.covariate_dim(t); ++c)
        sel.push_back({t, ColumnRef::Covariate, c});
    for (int t = 0; t <= k - 2; ++t) sel.push_back({t, ColumnRef::Outcome, 0});
  }
  return schedule;
}

void validate_schedule(const PanelDataset& data, const AdjustmentSchedule& schedule) {
  if (static_cast<int>(schedule.selection.size()) != data.horizon)
    throw ValidationError("schedule must define selections for k = 1..horizon");
  std::set<ColumnRef> previous;
  for (int k = 1; k <= data.horizon; ++k) {
    const auto& sel = schedule.selection[static_cast<std::size_t>(k - 1)];
    std::set<ColumnRef> current;
    for (const auto& ref : sel) {
      if (ref.kind == ColumnRef::Covariate) {
        if (ref.time < 0 || ref.time > k)
          throw ValidationError("schedule at k=" + std::to_string(k) +
                                " selects a covariate at future time " +
                                std::to_string(ref.time));
        if (ref.index < 0 || ref.index >= data.covariate_dim(ref.time))
          throw ValidationError("schedule covariate index out of range at t=" +
                                std::to_string(ref.time));
      } else {
        // Outcomes at k-1 or k would collapse the assumption to sequential
        // exchangeability; only history up to k-2 is admissible.
        if (ref.time > k - 2 || ref.time < 0)
          throw ValidationError("schedule at k=" + std::to_string(k) +
                                " selects outcome at time " + std::to_string(ref.time) +
                                "; only times <= k-2 are allowed");
        if (ref.index != 0)
          throw ValidationError("outcome column index must be 0");
      }
      if (!current.insert(ref).second)
        throw ValidationError("duplicate column in schedule at k=" + std::to_string(k));
    }
    for (const auto& ref : previous) {
      if (current.find(ref) == current.end())
        throw ValidationError("schedule not nested: selection at k=" +
                              std::to_string(k - 1) + " is not a subset of k=" +
                              std::to_string(k));
    }
    previous = std::move(current);
  }
}

std::string column_name(const PanelDataset& data, const ColumnRef& ref) {
  if (ref.kind == ColumnRef::Covariate) {
    return data.covariate_names[static_cast<std::size_t>(ref.time)]
                               [static_cast<std::size_t>(ref.index)] +
           "@t" + std::to_string(ref.time);
  }
  return data.outcome_name + "@t" + std::to_string(ref.time);
}

Eigen::MatrixXd design_matrix(const PanelDataset& data,
                              const AdjustmentSchedule& schedule, int k) {
  if (k < 1 || k > data.horizon)
    throw ValidationError("design_matrix requires 1 <= k <= horizon");
  const auto& sel = schedule.selection[static_cast<std::size_t>(k - 1)];
  Eigen::MatrixXd X(data.n_units, static_cast<int>(sel.size()));
  for (std::size_t c = 0; c < sel.size(); ++c) {
    const auto& ref = sel[c];
    if (ref.kind == ColumnRef::Covariate) {
      X.col(static_cast<int>(c)) =
          data.covariates[static_cast<std::size_t>(ref.time)].col(ref.index);
    } else {
      X.col(static_cast<int>(c)) = data.outcome.col(ref.time);
    }
  }
  return X;
}

std::vector<std::string> design_column_names(const PanelDataset& data,
                                             const AdjustmentSchedule& schedule,
                                             int k) {
  if (k < 1 || k > data.horizon)
    throw ValidationError("design_column_names requires 1 <= k <= horizon");
  const auto& sel = schedule.selection[static_cast<std::size_t>(k - 1)];
  std::vector<std::string> names;
  names.reserve(sel.size());
  for (const auto& ref : sel) names.push_back(column_name(data, ref));
  return names;
}

ComplianceProfile compliance(const PanelDataset& data, const Regime& regime) {
  validate_regime(data, regime);
  ComplianceProfile profile;
  profile.indicator.resize(data.n_units, data.n_times());
  for (int i = 0; i < data.n_units; ++i) {
    int still = 1;
    for (int t = 0; t < data.n_times(); ++t) {
      if (data.treatment(i, t) != regime.path[static_cast<std::size_t>(t)]) still = 0;
      profile.indicator(i, t) = still;
    }
  }
  return profile;
}

BaselineReport check_baseline_regime(const PanelDataset& data, const Regime& regime) {
  validate_regime(data, regime);
  BaselineReport report;
  int compliant = 0;
  for (int i = 0; i < data.n_units; ++i) {
    if (data.treatment(i, 0) == regime.path[0]) {
      ++compliant;
    } else {
      report.violating_units.push_back(i);
    }
  }
  report.fraction_compliant = static_cast<double>(compliant) / data.n_units;
  return report;
}

PanelSchema schema_from_json(const nlohmann::json& j) {
  PanelSchema schema;
  schema.unit_col = j.value("unit_col", std::string("unit"));
  schema.time_col = j.value("time_col", std::string("time"));
  schema.treatment_col = j.value("treatment_col", std::string("treatment"));
  schema.outcome_col = j.value("outcome_col", std::string("outcome"));
  if (!j.contains("covariate_cols") || !j.at("covariate_cols").is_array())
    throw ValidationError("schema requires an ordered covariate_cols list");
  for (const auto& c : j.at("covariate_cols"))
    schema.covariate_cols.push_back(c.get<std::string>());
  return schema;
}

nlohmann::json to_json(const PanelSchema& schema) {
  return {{"unit_col", schema.unit_col},
          {"time_col", schema.time_col},
          {"treatment_col", schema.treatment_col},
          {"outcome_col", schema.outcome_col},
          {"covariate_cols", schema.covariate_cols}};
}

AdjustmentSchedule schedule_from_json(const nlohmann::json& j, const PanelDataset& data) {
  if (j.is_string()) {
    if (j.get<std::string>() == "default") return default_schedule(data);
    throw ValidationError("adjustment must be \"default\" or a selection list");
  }
  AdjustmentSchedule schedule;
  schedule.selection.resize(static_cast<std::size_t>(data.horizon));
  for (const auto& entry : j) {
    const int k = entry.at("k").get<int>();
    if (k < 1 || k > data.horizon)
      throw ValidationError("adjustment entry has k out of range");
    auto& sel = schedule.selection[static_cast<std::size_t>(k - 1)];
    for (const auto& s : entry.at("select")) {
      ColumnRef ref;
      const std::string kind = s.at("kind").get<std::string>();
      if (kind == "x") ref.kind = ColumnRef::Covariate;
      else if (kind == "y") ref.kind = ColumnRef::Outcome;
      else throw ValidationError("adjustment column kind must be \"x\" or \"y\"");
      ref.time = s.at("time").get<int>();
      ref.index = s.value("index", 0);
      sel.push_back(ref);
    }
  }
  validate_schedule(data, schedule);
  return schedule;
}

nlohmann::json to_json(const AdjustmentSchedule& schedule) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t k1 = 0; k1 < schedule.selection.size(); ++k1) {
    nlohmann::json select = nlohmann::json::array();
    for (const auto& ref : schedule.selection[k1]) {
      select.push_back({{"kind", ref.kind == ColumnRef::Covariate ? "x" : "y"},
                        {"time", ref.time},
                        {"index", ref.index}});
    }
    out.push_back({{"k", static_cast<int>(k1 + 1)}, {"select", select}});
  }
  return out;
}

PanelDataset load_panel(const std::string& path, const PanelSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open panel file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty panel file: " + path);
  const auto header = split_csv_line(line);

  auto find_col = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw ValidationError("column '" + name + "' not found in " + path);
  };

  const int unit_c = find_col(schema.unit_col);
  const int time_c = find_col(schema.time_col);
  const int treat_c = find_col(schema.treatment_col);
  const int out_c = find_col(schema.outcome_col);
  std::vector<int> cov_c;
  for (const auto& name : schema.covariate_cols) cov_c.push_back(find_col(name));

  struct Row {
    std::string unit;
    double time;
    int treatment;
    double outcome;
    std::vector<double> covariates;
  };
  std::vector<Row> rows;
  std::size_t row_number = 0;
  while (std::getline(in, line)) {
    ++row_number;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw ValidationError("row " + std::to_string(row_number) + " has " +
                            std::to_string(fields.size()) + " fields, expected " +
                            std::to_string(header.size()));
    Row r;
    r.unit = fields[static_cast<std::size_t>(unit_c)];
    r.time = parse_double(fields[static_cast<std::size_t>(time_c)], row_number);
    const double a = parse_double(fields[static_cast<std::size_t>(treat_c)], row_number);
    if (a != std::floor(a))
      throw ValidationError("treatment is not an integer code at data row " +
                            std::to_string(row_number));
    r.treatment = static_cast<int>(a);
    r.outcome = parse_double(fields[static_cast<std::size_t>(out_c)], row_number);
    for (int c : cov_c)
      r.covariates.push_back(parse_double(fields[static_cast<std::size_t>(c)], row_number));
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ValidationError("panel file has no data rows: " + path);

  std::vector<std::string> units;
  std::vector<double> times;
  for (const auto& r : rows) {
    units.push_back(r.unit);
    times.push_back(r.time);
  }
  std::sort(units.begin(), units.end());
  units.erase(std::unique(units.begin(), units.end()), units.end());
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());

  std::map<std::string, int> unit_index;
  for (std::size_t i = 0; i < units.size(); ++i) unit_index[units[i]] = static_cast<int>(i);
  std::map<double, int> time_index;
  for (std::size_t t = 0; t < times.size(); ++t) time_index[times[t]] = static_cast<int>(t);

  const int n = static_cast<int>(units.size());
  const int T = static_cast<int>(times.size());
  const int d = static_cast<int>(schema.covariate_cols.size());

  PanelDataset data;
  data.n_units = n;
  data.horizon = T - 1;
  data.treatment.setZero(n, T);
  data.outcome.setZero(n, T);
  data.covariates.assign(static_cast<std::size_t>(T), Eigen::MatrixXd::Zero(n, d));
  data.covariate_names.assign(static_cast<std::size_t>(T), schema.covariate_cols);
  data.unit_labels = units;
  data.time_labels = times;
  data.outcome_name = schema.outcome_col;

  Eigen::MatrixXi seen = Eigen::MatrixXi::Zero(n, T);
  for (const auto& r : rows) {
    const int i = unit_index.at(r.unit);
    const int t = time_index.at(r.time);
    if (seen(i, t))
      throw ValidationError("duplicate record for (unit " + r.unit + ", time " +
                            format_double(r.time) + ")");
    seen(i, t) = 1;
    data.treatment(i, t) = r.treatment;
    data.outcome(i, t) = r.outcome;
    for (int c = 0; c < d; ++c)
      data.covariates[static_cast<std::size_t>(t)](i, c) =
          r.covariates[static_cast<std::size_t>(c)];
  }

  std::vector<std::string> missing;
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < T; ++t)
      if (!seen(i, t))
        missing.push_back("(" + units[static_cast<std::size_t>(i)] + "," +
                          format_double(times[static_cast<std::size_t>(t)]) + ")");
  if (!missing.empty()) {
    std::string msg = "unbalanced panel; missing (unit,time) pairs:";
    for (const auto& m : missing) msg += " " + m;
    throw ValidationError(msg);
  }

  std::set<int> alphabet;
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < T; ++t) alphabet.insert(data.treatment(i, t));
  data.treatment_alphabet.assign(alphabet.begin(), alphabet.end());

  validate_panel(data);
  return data;
}

void save_panel(const PanelDataset& data, const std::string& path) {
  std::ostringstream out;
  out << "unit,time,treatment," << csv_escape(data.outcome_name);
  for (const auto& name : data.covariate_names[0]) out << "," << csv_escape(name);
  out << "\n";
  for (int i = 0; i < data.n_units; ++i) {
    for (int t = 0; t < data.n_times(); ++t) {
      out << csv_escape(data.unit_labels[static_cast<std::size_t>(i)]) << ","
          << format_double(data.time_labels[static_cast<std::size_t>(t)]) << ","
          << data.treatment(i, t) << "," << format_double(data.outcome(i, t));
      const auto& X = data.covariates[static_cast<std::size_t>(t)];
      for (int c = 0; c < X.cols(); ++c) out << "," << format_double(X(i, c));
      out << "\n";
    }
  }
  atomic_write_file(path, out.str());
}

void atomic_write_file(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write file: " + tmp);
    out << contents;
    if (!out) throw ValidationError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace didmean
