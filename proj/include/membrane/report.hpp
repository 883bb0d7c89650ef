#pragma once

// Tabular experiment reports and their csv / ndjson encodings.
//
// Every file opens with '#'-prefixed header lines (csv) or one header object
// (ndjson) carrying the schema version; wall-clock timestamps appear only
// there, so data sections of two identical runs compare byte for byte.

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace membrane {

inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char* kCodeVersion = "1.0.0";

using Value = std::variant<std::monostate, std::int64_t, double, std::string>;

/// 17 significant digits, so every double survives a text round trip.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct ReportRow {
  std::map<std::string, Value> fields;

  ReportRow& set(const std::string& k, Value v) {
    fields[k] = std::move(v);
    return *this;
  }
  // Explicit overloads keep integer and floating arguments from converting
  // into each other on the way to Value.
  ReportRow& set(const std::string& k, int v) { return set(k, Value(std::int64_t(v))); }
  ReportRow& set(const std::string& k, long v) { return set(k, Value(std::int64_t(v))); }
  ReportRow& set(const std::string& k, long long v) { return set(k, Value(std::int64_t(v))); }
  ReportRow& set(const std::string& k, unsigned long v) { return set(k, Value(std::int64_t(v))); }
  ReportRow& set(const std::string& k, double v) { return set(k, Value(v)); }
  ReportRow& set(const std::string& k, const std::string& v) { return set(k, Value(v)); }
  ReportRow& set(const std::string& k, const char* v) { return set(k, Value(std::string(v))); }
  ReportRow& set(const std::string& k, bool v) { return set(k, Value(std::string(v ? "true" : "false"))); }
  template <class T>
  ReportRow& set_opt(const std::string& k, const std::optional<T>& v) {
    if (v) set(k, *v);
    return *this;
  }

  const Value& get(const std::string& k) const {
    static const Value empty;
    auto it = fields.find(k);
    return it == fields.end() ? empty : it->second;
  }
  double number(const std::string& k) const {
    const Value& v = get(k);
    if (auto d = std::get_if<double>(&v)) return *d;
    if (auto i = std::get_if<std::int64_t>(&v)) return double(*i);
    return std::nan("");
  }
  std::string text(const std::string& k) const {
    const Value& v = get(k);
    if (auto s = std::get_if<std::string>(&v)) return *s;
    return {};
  }
  bool has(const std::string& k) const {
    return !std::holds_alternative<std::monostate>(get(k));
  }
};

struct Report {
  std::string command;
  std::vector<std::string> columns;  // emission order
  std::vector<ReportRow> rows;
  std::vector<std::string> warnings;
  std::string config_fingerprint;
  bool failed = false;  // validate: some check failed
  bool interrupted = false;

  ReportRow& add(ReportRow row) {
    row.set("command", command);
    row.set("config_fp", config_fingerprint);
    row.set("code_version", kCodeVersion);
    rows.push_back(std::move(row));
    return rows.back();
  }
};

enum class Format { csv, ndjson };

inline Format parse_format(const std::string& s) {
  if (s == "csv") return Format::csv;
  if (s == "ndjson") return Format::ndjson;
  throw std::invalid_argument("unknown format '" + s + "' (expected csv or ndjson)");
}

namespace detail {

inline std::string csv_cell(const Value& v) {
  struct {
    std::string operator()(std::monostate) const { return ""; }
    std::string operator()(std::int64_t i) const { return std::to_string(i); }
    std::string operator()(double d) const { return format_double(d); }
    std::string operator()(const std::string& s) const {
      if (s.find_first_of(",\"\n") == std::string::npos) return s;
      std::string q = "\"";
      for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
      return q + "\"";
    }
  } visit;
  return std::visit(visit, v);
}

inline std::string json_value(const Value& v) {
  struct {
    std::string operator()(std::monostate) const { return "null"; }
    std::string operator()(std::int64_t i) const { return std::to_string(i); }
    std::string operator()(double d) const {
      return std::isfinite(d) ? format_double(d) : nlohmann::json(format_double(d)).dump();
    }
    std::string operator()(const std::string& s) const { return nlohmann::json(s).dump(); }
  } visit;
  return std::visit(visit, v);
}

}  // namespace detail

/// Header lines: everything that may legitimately differ between two runs
/// of the same configuration (the timestamp) lives here and only here.
inline void emit(std::ostream& out, const Report& r, Format f, const std::string& timestamp) {
  if (f == Format::csv) {
    out << "# membrane_lab report\n"
        << "# schema_version=" << kReportSchemaVersion << "\n"
        << "# command=" << r.command << "\n"
        << "# code_version=" << kCodeVersion << "\n"
        << "# config_fp=" << r.config_fingerprint << "\n"
        << "# generated=" << timestamp << "\n";
    for (std::size_t i = 0; i < r.columns.size(); ++i) out << (i ? "," : "") << r.columns[i];
    out << "\n";
    for (const auto& row : r.rows) {
      for (std::size_t i = 0; i < r.columns.size(); ++i)
        out << (i ? "," : "") << detail::csv_cell(row.get(r.columns[i]));
      out << "\n";
    }
  } else {
    nlohmann::ordered_json header;
    header["schema_version"] = kReportSchemaVersion;
    header["command"] = r.command;
    header["code_version"] = kCodeVersion;
    header["config_fp"] = r.config_fingerprint;
    header["columns"] = r.columns;
    header["generated"] = timestamp;
    out << header.dump() << "\n";
    for (const auto& row : r.rows) {
      out << "{";
      bool first = true;
      for (const auto& c : r.columns) {
        if (!row.has(c)) continue;
        out << (first ? "" : ",") << nlohmann::json(c).dump() << ":" << detail::json_value(row.get(c));
        first = false;
      }
      out << "}\n";
    }
  }
  if (!out) throw std::runtime_error("failed to write report");
}

/// The part of an emitted report that must be reproducible: everything but
/// the header.
inline std::string data_section(const std::string& text) {
  std::istringstream in(text);
  std::string line, out;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] == '#') continue;
    if (first && line.rfind("{\"schema_version\"", 0) == 0) {
      first = false;
      continue;
    }
    first = false;
    out += line + "\n";
  }
  return out;
}

namespace detail {

inline Value parse_cell(const std::string& s) {
  if (s.empty()) return {};
  char* end = nullptr;
  const long long i = std::strtoll(s.c_str(), &end, 10);
  if (end && *end == '\0') return std::int64_t(i);
  const double d = std::strtod(s.c_str(), &end);
  if (end && *end == '\0') return d;
  return s;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') cells.back() += '"', ++i;
      else if (c == '"') quoted = false;
      else cells.back() += c;
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.emplace_back();
    } else {
      cells.back() += c;
    }
  }
  return cells;
}

}  // namespace detail

/// Reads a report written by emit (either format).
inline Report parse_report(std::istream& in) {
  Report r;
  std::string line;
  bool json = false, have_columns = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# command=", 0) == 0) r.command = line.substr(10);
      if (line.rfind("# config_fp=", 0) == 0) r.config_fingerprint = line.substr(12);
      continue;
    }
    if (!have_columns) {
      have_columns = true;
      if (line[0] == '{') {
        json = true;
        const auto h = nlohmann::json::parse(line);
        r.command = h.at("command");
        r.config_fingerprint = h.at("config_fp");
        r.columns = h.at("columns").get<std::vector<std::string>>();
      } else {
        r.columns = detail::split_csv(line);
      }
      continue;
    }
    ReportRow row;
    if (json) {
      const auto j = nlohmann::json::parse(line);
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (it->is_number_integer()) row.set(it.key(), Value(it->get<std::int64_t>()));
        else if (it->is_number()) row.set(it.key(), Value(it->get<double>()));
        else if (it->is_string()) row.set(it.key(), detail::parse_cell(it->get<std::string>()));
      }
    } else {
      const auto cells = detail::split_csv(line);
      if (cells.size() != r.columns.size()) throw std::runtime_error("csv row has wrong column count");
      for (std::size_t i = 0; i < cells.size(); ++i) {
        Value v = detail::parse_cell(cells[i]);
        if (!std::holds_alternative<std::monostate>(v)) row.set(r.columns[i], std::move(v));
      }
    }
    r.rows.push_back(std::move(row));
  }
  return r;
}

}  // namespace membrane
