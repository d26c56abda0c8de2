#include <charconv>
#include <fstream>
#include <sstream>

#include "caresurv/cohort.hpp"
#include "caresurv/util.hpp"

namespace caresurv {

namespace {

// RFC 4180 field splitting; quoted fields may contain commas and doubled quotes.
bool split_csv_line(const std::string& line, std::vector<std::string>& fields) {
  fields.clear();
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  return !quoted;
}

std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

int parse_strict_int(const std::string& text, const char* what) {
  const std::string t = trim(text);
  int v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw ValidationError(std::string(what) + ": cannot parse '" + t + "'");
  }
  return v;
}

}  // namespace

IngestResult ingest_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path.string() + ": missing header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  if (!line.empty() && line.back() == '\r') line.pop_back();

  std::vector<std::string> header;
  if (!split_csv_line(line, header)) throw ValidationError(path.string() + ": malformed header row");
  for (auto& h : header) h = trim(h);

  const std::size_t p = schema.features.size();
  std::vector<std::optional<std::size_t>> feature_col(p);
  std::optional<std::size_t> time_col, event_col, reason_col;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == schema.time_column) {
      time_col = c;
    } else if (header[c] == schema.event_column) {
      event_col = c;
    } else if (header[c] == schema.reason_column) {
      reason_col = c;
    } else if (auto j = find_feature(schema.features, header[c])) {
      feature_col[*j] = c;
    } else {
      throw ValidationError(path.string() + ": unknown column '" + header[c] + "'");
    }
  }
  if (!time_col || !event_col) {
    throw ValidationError(path.string() + ": header must contain '" + schema.time_column + "' and '" +
                          schema.event_column + "'");
  }
  for (std::size_t j = 0; j < p; ++j) {
    if (!feature_col[j]) throw ValidationError(path.string() + ": missing column '" + schema.features[j].name + "'");
  }

  IngestResult result;
  std::vector<ResidentRecord> records;
  Outcomes outcomes;
  std::vector<std::string> fields;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    ++result.rows_read;
    try {
      if (!split_csv_line(line, fields)) throw ValidationError("unterminated quoted field");
      if (fields.size() != header.size()) {
        throw ValidationError("expected " + std::to_string(header.size()) + " fields, found " +
                              std::to_string(fields.size()));
      }
      SurvivalOutcome out;
      out.time_days = parse_strict_int(fields[*time_col], schema.time_column.c_str());
      const int ev = parse_strict_int(fields[*event_col], schema.event_column.c_str());
      if (ev != 0 && ev != 1) throw ValidationError("event must be 0 or 1");
      out.event = ev == 1;
      out.reason = out.event ? CensorReason::kNone : CensorReason::kCurrentResident;
      if (reason_col && !trim(fields[*reason_col]).empty()) out.reason = censor_reason_from_string(fields[*reason_col]);
      if (out.time_days <= 0) {
        ++result.rejected_nonpositive_time;
        continue;
      }
      validate(out);
      ResidentRecord rec;
      rec.values.assign(p, std::nullopt);
      for (std::size_t j = 0; j < p; ++j) {
        const std::string cell = trim(fields[*feature_col[j]]);
        if (cell.empty()) continue;
        rec.values[j] = schema.features[j].encode(cell);
      }
      records.push_back(std::move(rec));
      outcomes.push_back(out);
    } catch (const ValidationError& e) {
      result.errors.push_back({line_no, e.what()});
    }
  }
  if (result.rows_read > 0 &&
      static_cast<double>(result.errors.size()) > kMaxMalformedFraction * static_cast<double>(result.rows_read)) {
    std::ostringstream msg;
    msg << path.string() << ": " << result.errors.size() << " of " << result.rows_read
        << " rows malformed (limit 10%); first error at line " << result.errors.front().line << ": "
        << result.errors.front().message;
    throw ValidationError(msg.str());
  }
  result.cohort = Cohort(schema.features, std::move(records), std::move(outcomes));
  return result;
}

void write_csv(const Cohort& cohort, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  for (const auto& f : cohort.features()) out << quote_if_needed(f.name) << ',';
  out << "time_days,event,censor_reason\n";
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    for (const auto& v : cohort.records()[i].values) {
      if (v) out << static_cast<long long>(*v);
      out << ',';
    }
    const auto& o = cohort.outcomes()[i];
    out << o.time_days << ',' << (o.event ? 1 : 0) << ',' << to_string(o.reason) << '\n';
  }
  if (!out) throw ValidationError("write failed for " + path.string());
}

}  // namespace caresurv
