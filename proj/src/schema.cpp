#include "tabaconv/schema.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "tabaconv/error.hpp"
#include "tabaconv/rng.hpp"

namespace tabaconv {

using nlohmann::json;

const char* to_string(FieldKind kind) {
  switch (kind) {
    case FieldKind::kCategorical: return "categorical";
    case FieldKind::kContinuous: return "continuous";
    case FieldKind::kTimestamp: return "timestamp";
    case FieldKind::kLabel: return "label";
    case FieldKind::kIgnore: return "ignore";
  }
  return "ignore";
}

FieldKind field_kind_from_string(const std::string& s) {
  if (s == "categorical") return FieldKind::kCategorical;
  if (s == "continuous") return FieldKind::kContinuous;
  if (s == "timestamp") return FieldKind::kTimestamp;
  if (s == "label") return FieldKind::kLabel;
  if (s == "ignore") return FieldKind::kIgnore;
  throw SchemaError("unknown field kind '" + s + "'");
}

std::int32_t FieldSpec::token(const std::string& v) const {
  auto it = index_.find(v);
  return it == index_.end() ? kUnknownToken : it->second;
}

const std::string& FieldSpec::value(std::int32_t token) const {
  if (token < kFirstValueToken || static_cast<std::size_t>(token) >= vocab_size()) {
    throw IndexError("field '" + name + "' has no value for token " + std::to_string(token));
  }
  return vocab[static_cast<std::size_t>(token - kFirstValueToken)];
}

void FieldSpec::rebuild_index() {
  index_.clear();
  for (std::size_t i = 0; i < vocab.size(); ++i) index_.emplace(vocab[i], static_cast<std::int32_t>(i) + kFirstValueToken);
}

// ---------------------------------------------------------------------------
// ColumnRoles

ColumnRoles ColumnRoles::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("column roles are not valid JSON: ") + e.what());
  }
  ColumnRoles r;
  try {
    r.user_column = j.at("user").get<std::string>();
    r.timestamp_column = j.at("timestamp").get<std::string>();
    if (j.contains("label") && !j["label"].is_null()) r.label_column = j["label"].get<std::string>();
    r.categorical = j.value("categorical", std::vector<std::string>{});
    r.continuous = j.value("continuous", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw SchemaError(std::string("invalid column roles: ") + e.what());
  }
  return r;
}

ColumnRoles ColumnRoles::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open column roles file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

std::string ColumnRoles::to_json() const {
  json j{{"user", user_column}, {"timestamp", timestamp_column}, {"categorical", categorical},
         {"continuous", continuous}};
  j["label"] = label_column ? json(*label_column) : json(nullptr);
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// FeatureSchema

std::vector<std::size_t> FeatureSchema::categorical_fields() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fields.size(); ++i)
    if (fields[i].kind == FieldKind::kCategorical) out.push_back(i);
  return out;
}

std::vector<std::size_t> FeatureSchema::continuous_fields() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fields.size(); ++i)
    if (fields[i].kind == FieldKind::kContinuous) out.push_back(i);
  return out;
}

std::array<std::size_t, kNumTimestampComponents> FeatureSchema::timestamp_table_sizes() const {
  const auto years = static_cast<std::size_t>(std::max(0, max_year - min_year) + 1);
  return {years, 13, 32, 7, 54, 24, 60, 60};
}

std::optional<std::int64_t> FeatureSchema::parse_timestamp(std::string_view text) const {
  return timestamp_format == TimestampFormat::kEpochSeconds ? parse_epoch_seconds(text) : parse_iso8601(text);
}

namespace {

json schema_json(const FeatureSchema& s, bool with_warnings) {
  json fields = json::array();
  for (const auto& f : s.fields) {
    json jf{{"name", f.name}, {"kind", to_string(f.kind)}};
    if (f.kind == FieldKind::kCategorical) jf["vocab"] = f.vocab;
    if (f.kind == FieldKind::kContinuous) {
      jf["mean"] = f.mean;
      jf["std"] = f.std;
    }
    fields.push_back(std::move(jf));
  }
  json j{{"format", "tabaconv-schema"},
         {"version", FeatureSchema::kVersion},
         {"user_column", s.user_column},
         {"timestamp_column", s.timestamp_column},
         {"timestamp_format", s.timestamp_format == TimestampFormat::kEpochSeconds ? "epoch" : "iso8601"},
         {"t_min", s.t_min},
         {"t_max", s.t_max},
         {"min_year", s.min_year},
         {"max_year", s.max_year},
         {"fields", std::move(fields)}};
  j["label_column"] = s.label_column ? json(*s.label_column) : json(nullptr);
  if (with_warnings && !s.warnings.empty()) j["warnings"] = s.warnings;
  return j;
}

}  // namespace

std::string FeatureSchema::to_json() const { return schema_json(*this, true).dump(2); }

FeatureSchema FeatureSchema::from_json(const std::string& text) {
  FeatureSchema s;
  try {
    const json j = json::parse(text);
    if (j.value("format", "") != "tabaconv-schema") throw SchemaError("not a schema file");
    const int version = j.at("version").get<int>();
    if (version > kVersion) {
      throw UnsupportedVersionError("schema version " + std::to_string(version) + " is newer than supported " +
                                    std::to_string(kVersion));
    }
    s.user_column = j.at("user_column").get<std::string>();
    s.timestamp_column = j.at("timestamp_column").get<std::string>();
    if (!j.at("label_column").is_null()) s.label_column = j["label_column"].get<std::string>();
    s.timestamp_format = j.at("timestamp_format").get<std::string>() == "epoch" ? TimestampFormat::kEpochSeconds
                                                                                : TimestampFormat::kIso8601;
    s.t_min = j.at("t_min").get<std::int64_t>();
    s.t_max = j.at("t_max").get<std::int64_t>();
    s.min_year = j.at("min_year").get<int>();
    s.max_year = j.at("max_year").get<int>();
    for (const auto& jf : j.at("fields")) {
      FieldSpec f;
      f.name = jf.at("name").get<std::string>();
      f.kind = field_kind_from_string(jf.at("kind").get<std::string>());
      if (f.kind == FieldKind::kCategorical) f.vocab = jf.at("vocab").get<std::vector<std::string>>();
      if (f.kind == FieldKind::kContinuous) {
        f.mean = jf.at("mean").get<double>();
        f.std = jf.at("std").get<double>();
      }
      f.rebuild_index();
      s.fields.push_back(std::move(f));
    }
    s.warnings = j.value("warnings", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw SchemaError(std::string("invalid schema JSON: ") + e.what());
  }
  return s;
}

void FeatureSchema::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write schema to " + path.string());
  out << to_json() << '\n';
}

FeatureSchema FeatureSchema::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open schema " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

std::uint64_t FeatureSchema::digest() const {
  const std::string canonical = schema_json(*this, false).dump();
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Inference and encoding

namespace {

bool is_missing(const std::string& v) {
  return v.empty() || v == "NA" || v == "NaN" || v == "nan" || v == "null";
}

std::optional<double> parse_double(const std::string& v) {
  double out = 0.0;
  const char* first = v.data();
  const char* last = v.data() + v.size();
  while (first < last && *first == ' ') ++first;
  while (last > first && (last[-1] == ' ' || last[-1] == '\r')) --last;
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last || !std::isfinite(out)) return std::nullopt;
  return out;
}

std::optional<std::int8_t> parse_label(const std::string& v) {
  if (v == "1" || v == "true" || v == "True" || v == "yes" || v == "Yes") return 1;
  if (v == "0" || v == "false" || v == "False" || v == "no" || v == "No") return 0;
  return std::nullopt;
}

// Collects row-level failures and reports them in one error.
class RowErrors {
 public:
  explicit RowErrors(std::string what) : what_(std::move(what)) {}
  void add(std::size_t row, const std::string& msg) {
    if (shown_.size() < 10) shown_.push_back("row " + std::to_string(row) + ": " + msg);
    ++count_;
  }
  template <typename E>
  void raise_if_any() const {
    if (count_ == 0) return;
    std::string msg = what_ + ": " + std::to_string(count_) + " bad row(s)";
    for (const auto& s : shown_) msg += "\n  " + s;
    if (count_ > shown_.size()) msg += "\n  ...";
    throw E(msg);
  }

 private:
  std::string what_;
  std::vector<std::string> shown_;
  std::size_t count_ = 0;
};

}  // namespace

FeatureSchema infer_schema(const CsvTable& table, const ColumnRoles& roles,
                           const std::unordered_set<std::string>* training_users) {
  std::map<std::string, FieldKind> kinds;
  auto assign = [&](const std::string& col, FieldKind kind) {
    table.column(col);
    auto [it, inserted] = kinds.emplace(col, kind);
    if (!inserted && it->second != kind) {
      throw SchemaError("column '" + col + "' is assigned both " + to_string(it->second) + " and " + to_string(kind));
    }
  };
  table.column(roles.user_column);
  assign(roles.timestamp_column, FieldKind::kTimestamp);
  if (roles.label_column) assign(*roles.label_column, FieldKind::kLabel);
  for (const auto& c : roles.categorical) assign(c, FieldKind::kCategorical);
  for (const auto& c : roles.continuous) assign(c, FieldKind::kContinuous);
  if (kinds.count(roles.user_column)) throw SchemaError("user column cannot also be a feature");

  FeatureSchema schema;
  schema.user_column = roles.user_column;
  schema.timestamp_column = roles.timestamp_column;
  schema.label_column = roles.label_column;

  const std::size_t user_col = table.column(roles.user_column);
  std::vector<std::size_t> train_rows;
  for (std::size_t r = 0; r < table.rows.size(); ++r)
    if (!training_users || training_users->count(table.rows[r][user_col])) train_rows.push_back(r);

  // Timestamp format: epoch seconds when every value is an integer.
  const std::size_t ts_col = table.column(roles.timestamp_column);
  bool all_epoch = !train_rows.empty();
  for (std::size_t r : train_rows)
    if (!parse_epoch_seconds(table.rows[r][ts_col])) {
      all_epoch = false;
      break;
    }
  schema.timestamp_format = all_epoch ? TimestampFormat::kEpochSeconds : TimestampFormat::kIso8601;
  RowErrors ts_errors("unparseable timestamps in column '" + roles.timestamp_column + "'");
  bool have_ts = false;
  for (std::size_t r : train_rows) {
    auto ts = schema.parse_timestamp(table.rows[r][ts_col]);
    if (!ts || *ts < kMinEpochSeconds || *ts > kMaxEpochSeconds) {
      ts_errors.add(r, "'" + table.rows[r][ts_col] + "'");
      continue;
    }
    schema.t_min = have_ts ? std::min(schema.t_min, *ts) : *ts;
    schema.t_max = have_ts ? std::max(schema.t_max, *ts) : *ts;
    have_ts = true;
  }
  ts_errors.raise_if_any<SchemaError>();
  if (have_ts) {
    schema.min_year = calendar_parts(schema.t_min).year;
    schema.max_year = calendar_parts(schema.t_max).year;
  }

  RowErrors value_errors("unparseable continuous values");
  for (std::size_t c = 0; c < table.header.size(); ++c) {
    const std::string& name = table.header[c];
    if (name == roles.user_column) continue;
    FieldSpec f;
    f.name = name;
    auto it = kinds.find(name);
    f.kind = it == kinds.end() ? FieldKind::kIgnore : it->second;
    if (f.kind == FieldKind::kCategorical) {
      std::unordered_set<std::string> seen;
      for (std::size_t r : train_rows) {
        const std::string& v = table.rows[r][c];
        if (!is_missing(v) && seen.insert(v).second) f.vocab.push_back(v);
      }
      f.rebuild_index();
    } else if (f.kind == FieldKind::kContinuous) {
      double total = 0.0;
      std::size_t n = 0;
      std::vector<double> values;
      for (std::size_t r : train_rows) {
        const std::string& v = table.rows[r][c];
        if (is_missing(v)) continue;
        auto x = parse_double(v);
        if (!x) {
          value_errors.add(r, "column '" + name + "' value '" + v + "'");
          continue;
        }
        values.push_back(*x);
        total += *x;
        ++n;
      }
      f.mean = n ? total / static_cast<double>(n) : 0.0;
      double ss = 0.0;
      for (double x : values) ss += (x - f.mean) * (x - f.mean);
      f.std = n ? std::sqrt(ss / static_cast<double>(n)) : 0.0;
      if (!(f.std > 0.0)) {
        const std::string w = "continuous field '" + name + "' has zero variance on the training split; ignored";
        std::clog << "warning: " << w << '\n';
        schema.warnings.push_back(w);
        f.kind = FieldKind::kIgnore;
        f.mean = 0.0;
        f.std = 1.0;
      }
    }
    schema.fields.push_back(std::move(f));
  }
  value_errors.raise_if_any<SchemaError>();
  return schema;
}

FeatureSchema infer_schema(const std::filesystem::path& csv_path, const ColumnRoles& roles) {
  return infer_schema(read_csv(csv_path), roles);
}

std::vector<UserRows> encode_rows(const CsvTable& table, const FeatureSchema& schema) {
  const std::size_t user_col = table.column(schema.user_column);
  const std::size_t ts_col = table.column(schema.timestamp_column);
  std::optional<std::size_t> label_col;
  if (schema.label_column) label_col = table.column(*schema.label_column);
  std::vector<std::size_t> cat_cols, cont_cols;
  std::vector<const FieldSpec*> cat_specs, cont_specs;
  for (const auto& f : schema.fields) {
    if (f.kind == FieldKind::kCategorical) {
      cat_cols.push_back(table.column(f.name));
      cat_specs.push_back(&f);
    } else if (f.kind == FieldKind::kContinuous) {
      cont_cols.push_back(table.column(f.name));
      cont_specs.push_back(&f);
    }
  }

  std::vector<UserRows> users;
  std::unordered_map<std::string, std::size_t> user_index;
  RowErrors errors("cannot encode CSV rows");
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    EncodedRow e;
    e.source_row = r;
    auto ts = schema.parse_timestamp(row[ts_col]);
    if (!ts || *ts < kMinEpochSeconds || *ts > kMaxEpochSeconds) {
      errors.add(r, "timestamp '" + row[ts_col] + "'");
      continue;
    }
    e.timestamp = *ts;
    e.cat.reserve(cat_cols.size());
    for (std::size_t i = 0; i < cat_cols.size(); ++i) {
      const std::string& v = row[cat_cols[i]];
      e.cat.push_back(is_missing(v) ? kUnknownToken : cat_specs[i]->token(v));
    }
    e.cont.reserve(cont_cols.size());
    bool ok = true;
    for (std::size_t i = 0; i < cont_cols.size(); ++i) {
      const std::string& v = row[cont_cols[i]];
      const FieldSpec& f = *cont_specs[i];
      double x = f.mean;  // missing values are imputed with the training mean
      if (!is_missing(v)) {
        auto parsed = parse_double(v);
        if (!parsed) {
          errors.add(r, "column '" + f.name + "' value '" + v + "'");
          ok = false;
          break;
        }
        x = *parsed;
      }
      e.cont.push_back(static_cast<float>((x - f.mean) / f.std));
    }
    if (!ok) continue;
    if (label_col && !is_missing(row[*label_col])) {
      e.label = parse_label(row[*label_col]);
      if (!e.label) {
        errors.add(r, "label '" + row[*label_col] + "'");
        continue;
      }
    }
    auto [it, inserted] = user_index.emplace(row[user_col], users.size());
    if (inserted) users.push_back(UserRows{row[user_col], {}});
    users[it->second].rows.push_back(std::move(e));
  }
  errors.raise_if_any<ValueError>();
  for (auto& u : users) {
    std::stable_sort(u.rows.begin(), u.rows.end(),
                     [](const EncodedRow& a, const EncodedRow& b) { return a.timestamp < b.timestamp; });
  }
  return users;
}

UserSplit split_users(const CsvTable& table, const std::string& user_column, double train_fraction,
                      double validation_fraction, std::uint64_t seed) {
  if (train_fraction < 0 || validation_fraction < 0 || train_fraction + validation_fraction > 1.0) {
    throw ConfigError("split fractions must be non-negative and sum to at most 1");
  }
  const std::size_t col = table.column(user_column);
  std::vector<std::string> users;
  std::unordered_set<std::string> seen;
  for (const auto& r : table.rows)
    if (seen.insert(r[col]).second) users.push_back(r[col]);
  Rng rng(seed, 0x73706c6974);
  rng.shuffle(std::span<std::string>(users));
  const auto n = users.size();
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train,
                              static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(n))));
  UserSplit split;
  split.train.assign(users.begin(), users.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.validation.assign(users.begin() + static_cast<std::ptrdiff_t>(n_train),
                          users.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  split.test.assign(users.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), users.end());
  return split;
}

CsvTable select_users(const CsvTable& table, const std::string& user_column, const std::vector<std::string>& users) {
  const std::size_t col = table.column(user_column);
  const std::unordered_set<std::string> keep(users.begin(), users.end());
  CsvTable out;
  out.header = table.header;
  for (const auto& r : table.rows)
    if (keep.count(r[col])) out.rows.push_back(r);
  return out;
}

}  // namespace tabaconv
