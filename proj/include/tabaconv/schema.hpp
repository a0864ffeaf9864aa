#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "tabaconv/calendar.hpp"
#include "tabaconv/csv.hpp"

namespace tabaconv {

enum class FieldKind { kCategorical, kContinuous, kTimestamp, kLabel, kIgnore };
enum class TimestampFormat { kEpochSeconds, kIso8601 };

const char* to_string(FieldKind kind);
FieldKind field_kind_from_string(const std::string& s);

inline constexpr std::int32_t kPadToken = 0;
inline constexpr std::int32_t kMaskToken = 1;
// Unseen or missing categorical values. Windows are never padded, so the PAD
// row doubles as the unknown-value embedding.
inline constexpr std::int32_t kUnknownToken = kPadToken;
inline constexpr std::int32_t kFirstValueToken = 2;

struct FieldSpec {
  std::string name;
  FieldKind kind = FieldKind::kIgnore;
  std::vector<std::string> vocab;  // token id = index + kFirstValueToken
  double mean = 0.0;
  double std = 1.0;

  std::size_t vocab_size() const { return vocab.size() + kFirstValueToken; }
  std::int32_t token(const std::string& value) const;
  const std::string& value(std::int32_t token) const;

  void rebuild_index();

 private:
  std::unordered_map<std::string, std::int32_t> index_;
};

/// How each CSV column is used. Columns not mentioned are ignored.
struct ColumnRoles {
  std::string user_column;
  std::string timestamp_column;
  std::optional<std::string> label_column;
  std::vector<std::string> categorical;
  std::vector<std::string> continuous;

  static ColumnRoles from_json(const std::string& text);
  static ColumnRoles load(const std::filesystem::path& path);
  std::string to_json() const;
};

struct FeatureSchema {
  static constexpr int kVersion = 1;

  std::vector<FieldSpec> fields;  // CSV column order, user column excluded
  std::string user_column;
  std::string timestamp_column;
  std::optional<std::string> label_column;
  TimestampFormat timestamp_format = TimestampFormat::kEpochSeconds;
  std::int64_t t_min = 0;
  std::int64_t t_max = 0;
  int min_year = 1970;
  int max_year = 1970;
  std::vector<std::string> warnings;  // not part of the digest

  std::vector<std::size_t> categorical_fields() const;
  std::vector<std::size_t> continuous_fields() const;
  std::size_t num_categorical() const { return categorical_fields().size(); }
  std::size_t num_continuous() const { return continuous_fields().size(); }

  // Embedding table rows per timestamp component: year offsets, month 1..12,
  // day 1..31, weekday 0..6, ISO week 1..53, hour, minute, second. Tables are
  // indexed by the raw component value; unused low rows are never read.
  std::array<std::size_t, kNumTimestampComponents> timestamp_table_sizes() const;

  std::array<std::int32_t, kNumTimestampComponents> decompose(std::int64_t ts) const {
    return decompose_timestamp(ts, min_year, max_year);
  }
  std::array<double, kNumTimeFloats> time_floats(std::int64_t ts) const {
    return tabaconv::time_floats(ts, t_min, t_max);
  }

  std::optional<std::int64_t> parse_timestamp(std::string_view text) const;

  std::string to_json() const;
  static FeatureSchema from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static FeatureSchema load(const std::filesystem::path& path);

  // FNV-1a 64 of the canonical JSON form.
  std::uint64_t digest() const;
};

/// Builds vocabularies, normalisation statistics and the time range from the
/// rows whose user is in training_users (all rows when null).
FeatureSchema infer_schema(const CsvTable& table, const ColumnRoles& roles,
                           const std::unordered_set<std::string>* training_users = nullptr);
FeatureSchema infer_schema(const std::filesystem::path& csv_path, const ColumnRoles& roles);

struct EncodedRow {
  std::vector<std::int32_t> cat;
  std::vector<float> cont;  // z-scored
  std::int64_t timestamp = 0;
  std::optional<std::int8_t> label;
  std::size_t source_row = 0;
};

struct UserRows {
  std::string user_id;
  std::vector<EncodedRow> rows;  // ascending timestamp, ties in file order
};

/// Groups rows by user (first appearance order) and encodes every cell with the
/// schema. Row-level parse failures are aggregated into one ValueError.
std::vector<UserRows> encode_rows(const CsvTable& table, const FeatureSchema& schema);

/// Partition of users into train/validation/test by seeded permutation.
struct UserSplit {
  std::vector<std::string> train, validation, test;
};
UserSplit split_users(const CsvTable& table, const std::string& user_column, double train_fraction,
                      double validation_fraction, std::uint64_t seed);
CsvTable select_users(const CsvTable& table, const std::string& user_column,
                      const std::vector<std::string>& users);

}  // namespace tabaconv
