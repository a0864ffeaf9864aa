#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "tabaconv/csv.hpp"
#include "tabaconv/schema.hpp"

namespace tabaconv {

struct SynthConfig {
  std::size_t n_users = 200;
  std::size_t rows_per_user = 200;
  // Target rate of the clean rule; noise flips are applied on top of it.
  double fraud_rate = 0.05;
  double label_noise = 0.05;
  std::uint64_t seed = 0;
  std::size_t n_merchants = 60;
  std::size_t n_categories = 10;
  std::size_t n_cities = 25;
  double amount_mu = 3.5;
  double amount_sigma = 0.6;
  double mean_gap_hours = 14.0;
  std::int64_t start_epoch = 1577836800;  // 2020-01-01T00:00:00Z

  void validate() const;
  std::string to_json() const;
};

struct SynthRow {
  std::uint64_t row_id = 0;
  std::string user;
  std::int64_t timestamp = 0;
  double amount = 0.0;
  std::string merchant, category, city, channel, card_type, errors;
  double distance_km = 0.0;
  bool rule = false;     // clean fraud rule
  bool flipped = false;  // label noise applied
  int label() const { return rule != flipped; }
};

/// Ground truth: label = [amount > theta ∧ merchant ∈ risky ∧ hour ∈ night] XOR flip.
struct SynthManifest {
  double theta = 0.0;
  std::set<std::string> risky_merchants;
  int night_first_hour = 0;
  int night_last_hour = 5;
  std::vector<std::uint64_t> flipped_rows;
  double rule_rate = 0.0;
  double label_rate = 0.0;

  bool rule(double amount, const std::string& merchant, std::int64_t timestamp) const;
  std::string to_json() const;
  static SynthManifest from_json(const std::string& text);
};

struct SynthData {
  SynthConfig config;
  std::vector<SynthRow> rows;  // user-major, ascending time within user
  SynthManifest manifest;

  CsvTable table() const;
};

inline constexpr const char* kSynthColumns[] = {"row_id",  "user",    "timestamp", "amount",
                                                 "merchant", "category", "city",     "channel",
                                                 "card_type", "errors",  "distance_km", "is_fraud"};

// Column roles for the generated CSV.
ColumnRoles synth_roles();

/// Throws ConfigError with the achievable range when fraud_rate cannot be met.
SynthData generate(const SynthConfig& cfg);
// Writes transactions.csv and manifest.json into out; returns the data.
SynthData generate(const SynthConfig& cfg, const std::filesystem::path& out);

// F1 of the clean rule against the noisy labels over every generated row.
double bayes_f1_bound(const SynthConfig& cfg);
double bayes_f1_bound(const SynthData& data);

// Same bound for downstream windows (OR of the rule vs. OR of the labels) over
// the given users' rows, windowed like make_windows.
double window_bayes_f1_bound(const SynthData& data, const std::vector<std::string>& users, std::size_t window,
                             std::size_t stride);

}  // namespace tabaconv
