#include "tabaconv/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "json.hpp"
#include "tabaconv/calendar.hpp"
#include "tabaconv/error.hpp"
#include "tabaconv/rng.hpp"
#include "tabaconv/training.hpp"

namespace tabaconv {

using json = nlohmann::json;

namespace {

constexpr const char* kChannels[] = {"chip", "online", "swipe"};
constexpr const char* kCardTypes[] = {"credit", "debit", "prepaid"};
constexpr std::size_t kFavourites = 5;

std::string numbered(const char* prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

int hour_of(std::int64_t ts) { return static_cast<int>(((ts % 86400) + 86400) % 86400 / 3600); }

// Index drawn with probability proportional to weights.
std::size_t draw(const std::vector<double>& cumulative, Rng& rng) {
  const double u = rng.uniform() * cumulative.back();
  return static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
}

}  // namespace

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("synth config: " + m); };
  if (n_users == 0 || rows_per_user == 0) fail("n_users and rows_per_user must be positive");
  if (!(fraud_rate >= 0.0 && fraud_rate <= 1.0)) fail("fraud_rate must lie in [0, 1], got " + std::to_string(fraud_rate));
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) fail("label_noise must lie in [0, 1], got " + std::to_string(label_noise));
  if (n_merchants < 2 || n_categories < 2 || n_cities < 2) fail("vocabulary sizes must be at least 2");
  if (!(amount_sigma > 0.0) || !std::isfinite(amount_mu)) fail("amount distribution parameters are invalid");
  if (!(mean_gap_hours > 0.0)) fail("mean_gap_hours must be positive");
}

std::string SynthConfig::to_json() const {
  return json{{"n_users", n_users},         {"rows_per_user", rows_per_user}, {"fraud_rate", fraud_rate},
              {"label_noise", label_noise}, {"seed", seed},                   {"n_merchants", n_merchants},
              {"n_categories", n_categories}, {"n_cities", n_cities},         {"amount_mu", amount_mu},
              {"amount_sigma", amount_sigma}, {"mean_gap_hours", mean_gap_hours}, {"start_epoch", start_epoch}}
      .dump();
}

bool SynthManifest::rule(double amount, const std::string& merchant, std::int64_t timestamp) const {
  const int h = hour_of(timestamp);
  return amount > theta && risky_merchants.count(merchant) && h >= night_first_hour && h <= night_last_hour;
}

std::string SynthManifest::to_json() const {
  json j{{"rule", "is_fraud = (amount > theta AND merchant in risky_merchants AND hour in [night_first_hour, "
                  "night_last_hour]) XOR row_id in flipped_rows"},
         {"theta", theta},
         {"risky_merchants", risky_merchants},
         {"night_first_hour", night_first_hour},
         {"night_last_hour", night_last_hour},
         {"rule_rate", rule_rate},
         {"label_rate", label_rate},
         {"flipped_rows", flipped_rows}};
  return j.dump(2);
}

SynthManifest SynthManifest::from_json(const std::string& text) {
  SynthManifest m;
  try {
    const json j = json::parse(text);
    m.theta = j.at("theta");
    m.risky_merchants = j.at("risky_merchants").get<std::set<std::string>>();
    m.night_first_hour = j.at("night_first_hour");
    m.night_last_hour = j.at("night_last_hour");
    m.flipped_rows = j.at("flipped_rows").get<std::vector<std::uint64_t>>();
    m.rule_rate = j.at("rule_rate");
    m.label_rate = j.at("label_rate");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid manifest: ") + e.what());
  }
  return m;
}

CsvTable SynthData::table() const {
  CsvTable t;
  t.header.assign(std::begin(kSynthColumns), std::end(kSynthColumns));
  t.rows.reserve(rows.size());
  for (const auto& r : rows) {
    t.rows.push_back({std::to_string(r.row_id), r.user, format_iso8601(r.timestamp), fixed(r.amount, 2), r.merchant,
                      r.category, r.city, r.channel, r.card_type, r.errors, fixed(r.distance_km, 1),
                      std::to_string(r.label())});
  }
  return t;
}

ColumnRoles synth_roles() {
  ColumnRoles r;
  r.user_column = "user";
  r.timestamp_column = "timestamp";
  r.label_column = "is_fraud";
  r.categorical = {"merchant", "category", "city", "channel", "card_type", "errors"};
  r.continuous = {"amount", "distance_km"};
  return r;
}

SynthData generate(const SynthConfig& cfg) {
  cfg.validate();
  SynthData data;
  data.config = cfg;
  const Rng root(cfg.seed, 0x73796E74ULL);

  // World: merchant popularity (Zipf-like), each merchant's primary category
  // and each category's amount offset and preferred channel.
  Rng world = root.split(0);
  std::vector<double> popularity(cfg.n_merchants);
  for (std::size_t m = 0; m < cfg.n_merchants; ++m) popularity[m] = 1.0 / std::pow(static_cast<double>(m + 1), 0.8);
  std::partial_sum(popularity.begin(), popularity.end(), popularity.begin());
  std::vector<std::size_t> merchant_category(cfg.n_merchants);
  for (auto& c : merchant_category) c = world.below(cfg.n_categories);
  std::vector<double> category_offset(cfg.n_categories);
  std::vector<std::size_t> category_channel(cfg.n_categories);
  for (std::size_t c = 0; c < cfg.n_categories; ++c) {
    category_offset[c] = world.uniform(-1.0, 1.0);
    category_channel[c] = world.below(std::size(kChannels));
  }

  data.rows.reserve(cfg.n_users * cfg.rows_per_user);
  std::uint64_t row_id = 0;
  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    Rng rng = root.split(1 + u);
    const std::string user = numbered("u", u, 4);
    const std::size_t home = rng.below(cfg.n_cities);
    const double card_u = rng.uniform();
    const char* card = card_u < 0.6 ? kCardTypes[0] : card_u < 0.9 ? kCardTypes[1] : kCardTypes[2];
    std::vector<std::size_t> favourites;
    for (std::size_t i = 0; i < std::min(kFavourites, cfg.n_merchants); ++i) favourites.push_back(draw(popularity, rng));

    std::int64_t ts = cfg.start_epoch + static_cast<std::int64_t>(rng.below(7 * 86400));
    for (std::size_t i = 0; i < cfg.rows_per_user; ++i) {
      if (i > 0) ts += 1 + static_cast<std::int64_t>(rng.exponential(cfg.mean_gap_hours * 3600.0));
      SynthRow r;
      r.row_id = row_id++;
      r.user = user;
      r.timestamp = ts;
      const std::size_t m = rng.bernoulli(0.8) ? favourites[rng.below(favourites.size())] : draw(popularity, rng);
      const std::size_t c = rng.bernoulli(0.9) ? merchant_category[m] : rng.below(cfg.n_categories);
      const std::size_t city = rng.bernoulli(0.85) ? home : rng.below(cfg.n_cities);
      const std::size_t ch = rng.bernoulli(0.8) ? category_channel[c] : rng.below(std::size(kChannels));
      r.merchant = numbered("m", m, 3);
      r.category = numbered("c", c, 2);
      r.city = numbered("city", city, 2);
      r.channel = kChannels[ch];
      r.card_type = card;
      const double e = rng.uniform();
      r.errors = e < 0.97 ? "none" : e < 0.99 ? "bad_pin" : "insufficient_balance";
      r.amount = std::round(std::exp(cfg.amount_mu + category_offset[c] + cfg.amount_sigma * rng.normal()) * 100.0) / 100.0;
      r.distance_km = std::round(rng.exponential(city == home ? 5.0 : 300.0) * 10.0) / 10.0;
      data.rows.push_back(std::move(r));
    }
  }

  // Rule calibration: grow the risky merchant set (seeded order) until it
  // covers twice the target among night rows, then put theta at the amount
  // quantile that leaves exactly the target count above it.
  SynthManifest& man = data.manifest;
  const std::size_t n = data.rows.size();
  const auto target = static_cast<std::size_t>(std::llround(cfg.fraud_rate * static_cast<double>(n)));
  std::unordered_map<std::string, std::vector<double>> night_amounts;
  std::size_t night_total = 0;
  for (const auto& r : data.rows) {
    const int h = hour_of(r.timestamp);
    if (h >= man.night_first_hour && h <= man.night_last_hour) {
      night_amounts[r.merchant].push_back(r.amount);
      ++night_total;
    }
  }
  if (target > night_total) {
    throw ConfigError("fraud_rate " + std::to_string(cfg.fraud_rate) + " is unreachable: the rule fires only on night "
                      "rows, so the achievable range is [0, " +
                      std::to_string(static_cast<double>(night_total) / static_cast<double>(n)) + "]");
  }
  std::vector<std::size_t> order(cfg.n_merchants);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng pick = root.split(0x7269736BULL);
  pick.shuffle(std::span<std::size_t>(order));
  std::vector<double> candidates;
  for (std::size_t m : order) {
    if (candidates.size() >= 2 * target && target > 0) break;
    const std::string name = numbered("m", m, 3);
    man.risky_merchants.insert(name);
    const auto& a = night_amounts[name];
    candidates.insert(candidates.end(), a.begin(), a.end());
  }
  std::sort(candidates.begin(), candidates.end(), std::greater<>());
  if (target == 0) {
    man.theta = candidates.empty() ? 0.0 : candidates.front() + 1.0;
  } else if (target >= candidates.size()) {
    man.theta = candidates.back() - 0.005;
  } else {
    man.theta = 0.5 * (candidates[target - 1] + candidates[target]);
  }

  Rng noise = root.split(0x6E6F6973ULL);
  std::size_t rule_count = 0, label_count = 0;
  for (auto& r : data.rows) {
    r.rule = man.rule(r.amount, r.merchant, r.timestamp);
    r.flipped = noise.bernoulli(cfg.label_noise);
    if (r.flipped) man.flipped_rows.push_back(r.row_id);
    rule_count += r.rule;
    label_count += r.label();
  }
  man.rule_rate = static_cast<double>(rule_count) / static_cast<double>(n);
  man.label_rate = static_cast<double>(label_count) / static_cast<double>(n);
  return data;
}

SynthData generate(const SynthConfig& cfg, const std::filesystem::path& out) {
  SynthData data = generate(cfg);
  std::filesystem::create_directories(out);
  write_csv(out / "transactions.csv", data.table());
  std::ofstream m(out / "manifest.json");
  if (!m) throw ConfigError("cannot write " + (out / "manifest.json").string());
  json j = json::parse(data.manifest.to_json());
  j["config"] = json::parse(cfg.to_json());
  m << j.dump(2) << "\n";
  return data;
}

double bayes_f1_bound(const SynthData& data) {
  std::vector<int> preds, labels;
  preds.reserve(data.rows.size());
  labels.reserve(data.rows.size());
  for (const auto& r : data.rows) {
    preds.push_back(r.rule);
    labels.push_back(r.label());
  }
  return f1_binary(preds, labels).f1;
}

double bayes_f1_bound(const SynthConfig& cfg) { return bayes_f1_bound(generate(cfg)); }

double window_bayes_f1_bound(const SynthData& data, const std::vector<std::string>& users, std::size_t window,
                             std::size_t stride) {
  std::unordered_map<std::string, std::vector<const SynthRow*>> by_user;
  for (const auto& r : data.rows) by_user[r.user].push_back(&r);
  std::vector<int> preds, labels;
  for (const auto& u : users) {
    const auto it = by_user.find(u);
    if (it == by_user.end()) continue;
    const auto& rows = it->second;
    for (std::size_t w = 0; w < window_count(rows.size(), window, stride); ++w) {
      int p = 0, y = 0;
      for (std::size_t t = 0; t < window; ++t) {
        p |= rows[w * stride + t]->rule;
        y |= rows[w * stride + t]->label();
      }
      preds.push_back(p);
      labels.push_back(y);
    }
  }
  return f1_binary(preds, labels).f1;
}

}  // namespace tabaconv
