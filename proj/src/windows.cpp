#include "tabaconv/windows.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "tabaconv/error.hpp"

namespace tabaconv {

static_assert(std::endian::native == std::endian::little, "binary containers assume a little-endian host");

std::size_t window_count(std::size_t rows, std::size_t window, std::size_t stride) {
  if (window == 0 || stride == 0) throw ConfigError("window and stride must be at least 1");
  return rows < window ? 0 : (rows - window) / stride + 1;
}

std::vector<WindowSample> make_windows(const UserRows& user, const FeatureSchema& schema, std::size_t window,
                                       std::size_t stride, WindowMode mode) {
  const std::size_t count = window_count(user.rows.size(), window, stride);
  for (std::size_t i = 1; i < user.rows.size(); ++i) {
    if (user.rows[i].timestamp < user.rows[i - 1].timestamp) {
      throw ContractError("rows of user '" + user.user_id + "' are not sorted by timestamp");
    }
  }
  const std::size_t n_cat = schema.num_categorical();
  const std::size_t n_cont = schema.num_continuous();
  std::vector<WindowSample> out;
  out.reserve(count);
  for (std::size_t w = 0; w < count; ++w) {
    WindowSample s;
    s.length = window;
    s.num_cat = n_cat;
    s.num_cont = n_cont;
    s.user_id = user.user_id;
    s.cat_tokens.reserve(window * n_cat);
    s.cont_values.reserve(window * n_cont);
    std::int8_t any = 0;
    bool labelled = false;
    for (std::size_t t = 0; t < window; ++t) {
      const EncodedRow& r = user.rows[w * stride + t];
      if (r.cat.size() != n_cat || r.cont.size() != n_cont) {
        throw ContractError("encoded row does not match the schema field counts");
      }
      s.cat_tokens.insert(s.cat_tokens.end(), r.cat.begin(), r.cat.end());
      s.cont_values.insert(s.cont_values.end(), r.cont.begin(), r.cont.end());
      const auto comps = schema.decompose(r.timestamp);
      s.ts_components.insert(s.ts_components.end(), comps.begin(), comps.end());
      for (double f : schema.time_floats(r.timestamp)) s.ts_floats.push_back(static_cast<float>(f));
      if (r.label) {
        labelled = true;
        any = static_cast<std::int8_t>(any | (*r.label != 0));
      }
    }
    if (mode == WindowMode::kDownstream && labelled) s.label = any;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<WindowSample> make_dataset(const std::vector<UserRows>& users, const FeatureSchema& schema,
                                       std::size_t window, std::size_t stride, WindowMode mode) {
  std::vector<WindowSample> out;
  for (const auto& u : users) {
    auto w = make_windows(u, schema, window, stride, mode);
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

namespace {

constexpr char kMagic[5] = {'T', 'S', 'B', 'W', '1'};

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V get(std::istream& in) {
  V v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IntegrityError("window cache is truncated");
  return v;
}

template <typename V>
void put_array(std::ostream& out, const std::vector<V>& v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(V)));
}

template <typename V>
void get_array(std::istream& in, std::vector<V>& v, std::size_t n) {
  v.resize(n);
  if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(V)))) {
    throw IntegrityError("window cache is truncated");
  }
}

}  // namespace

void save_windows(const std::filesystem::path& path, std::span<const WindowSample> samples) {
  std::uint32_t length = 0, n_cat = 0, n_cont = 0;
  if (!samples.empty()) {
    length = static_cast<std::uint32_t>(samples[0].length);
    n_cat = static_cast<std::uint32_t>(samples[0].num_cat);
    n_cont = static_cast<std::uint32_t>(samples[0].num_cont);
  }
  std::vector<std::string> users;
  std::unordered_map<std::string, std::uint32_t> user_ids;
  for (const auto& s : samples) {
    if (s.length != length || s.num_cat != n_cat || s.num_cont != n_cont) {
      throw ContractError("all cached windows must share one shape");
    }
    if (user_ids.emplace(s.user_id, static_cast<std::uint32_t>(users.size())).second) users.push_back(s.user_id);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, 1);  // container version
  put(out, length);
  put(out, n_cat);
  put(out, n_cont);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(kNumTimestampComponents));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(kNumTimeFloats));
  put<std::uint64_t>(out, samples.size());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(users.size()));
  for (const auto& u : users) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(u.size()));
    out.write(u.data(), static_cast<std::streamsize>(u.size()));
  }
  for (const auto& s : samples) {
    put_array(out, s.cat_tokens);
    put_array(out, s.cont_values);
    put_array(out, s.ts_components);
    put_array(out, s.ts_floats);
    put<std::int8_t>(out, s.label ? *s.label : std::int8_t{-1});
    put<std::uint32_t>(out, user_ids.at(s.user_id));
  }
  if (!out) throw ConfigError("failed writing " + path.string());
}

std::vector<WindowSample> load_windows(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  char magic[5];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw IntegrityError(path.string() + " is not a TSBW1 window cache");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != 1) throw UnsupportedVersionError("window cache version " + std::to_string(version));
  const auto length = get<std::uint32_t>(in);
  const auto n_cat = get<std::uint32_t>(in);
  const auto n_cont = get<std::uint32_t>(in);
  const auto n_comp = get<std::uint32_t>(in);
  const auto n_float = get<std::uint32_t>(in);
  const auto count = get<std::uint64_t>(in);
  const auto n_users = get<std::uint32_t>(in);
  std::vector<std::string> users(n_users);
  for (auto& u : users) {
    const auto len = get<std::uint32_t>(in);
    u.resize(len);
    if (!in.read(u.data(), len)) throw IntegrityError("window cache is truncated");
  }
  std::vector<WindowSample> out(count);
  for (auto& s : out) {
    s.length = length;
    s.num_cat = n_cat;
    s.num_cont = n_cont;
    get_array(in, s.cat_tokens, std::size_t{length} * n_cat);
    get_array(in, s.cont_values, std::size_t{length} * n_cont);
    get_array(in, s.ts_components, std::size_t{length} * n_comp);
    get_array(in, s.ts_floats, std::size_t{length} * n_float);
    const auto label = get<std::int8_t>(in);
    if (label >= 0) s.label = label;
    const auto user = get<std::uint32_t>(in);
    if (user >= users.size()) throw IntegrityError("window cache references an unknown user");
    s.user_id = users[user];
  }
  return out;
}

}  // namespace tabaconv
