#include "tabaconv/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "tabaconv/error.hpp"

namespace tabaconv {

using json = nlohmann::json;

namespace {

constexpr char kMagic[5] = {'T', 'A', 'C', 'B', '1'};

class Writer {
 public:
  template <typename V>
  void put(V v) {
    static_assert(std::is_trivially_copyable_v<V>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof v);
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void str(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void tensor(const std::string& name, const Shape& shape, std::span<const float> data) {
    str(name);
    put(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put(static_cast<std::uint64_t>(d));
    bytes(data.data(), data.size() * sizeof(float));
  }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const char* data, std::size_t size) : p_(data), end_(data + size) {}
  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end_ - p_) < n) throw IntegrityError("checkpoint is truncated");
  }
  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, p_, sizeof v);
    p_ += sizeof v;
    return v;
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(p_, n);
    p_ += n;
    return s;
  }
  std::pair<std::string, Tensor<float>> tensor() {
    std::string name = str();
    const auto rank = get<std::uint32_t>();
    if (rank > 8) throw IntegrityError("tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>());
    const std::size_t n = shape_numel(shape);
    need(n * sizeof(float));
    std::vector<float> v(n);
    std::memcpy(v.data(), p_, n * sizeof(float));
    p_ += n * sizeof(float);
    return {std::move(name), Tensor<float>::from(std::move(shape), std::move(v))};
  }
  bool done() const { return p_ == end_; }

 private:
  const char* p_;
  const char* end_;
};

std::uint32_t crc(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

}  // namespace

Checkpoint Checkpoint::from_model(const TabAConvBert<float>& model) {
  Checkpoint c;
  c.config = model.config();
  c.schema = model.schema();
  c.head = model.head();
  for (const auto& [name, t] : model.params()) c.params.add(name, t.clone());
  return c;
}

TabAConvBert<float> Checkpoint::model() const {
  Parameters<float> copy;
  for (const auto& [name, t] : params) copy.add(name, t.clone().set_requires_grad(true));
  return TabAConvBert<float>(schema, config, head, std::move(copy));
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");
  json meta{{"model", json::parse(ckpt.config.to_json())},
            {"schema", json::parse(ckpt.schema.to_json())},
            {"schema_digest", ckpt.schema.digest()},
            {"head", to_string(ckpt.head)},
            {"step", ckpt.step},
            {"rng_key", ckpt.rng_key},
            {"rng_counter", ckpt.rng_counter},
            {"has_optimizer", ckpt.optimizer.has_value()}};
  if (ckpt.optimizer) meta["optimizer_step"] = ckpt.optimizer->step;

  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.put(Checkpoint::kVersion);
  w.str(meta.dump());
  w.put(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) w.tensor(name, t.shape(), t.data());
  if (ckpt.optimizer) {
    for (const auto* moments : {&ckpt.optimizer->m, &ckpt.optimizer->v}) {
      w.put(static_cast<std::uint32_t>(moments->size()));
      for (const auto& [name, v] : *moments) w.tensor(name, {v.size()}, v);
    }
  }
  w.put(crc(w.buffer().data(), w.buffer().size()));

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint " + path.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw ConfigError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < sizeof kMagic + 4 || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
    throw IntegrityError(path.string() + " is not a TACB1 checkpoint");
  }
  std::uint32_t version;
  std::memcpy(&version, buf.data() + sizeof kMagic, sizeof version);
  if (version != Checkpoint::kVersion) {
    throw UnsupportedVersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                  std::to_string(Checkpoint::kVersion) + ")");
  }
  if (buf.size() < sizeof kMagic + 8) throw IntegrityError("checkpoint is truncated");
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 4, sizeof stored);
  if (stored != crc(buf.data(), buf.size() - 4)) throw IntegrityError("checkpoint checksum mismatch: " + path.string());

  Reader r(buf.data() + sizeof kMagic + 4, buf.size() - sizeof kMagic - 8);
  Checkpoint c;
  json meta;
  try {
    meta = json::parse(r.str());
    c.config = ModelConfig::from_json(meta.at("model").dump());
    c.schema = FeatureSchema::from_json(meta.at("schema").dump());
    if (c.schema.digest() != meta.at("schema_digest").get<std::uint64_t>()) {
      throw IntegrityError("checkpoint schema does not match its digest");
    }
    c.head = head_kind_from_string(meta.at("head"));
    c.step = meta.at("step");
    c.rng_key = meta.at("rng_key");
    c.rng_counter = meta.at("rng_counter");
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint metadata is malformed: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = r.tensor();
    c.params.add(name, t.set_requires_grad(true));
  }
  if (meta.value("has_optimizer", false)) {
    AdamState st;
    st.step = meta.value("optimizer_step", std::uint64_t{0});
    for (auto* moments : {&st.m, &st.v}) {
      const auto n = r.get<std::uint32_t>();
      for (std::uint32_t i = 0; i < n; ++i) {
        auto [name, t] = r.tensor();
        (*moments)[name] = t.values();
      }
    }
    c.optimizer = std::move(st);
  }
  if (!r.done()) throw IntegrityError("checkpoint has trailing bytes");
  // Validates names and shapes against the architecture.
  (void)c.model();
  return c;
}

}  // namespace tabaconv
