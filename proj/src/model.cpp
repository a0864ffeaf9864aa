#include "tabaconv/model.hpp"

#include <cmath>

#include "json.hpp"
#include "tabaconv/error.hpp"

namespace tabaconv {

using json = nlohmann::json;

ModelConfig ModelConfig::with_width(std::size_t d_model) {
  ModelConfig c;
  c.d_model = d_model;
  c.attn_channels = d_model / 2;
  c.conv_channels = d_model - d_model / 2;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (d_model == 0 || d_model % 2 != 0) fail("d_model must be a positive even number");
  if (num_heads == 0) fail("num_heads must be positive");
  if (kernel_size % 2 == 0) fail("kernel_size must be odd");
  if (attn_channels + conv_channels != d_model) {
    fail("attn_channels + conv_channels = " + std::to_string(attn_channels + conv_channels) + " but d_model = " +
         std::to_string(d_model));
  }
  if (attn_channels == 0 || attn_channels % num_heads != 0) fail("attn_channels must be a positive multiple of num_heads");
  if (conv_channels == 0) fail("conv_channels must be positive");
  if (ffn_mult == 0) fail("ffn_mult must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(activity_reg_lambda >= 0.0)) fail("activity_reg_lambda must be non-negative");
}

std::string ModelConfig::to_json() const {
  json j{{"d_model", d_model},
         {"num_heads", num_heads},
         {"kernel_size", kernel_size},
         {"num_blocks", num_blocks},
         {"attn_channels", attn_channels},
         {"conv_channels", conv_channels},
         {"ffn_mult", ffn_mult},
         {"dropout", dropout},
         {"activity_reg_lambda", activity_reg_lambda},
         {"conv_padding", conv_padding == ops::Padding::kZero ? "zero" : "circular"}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.d_model = j.at("d_model");
    c.num_heads = j.at("num_heads");
    c.kernel_size = j.at("kernel_size");
    c.num_blocks = j.at("num_blocks");
    c.attn_channels = j.at("attn_channels");
    c.conv_channels = j.at("conv_channels");
    c.ffn_mult = j.at("ffn_mult");
    c.dropout = j.at("dropout");
    c.activity_reg_lambda = j.at("activity_reg_lambda");
    const std::string pad = j.value("conv_padding", "zero");
    if (pad != "zero" && pad != "circular") throw ConfigError("unknown conv_padding '" + pad + "'");
    c.conv_padding = pad == "zero" ? ops::Padding::kZero : ops::Padding::kCircular;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
  return c;
}

const char* to_string(HeadKind kind) { return kind == HeadKind::kPretrain ? "pretrain" : "classifier"; }

HeadKind head_kind_from_string(const std::string& s) {
  if (s == "pretrain") return HeadKind::kPretrain;
  if (s == "classifier") return HeadKind::kClassifier;
  throw ConfigError("unknown head kind '" + s + "'");
}

// ---------------------------------------------------------------- Parameters

template <typename T>
Tensor<T>& Parameters<T>::add(const std::string& name, Tensor<T> value) {
  if (contains(name)) throw ContractError("duplicate parameter '" + name + "'");
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(value));
  return entries_.back().second;
}

template <typename T>
Tensor<T>& Parameters<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
  return entries_[it->second].second;
}

template <typename T>
const Tensor<T>& Parameters<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
  return entries_[it->second].second;
}

template <typename T>
void Parameters<T>::erase_prefix(const std::string& prefix) {
  std::erase_if(entries_, [&](const auto& e) { return e.first.rfind(prefix, 0) == 0; });
  index_.clear();
  for (std::size_t i = 0; i < entries_.size(); ++i) index_[entries_[i].first] = i;
}

template <typename T>
std::size_t Parameters<T>::numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

template <typename T>
void Parameters<T>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

// ---------------------------------------------------------------- Batch

namespace {

template <typename Get>
Batch make_batch(std::size_t n, Get get) {
  Batch b;
  b.size = n;
  if (n == 0) return b;
  const WindowSample& first = get(0);
  b.length = first.length;
  b.num_cat = first.num_cat;
  b.num_cont = first.num_cont;
  const std::size_t rows = b.rows();
  b.cat.resize(b.num_cat * rows);
  b.cont.resize(b.num_cont * rows);
  b.ts.resize(kNumTimestampComponents * rows);
  b.ts_floats.resize(kNumTimeFloats * rows);
  b.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const WindowSample& s = get(i);
    if (s.length != b.length || s.num_cat != b.num_cat || s.num_cont != b.num_cont) {
      throw ContractError("all windows in a batch must share length and field counts");
    }
    for (std::size_t t = 0; t < b.length; ++t) {
      const std::size_t r = i * b.length + t;
      for (std::size_t f = 0; f < b.num_cat; ++f) b.cat[f * rows + r] = s.cat(t, f);
      for (std::size_t f = 0; f < b.num_cont; ++f) b.cont[f * rows + r] = s.cont(t, f);
      for (std::size_t c = 0; c < kNumTimestampComponents; ++c)
        b.ts[c * rows + r] = s.ts_components[t * kNumTimestampComponents + c];
      for (std::size_t c = 0; c < kNumTimeFloats; ++c)
        b.ts_floats[r * kNumTimeFloats + c] = s.ts_floats[t * kNumTimeFloats + c];
    }
    b.labels[i] = s.label ? *s.label : std::int8_t{-1};
  }
  return b;
}

}  // namespace

Batch Batch::from(std::span<const WindowSample> samples) {
  return make_batch(samples.size(), [&](std::size_t i) -> const WindowSample& { return samples[i]; });
}

Batch Batch::from(std::span<const WindowSample* const> samples) {
  return make_batch(samples.size(), [&](std::size_t i) -> const WindowSample& { return *samples[i]; });
}

// ---------------------------------------------------------------- model

template <typename T>
Tensor<T> positional_encoding(std::size_t length, std::size_t d_model) {
  if (d_model % 2 != 0) throw ConfigError("positional encoding needs an even d_model, got " + std::to_string(d_model));
  std::vector<T> pe(length * d_model);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle =
          static_cast<double>(t) / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d_model));
      pe[t * d_model + 2 * i] = static_cast<T>(std::sin(angle));
      pe[t * d_model + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return Tensor<T>::from({length, d_model}, std::move(pe));
}

namespace {

template <typename T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from(std::move(shape), std::move(v)).set_requires_grad(true);
}

template <typename T>
Tensor<T> constant_init(Shape shape, T value) {
  return Tensor<T>::full(std::move(shape), value).set_requires_grad(true);
}

}  // namespace

template <typename T>
TabAConvBert<T>::TabAConvBert(const FeatureSchema& schema, const ModelConfig& cfg, HeadKind head, std::uint64_t seed)
    : schema_(schema), cfg_(cfg), head_(head) {
  cfg_.validate();
  for (auto f : schema_.categorical_fields()) cat_names_.push_back(schema_.fields[f].name);
  for (auto f : schema_.continuous_fields()) cont_names_.push_back(schema_.fields[f].name);
  Rng rng(seed, 0x696E6974ULL);
  init_backbone(rng);
  if (head_ == HeadKind::kPretrain) {
    init_pretrain_heads(rng);
  } else {
    init_classifier(rng);
  }
}

template <typename T>
TabAConvBert<T>::TabAConvBert(const FeatureSchema& schema, const ModelConfig& cfg, HeadKind head, Parameters<T> params)
    : schema_(schema), cfg_(cfg), head_(head), params_(std::move(params)) {
  cfg_.validate();
  for (auto f : schema_.categorical_fields()) cat_names_.push_back(schema_.fields[f].name);
  for (auto f : schema_.continuous_fields()) cont_names_.push_back(schema_.fields[f].name);
  // Reference model supplies the expected names and shapes.
  TabAConvBert<T> ref(schema_, cfg_, head_, std::uint64_t{0});
  if (ref.params_.size() != params_.size()) {
    throw ConfigError("parameter set has " + std::to_string(params_.size()) + " tensors, model expects " +
                      std::to_string(ref.params_.size()));
  }
  for (const auto& [name, t] : ref.params_) {
    if (!params_.contains(name)) throw ConfigError("missing parameter '" + name + "'");
    if (params_.at(name).shape() != t.shape()) {
      throw ConfigError("parameter '" + name + "' has shape " + shape_str(params_.at(name).shape()) + ", expected " +
                        shape_str(t.shape()));
    }
  }
}

template <typename T>
void TabAConvBert<T>::init_backbone(Rng& rng) {
  const std::size_t d = cfg_.d_model;
  // A lookup is a linear map of a one-hot input, so tables have fan-in 1.
  for (std::size_t i = 0; i < cat_names_.size(); ++i) {
    const auto& spec = schema_.fields[schema_.categorical_fields()[i]];
    params_.add("embed.cat." + cat_names_[i], uniform_init<T>({spec.vocab_size(), d}, 1, rng));
  }
  for (const auto& name : cont_names_) {
    params_.add("embed.cont." + name + ".weight", uniform_init<T>({1, d}, 1, rng));
    params_.add("embed.cont." + name + ".bias", constant_init<T>({d}, T(0)));
  }
  const auto sizes = schema_.timestamp_table_sizes();
  for (std::size_t c = 0; c < kNumTimestampComponents; ++c) {
    params_.add(std::string("time.") + kTimestampComponentNames[c], uniform_init<T>({sizes[c], d}, 1, rng));
  }
  params_.add("time.net.fc1.weight", uniform_init<T>({kNumTimeFloats, d}, kNumTimeFloats, rng));
  params_.add("time.net.fc1.bias", constant_init<T>({d}, T(0)));
  params_.add("time.net.fc2.weight", uniform_init<T>({d, d}, d, rng));
  params_.add("time.net.fc2.bias", constant_init<T>({d}, T(0)));

  const std::size_t ac = cfg_.attn_channels, cc = cfg_.conv_channels, k = cfg_.kernel_size;
  const std::size_t hidden = cfg_.ffn_mult * d;
  for (std::size_t b = 0; b < cfg_.num_blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    params_.add(p + "conv.weight", uniform_init<T>({k, d, cc}, k * d, rng));
    params_.add(p + "conv.bias", constant_init<T>({cc}, T(0)));
    params_.add(p + "attn.q.weight", uniform_init<T>({d, ac}, d, rng));
    params_.add(p + "attn.k.weight", uniform_init<T>({d, ac}, d, rng));
    params_.add(p + "attn.v.weight", uniform_init<T>({d, ac}, d, rng));
    params_.add(p + "attn.out.weight", uniform_init<T>({ac, ac}, ac, rng));
    params_.add(p + "attn.out.bias", constant_init<T>({ac}, T(0)));
    params_.add(p + "mix.weight", uniform_init<T>({1, d, d}, d, rng));
    params_.add(p + "mix.bias", constant_init<T>({d}, T(0)));
    params_.add(p + "norm1.gamma", constant_init<T>({d}, T(1)));
    params_.add(p + "norm1.beta", constant_init<T>({d}, T(0)));
    params_.add(p + "ffn.fc1.weight", uniform_init<T>({d, hidden}, d, rng));
    params_.add(p + "ffn.fc1.bias", constant_init<T>({hidden}, T(0)));
    params_.add(p + "ffn.fc2.weight", uniform_init<T>({hidden, d}, hidden, rng));
    params_.add(p + "ffn.fc2.bias", constant_init<T>({d}, T(0)));
    params_.add(p + "norm2.gamma", constant_init<T>({d}, T(1)));
    params_.add(p + "norm2.beta", constant_init<T>({d}, T(0)));
  }
}

template <typename T>
void TabAConvBert<T>::init_pretrain_heads(Rng& rng) {
  const std::size_t d = cfg_.d_model;
  for (std::size_t i = 0; i < cat_names_.size(); ++i) {
    const auto& spec = schema_.fields[schema_.categorical_fields()[i]];
    params_.add("head.cat." + cat_names_[i] + ".weight", uniform_init<T>({d, spec.vocab_size()}, d, rng));
    params_.add("head.cat." + cat_names_[i] + ".bias", constant_init<T>({spec.vocab_size()}, T(0)));
  }
  for (const auto& name : cont_names_) {
    params_.add("head.cont." + name + ".weight", uniform_init<T>({d, 1}, d, rng));
    params_.add("head.cont." + name + ".bias", constant_init<T>({1}, T(0)));
  }
}

template <typename T>
void TabAConvBert<T>::init_classifier(Rng& rng) {
  params_.add("classifier.weight", uniform_init<T>({cfg_.d_model, 1}, cfg_.d_model, rng));
  params_.add("classifier.bias", constant_init<T>({1}, T(0)));
}

template <typename T>
void TabAConvBert<T>::replace_head_with_classifier(std::uint64_t seed) {
  params_.erase_prefix("head.");
  if (!params_.contains("classifier.weight")) {
    Rng rng(seed, 0x68656164ULL);
    init_classifier(rng);
  }
  head_ = HeadKind::kClassifier;
}

template <typename T>
void TabAConvBert<T>::freeze_embeddings() {
  for (auto& [name, t] : params_) {
    if (name.rfind("embed.", 0) == 0 || name.rfind("time.", 0) == 0) t.set_requires_grad(false);
  }
}

template <typename T>
Tensor<T> TabAConvBert<T>::drop(const Tensor<T>& x, Rng* rng) const {
  if (!training_ || rng == nullptr || cfg_.dropout == 0.0) return x;
  return ops::dropout(x, cfg_.dropout, *rng);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> TabAConvBert<T>::timestamp_embedding(const Batch& batch) const {
  const std::size_t rows = batch.rows();
  Tensor<T> sum;
  for (std::size_t c = 0; c < kNumTimestampComponents; ++c) {
    auto e = ops::gather_rows(param(std::string("time.") + kTimestampComponentNames[c]), batch.ts_column(c));
    sum = sum.defined() ? ops::add(sum, e) : e;
  }
  std::vector<T> floats(batch.ts_floats.begin(), batch.ts_floats.end());
  auto x = Tensor<T>::from({rows, kNumTimeFloats}, std::move(floats));
  auto hidden = ops::relu(ops::linear(x, param("time.net.fc1.weight"), param("time.net.fc1.bias")));
  auto net = ops::linear(hidden, param("time.net.fc2.weight"), param("time.net.fc2.bias"));
  auto reg = ops::scale(ops::mean(ops::mul(net, net)), cfg_.activity_reg_lambda);
  return {ops::add(sum, net), reg};
}

template <typename T>
Tensor<T> TabAConvBert<T>::embed_inputs(const Batch& batch, Tensor<T>* reg) const {
  if (batch.num_cat != cat_names_.size() || batch.num_cont != cont_names_.size()) {
    throw ContractError("batch field counts do not match the model schema");
  }
  const std::size_t rows = batch.rows();
  auto [sum, time_reg] = timestamp_embedding(batch);
  for (std::size_t f = 0; f < cat_names_.size(); ++f) {
    sum = ops::add(sum, ops::gather_rows(param("embed.cat." + cat_names_[f]), batch.cat_column(f)));
  }
  for (std::size_t f = 0; f < cont_names_.size(); ++f) {
    auto col = batch.cont_column(f);
    auto x = Tensor<T>::from({rows, 1}, std::vector<T>(col.begin(), col.end()));
    const std::string p = "embed.cont." + cont_names_[f];
    sum = ops::add(sum, ops::linear(x, param(p + ".weight"), param(p + ".bias")));
  }
  if (reg) *reg = time_reg;
  auto x = ops::reshape(sum, {batch.size, batch.length, cfg_.d_model});
  return ops::add(x, positional_encoding<T>(batch.length, cfg_.d_model));
}

template <typename T>
Tensor<T> TabAConvBert<T>::mha(const Tensor<T>& x, std::size_t block) const {
  const std::string p = "block" + std::to_string(block) + ".attn.";
  const std::size_t B = x.size(0), L = x.size(1), H = cfg_.num_heads, dk = cfg_.head_dim();
  auto heads = [&](const char* which) {
    auto y = ops::reshape(ops::matmul(x, param(p + which + ".weight")), {B, L, H, dk});
    return ops::permute(y, {0, 2, 1, 3});  // [B,H,T,dk]
  };
  auto q = heads("q");
  auto k = heads("k");
  auto v = heads("v");
  auto scores = ops::scale(ops::matmul(q, ops::transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
  auto out = ops::matmul(ops::softmax_lastdim(scores), v);
  out = ops::reshape(ops::permute(out, {0, 2, 1, 3}), {B, L, cfg_.attn_channels});
  return ops::linear(out, param(p + "out.weight"), param(p + "out.bias"));
}

template <typename T>
Tensor<T> TabAConvBert<T>::aaconv_layer(const Tensor<T>& x, std::size_t block) const {
  const std::string p = "block" + std::to_string(block) + ".";
  auto conv = ops::conv1d(x, param(p + "conv.weight"), param(p + "conv.bias"), cfg_.conv_padding);
  auto both = ops::concat_lastdim(conv, mha(x, block));
  return ops::conv1d(both, param(p + "mix.weight"), param(p + "mix.bias"));
}

template <typename T>
Tensor<T> TabAConvBert<T>::encoder_block(const Tensor<T>& x, std::size_t block, Rng* rng) const {
  const std::string p = "block" + std::to_string(block) + ".";
  auto h = ops::layer_norm(ops::add(x, drop(aaconv_layer(x, block), rng)), param(p + "norm1.gamma"),
                           param(p + "norm1.beta"));
  auto f = ops::relu(ops::linear(h, param(p + "ffn.fc1.weight"), param(p + "ffn.fc1.bias")));
  f = ops::linear(f, param(p + "ffn.fc2.weight"), param(p + "ffn.fc2.bias"));
  return ops::layer_norm(ops::add(h, drop(f, rng)), param(p + "norm2.gamma"), param(p + "norm2.beta"));
}

template <typename T>
Tensor<T> TabAConvBert<T>::encoder_forward(const Tensor<T>& x, Rng* rng) const {
  Tensor<T> h = x;
  for (std::size_t b = 0; b < cfg_.num_blocks; ++b) h = encoder_block(h, b, rng);
  return h;
}

template <typename T>
PretrainOutput<T> TabAConvBert<T>::pretrain_heads(const Tensor<T>& h) const {
  if (head_ != HeadKind::kPretrain) throw ContractError("model has no pretraining heads");
  PretrainOutput<T> out;
  for (const auto& name : cat_names_) {
    out.cat_logits.push_back(ops::linear(h, param("head.cat." + name + ".weight"), param("head.cat." + name + ".bias")));
  }
  for (const auto& name : cont_names_) {
    out.cont_preds.push_back(
        ops::linear(h, param("head.cont." + name + ".weight"), param("head.cont." + name + ".bias")));
  }
  return out;
}

template <typename T>
Tensor<T> TabAConvBert<T>::classify_logits(const Tensor<T>& h) const {
  if (head_ != HeadKind::kClassifier) throw ContractError("model has no classifier head");
  auto pooled = ops::mean_axis(h, 1);
  auto z = ops::linear(pooled, param("classifier.weight"), param("classifier.bias"));
  return ops::reshape(z, {h.size(0)});
}

template <typename T>
Tensor<T> TabAConvBert<T>::classify_head(const Tensor<T>& h) const {
  return ops::sigmoid(classify_logits(h));
}

template <typename T>
PretrainOutput<T> TabAConvBert<T>::forward_pretrain(const Batch& batch, Tensor<T>* reg, Rng* rng) const {
  return pretrain_heads(encoder_forward(embed_inputs(batch, reg), rng));
}

template <typename T>
Tensor<T> TabAConvBert<T>::forward_classify_logits(const Batch& batch, Rng* rng) const {
  return classify_logits(encoder_forward(embed_inputs(batch), rng));
}

std::size_t parameter_count(const FeatureSchema& schema, const ModelConfig& cfg, HeadKind head) {
  const std::size_t d = cfg.d_model, k = cfg.kernel_size, ac = cfg.attn_channels, cc = cfg.conv_channels,
                    m = cfg.ffn_mult;
  std::size_t vocab = 0;
  for (auto f : schema.categorical_fields()) vocab += schema.fields[f].vocab_size();
  const std::size_t n_cont = schema.num_continuous();
  std::size_t time_rows = 0;
  for (auto n : schema.timestamp_table_sizes()) time_rows += n;

  std::size_t n = d * vocab + 2 * d * n_cont + d * time_rows + (4 * d + d) + (d * d + d);
  n += cfg.num_blocks *
       (k * d * cc + cc + 3 * d * ac + ac * ac + ac + d * d + d + 2 * d + 2 * m * d * d + m * d + d + 2 * d);
  n += head == HeadKind::kPretrain ? d * vocab + vocab + n_cont * (d + 1) : d + 1;
  return n;
}

template class Parameters<float>;
template class Parameters<double>;
template class TabAConvBert<float>;
template class TabAConvBert<double>;
template Tensor<float> positional_encoding<float>(std::size_t, std::size_t);
template Tensor<double> positional_encoding<double>(std::size_t, std::size_t);

}  // namespace tabaconv
