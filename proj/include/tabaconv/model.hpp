#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tabaconv/ops.hpp"
#include "tabaconv/rng.hpp"
#include "tabaconv/schema.hpp"
#include "tabaconv/windows.hpp"

namespace tabaconv {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t num_heads = 4;
  std::size_t kernel_size = 3;
  std::size_t num_blocks = 1;
  std::size_t attn_channels = 32;
  std::size_t conv_channels = 32;
  std::size_t ffn_mult = 4;
  double dropout = 0.1;
  double activity_reg_lambda = 1e-4;
  ops::Padding conv_padding = ops::Padding::kZero;

  // Even channel split for the given width.
  static ModelConfig with_width(std::size_t d_model);

  std::size_t head_dim() const { return attn_channels / num_heads; }
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

enum class HeadKind { kPretrain, kClassifier };
const char* to_string(HeadKind kind);
HeadKind head_kind_from_string(const std::string& s);

/// Named tensors in creation order.
template <typename T>
class Parameters {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  void erase_prefix(const std::string& prefix);

  std::size_t size() const { return entries_.size(); }
  std::size_t numel() const;
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Input matrices for a batch of equally long windows.
struct Batch {
  std::size_t size = 0;    // B
  std::size_t length = 0;  // T
  std::size_t num_cat = 0;
  std::size_t num_cont = 0;
  std::vector<std::int64_t> cat;        // [field][b·T + t]
  std::vector<float> cont;              // [field][b·T + t]
  std::vector<std::int64_t> ts;         // [component][b·T + t]
  std::vector<float> ts_floats;         // (b·T + t) × 4
  std::vector<std::int8_t> labels;      // B, −1 when absent

  static Batch from(std::span<const WindowSample> samples);
  static Batch from(std::span<const WindowSample* const> samples);
  std::size_t rows() const { return size * length; }
  std::span<const std::int64_t> cat_column(std::size_t f) const { return {cat.data() + f * rows(), rows()}; }
  std::span<const float> cont_column(std::size_t f) const { return {cont.data() + f * rows(), rows()}; }
  std::span<const std::int64_t> ts_column(std::size_t c) const { return {ts.data() + c * rows(), rows()}; }
};

template <typename T>
struct PretrainOutput {
  std::vector<Tensor<T>> cat_logits;  // per categorical field, [B,T,V_f]
  std::vector<Tensor<T>> cont_preds;  // per continuous field, [B,T,1]
};

// Sinusoidal table [T,d]: PE[t,2i] = sin(t/10000^{2i/d}), PE[t,2i+1] = cos(…).
template <typename T>
Tensor<T> positional_encoding(std::size_t length, std::size_t d_model);

/// TabAConvBERT. Parameter names:
///   embed.cat.<field>             [V_f, d]
///   embed.cont.<field>.weight     [1, d]       embed.cont.<field>.bias [d]
///   time.<component>              [n_c, d]     (year, month, day, weekday, week, hour, minute, second)
///   time.net.fc1.weight/bias      [4, d] / [d]
///   time.net.fc2.weight/bias      [d, d] / [d]
///   block<i>.conv.weight/bias     [k, d, cc] / [cc]
///   block<i>.attn.{q,k,v}.weight  [d, ac]
///   block<i>.attn.out.weight/bias [ac, ac] / [ac]
///   block<i>.mix.weight/bias      [1, d, d] / [d]
///   block<i>.norm1.gamma/beta     [d]
///   block<i>.ffn.fc1.weight/bias  [d, m·d] / [m·d]
///   block<i>.ffn.fc2.weight/bias  [m·d, d] / [d]
///   block<i>.norm2.gamma/beta     [d]
///   head.cat.<field>.weight/bias  [d, V_f] / [V_f]
///   head.cont.<field>.weight/bias [d, 1] / [1]
///   classifier.weight/bias        [d, 1] / [1]
///
/// Parameter count (see parameter_count):
///   d·ΣV_f + 2d·C_cont + d·Σn_c + (4d + d) + (d² + d)
///   + N·(k·d·cc + cc + 3·d·ac + ac² + ac + d² + d + 2d + 2m·d² + m·d + d + 2d)
///   + head: Σ(d·V_f + V_f) + C_cont·(d + 1)   or   classifier: d + 1
template <typename T>
class TabAConvBert {
 public:
  TabAConvBert(const FeatureSchema& schema, const ModelConfig& cfg, HeadKind head, std::uint64_t seed);
  TabAConvBert(const FeatureSchema& schema, const ModelConfig& cfg, HeadKind head, Parameters<T> params);

  const ModelConfig& config() const { return cfg_; }
  const FeatureSchema& schema() const { return schema_; }
  HeadKind head() const { return head_; }
  Parameters<T>& params() { return params_; }
  const Parameters<T>& params() const { return params_; }

  // Drops the pretraining heads and adds a freshly initialised classifier.
  void replace_head_with_classifier(std::uint64_t seed);
  // Excludes embed.* and time.* from gradient computation.
  void freeze_embeddings();

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  // [B,T,d]. *reg receives the activity regularisation term when non-null.
  Tensor<T> embed_inputs(const Batch& batch, Tensor<T>* reg = nullptr) const;
  // Timestamp block over all B·T rows: ([B·T,d], reg).
  std::pair<Tensor<T>, Tensor<T>> timestamp_embedding(const Batch& batch) const;

  Tensor<T> mha(const Tensor<T>& x, std::size_t block) const;
  Tensor<T> aaconv_layer(const Tensor<T>& x, std::size_t block) const;
  Tensor<T> encoder_block(const Tensor<T>& x, std::size_t block, Rng* rng) const;
  Tensor<T> encoder_forward(const Tensor<T>& x, Rng* rng = nullptr) const;

  PretrainOutput<T> pretrain_heads(const Tensor<T>& h) const;
  // Logits [B] before the sigmoid.
  Tensor<T> classify_logits(const Tensor<T>& h) const;
  // Probabilities [B].
  Tensor<T> classify_head(const Tensor<T>& h) const;

  // Full pretraining forward pass; rng drives dropout in training mode.
  PretrainOutput<T> forward_pretrain(const Batch& batch, Tensor<T>* reg, Rng* rng = nullptr) const;
  Tensor<T> forward_classify_logits(const Batch& batch, Rng* rng = nullptr) const;

  // Same architecture and values in another precision.
  template <typename U>
  TabAConvBert<U> cast() const;

 private:
  Tensor<T> param(const std::string& name) const { return params_.at(name); }
  Tensor<T> drop(const Tensor<T>& x, Rng* rng) const;
  void init_backbone(Rng& rng);
  void init_pretrain_heads(Rng& rng);
  void init_classifier(Rng& rng);

  FeatureSchema schema_;
  ModelConfig cfg_;
  HeadKind head_;
  Parameters<T> params_;
  bool training_ = false;
  std::vector<std::string> cat_names_, cont_names_;
};

std::size_t parameter_count(const FeatureSchema& schema, const ModelConfig& cfg, HeadKind head);

inline constexpr const char* kTimestampComponentNames[kNumTimestampComponents] = {
    "year", "month", "day", "weekday", "week", "hour", "minute", "second"};

extern template class Parameters<float>;
extern template class Parameters<double>;
extern template class TabAConvBert<float>;
extern template class TabAConvBert<double>;

template <typename T>
template <typename U>
TabAConvBert<U> TabAConvBert<T>::cast() const {
  Parameters<U> out;
  for (const auto& [name, t] : params_) {
    std::vector<U> v(t.values().begin(), t.values().end());
    out.add(name, Tensor<U>::from(t.shape(), std::move(v)).set_requires_grad(t.requires_grad()));
  }
  TabAConvBert<U> m(schema_, cfg_, head_, std::move(out));
  m.set_training(training_);
  return m;
}

}  // namespace tabaconv
