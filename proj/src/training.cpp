#include "tabaconv/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "json.hpp"
#include "tabaconv/error.hpp"

namespace tabaconv {

using json = nlohmann::json;

const char* to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kPretrain:
      return "pretrain";
    case TrainMode::kFinetune:
      return "finetune";
    case TrainMode::kScratch:
      return "scratch";
  }
  return "?";
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "pretrain") return TrainMode::kPretrain;
  if (s == "finetune") return TrainMode::kFinetune;
  if (s == "scratch") return TrainMode::kScratch;
  throw ConfigError("unknown training mode '" + s + "'");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("training config: " + m); };
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
  if (!(clip_norm >= 0.0)) fail("clip_norm must be non-negative");
  if (!(cat_loss_weight >= 0.0) || !(cont_loss_weight >= 0.0)) fail("loss weights must be non-negative");
}

MdmStats& MdmStats::operator+=(const MdmStats& o) {
  cat_count += o.cat_count;
  cat_correct += o.cat_correct;
  cont_count += o.cont_count;
  cont_sq_error += o.cont_sq_error;
  return *this;
}

template <typename T>
Tensor<T> mdm_loss(const PretrainOutput<T>& preds, std::span<const MaskPlan> plans, const Tensor<T>& reg,
                   double cat_weight, double cont_weight, MdmStats* stats) {
  Tensor<T> loss = reg.defined() ? reg : Tensor<T>::scalar(T(0));
  if (plans.empty()) return loss;
  const std::size_t B = plans.size(), L = plans[0].length;
  const std::size_t n_cat = preds.cat_logits.size(), n_cont = preds.cont_preds.size();

  std::vector<std::vector<std::int64_t>> cat_rows(n_cat), cat_tgt(n_cat), cont_rows(n_cont);
  std::vector<std::vector<T>> cont_tgt(n_cont);
  for (std::size_t b = 0; b < B; ++b) {
    const MaskPlan& p = plans[b];
    if (p.length != L || p.num_cat != n_cat || p.num_cont != n_cont) {
      throw ContractError("mask plan does not match the predictions");
    }
    if (p.cat_targets.size() != p.num_cat_masked() || p.cont_targets.size() != p.num_cont_masked()) {
      throw ContractError("mask plan has no targets; apply_mask records them");
    }
    std::size_t ci = 0, ki = 0;
    for (std::size_t t = 0; t < L; ++t) {
      const auto row = static_cast<std::int64_t>(b * L + t);
      for (std::size_t f = 0; f < n_cat; ++f) {
        if (!p.cat_masked(t, f)) continue;
        cat_rows[f].push_back(row);
        cat_tgt[f].push_back(p.cat_targets[ci++]);
      }
      for (std::size_t f = 0; f < n_cont; ++f) {
        if (!p.cont_masked(t, f)) continue;
        cont_rows[f].push_back(row);
        cont_tgt[f].push_back(static_cast<T>(p.cont_targets[ki++]));
      }
    }
  }

  std::size_t cat_total = 0, cont_total = 0;
  for (const auto& r : cat_rows) cat_total += r.size();
  for (const auto& r : cont_rows) cont_total += r.size();

  if (cat_total > 0) {
    Tensor<T> ce;
    for (std::size_t f = 0; f < n_cat; ++f) {
      if (cat_rows[f].empty()) continue;
      const auto& logits = preds.cat_logits[f];
      const std::size_t V = logits.size(logits.dim() - 1);
      auto picked = ops::gather_rows(ops::reshape(logits, {B * L, V}), cat_rows[f]);
      auto term = ops::cross_entropy_sum(picked, cat_tgt[f]);
      ce = ce.defined() ? ops::add(ce, term) : term;
      if (stats) {
        const auto v = picked.data();
        for (std::size_t i = 0; i < cat_rows[f].size(); ++i) {
          const auto first = v.begin() + static_cast<std::ptrdiff_t>(i * V);
          const auto arg = std::max_element(first, first + static_cast<std::ptrdiff_t>(V)) - first;
          stats->cat_correct += arg == cat_tgt[f][i];
        }
      }
    }
    loss = ops::add(loss, ops::scale(ce, cat_weight / static_cast<double>(cat_total)));
  }
  if (cont_total > 0) {
    Tensor<T> se;
    for (std::size_t f = 0; f < n_cont; ++f) {
      if (cont_rows[f].empty()) continue;
      const std::size_t M = cont_rows[f].size();
      auto picked = ops::gather_rows(ops::reshape(preds.cont_preds[f], {B * L, 1}), cont_rows[f]);
      auto diff = ops::sub(picked, Tensor<T>::from({M, 1}, cont_tgt[f]));
      auto term = ops::sum(ops::mul(diff, diff));
      se = se.defined() ? ops::add(se, term) : term;
      if (stats) stats->cont_sq_error += static_cast<double>(term.item());
    }
    loss = ops::add(loss, ops::scale(se, cont_weight / static_cast<double>(cont_total)));
  }
  if (stats) {
    stats->cat_count += cat_total;
    stats->cont_count += cont_total;
  }
  return loss;
}

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, std::span<const T> labels) {
  return ops::bce_with_logits(logits, labels);
}

double bce_from_logit(double z, int y) {
  return std::max(z, 0.0) - z * static_cast<double>(y) + std::log1p(std::exp(-std::abs(z)));
}

template <typename T>
double clip_grad_norm(Parameters<T>& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, p] : params) {
      if (!p.requires_grad() || !p.has_grad()) continue;
      for (T& g : p.mutable_grad()) g = static_cast<T>(g * s);
    }
  }
  return norm;
}

template <typename T>
void adam_step(Parameters<T>& params, AdamState& state, const TrainConfig& cfg) {
  for (auto& [name, p] : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter '" + name + "'");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto& m = state.m[name];
    auto& v = state.v[name];
    m.resize(p.numel(), 0.0f);
    v.resize(p.numel(), 0.0f);
    auto g = p.grad();
    auto x = p.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      x[i] = static_cast<T>(static_cast<double>(x[i]) - cfg.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
    }
  }
}

F1Result f1_binary(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) {
    throw ContractError("f1_binary: " + std::to_string(preds.size()) + " predictions but " +
                        std::to_string(labels.size()) + " labels");
  }
  F1Result r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = preds[i] != 0, y = labels[i] != 0;
    r.tp += p && y;
    r.fp += p && !y;
    r.fn += !p && y;
    r.tn += !p && !y;
  }
  if (r.tp + r.fp > 0) r.precision = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp);
  if (r.tp + r.fn > 0) r.recall = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
  if (r.tp + r.fp + r.fn > 0) {
    r.f1 = 2.0 * static_cast<double>(r.tp) / static_cast<double>(2 * r.tp + r.fp + r.fn);
  }
  return r;
}

std::string EpochMetrics::to_json() const {
  json j{{"phase", phase}, {"epoch", epoch}, {"loss", loss}, {"samples", samples}, {"steps", steps}};
  if (masked_cat_acc) j["masked_cat_acc"] = *masked_cat_acc;
  if (masked_cont_mse) j["masked_cont_mse"] = *masked_cont_mse;
  if (f1) j["f1"] = *f1;
  return j.dump();
}

MaskedBatch make_masked_batch(std::span<const WindowSample> data, std::span<const std::size_t> indices,
                              const MaskConfig& mask, std::uint64_t epoch) {
  MaskedBatch mb;
  std::vector<WindowSample> masked;
  masked.reserve(indices.size());
  mb.plans.reserve(indices.size());
  for (std::size_t i : indices) {
    const WindowSample& s = data[i];
    Rng rng = mask_stream(mask.seed, epoch, i);
    MaskPlan plan = sample_mask_plan(s.length, s.num_cat, s.num_cont, mask, rng);
    masked.push_back(apply_mask(s, plan));
    mb.plans.push_back(std::move(plan));
  }
  mb.batch = Batch::from(std::span<const WindowSample>(masked));
  return mb;
}

namespace {

void check_conforms(std::span<const WindowSample> data, const FeatureSchema& schema) {
  const std::size_t n_cat = schema.num_categorical(), n_cont = schema.num_continuous();
  for (const auto& s : data) {
    if (s.num_cat != n_cat || s.num_cont != n_cont) {
      throw ConfigError("dataset has " + std::to_string(s.num_cat) + " categorical / " + std::to_string(s.num_cont) +
                        " continuous fields but the schema has " + std::to_string(n_cat) + " / " +
                        std::to_string(n_cont));
    }
  }
}

void check_finite(const Tensor<float>& loss, std::size_t step) {
  if (!std::isfinite(loss.item())) throw NumericError("non-finite loss at step " + std::to_string(step));
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng(seed, 0x73687566ULL).split(epoch);
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

Rng dropout_stream(std::uint64_t seed, std::uint64_t step) { return Rng(seed, 0x64726F70ULL).split(step); }

Checkpoint finish(const TabAConvBert<float>& model, AdamState state, const TrainConfig& tcfg) {
  Checkpoint c = Checkpoint::from_model(model);
  c.step = state.step;
  c.optimizer = std::move(state);
  const Rng resume = dropout_stream(tcfg.seed, c.step);
  c.rng_key = resume.key();
  c.rng_counter = resume.counter();
  return c;
}

}  // namespace

TrainResult pretrain(std::span<const WindowSample> data, const FeatureSchema& schema, const ModelConfig& mcfg,
                     const TrainConfig& tcfg, const MaskConfig& mask, const EpochCallback& on_epoch) {
  mcfg.validate();
  tcfg.validate();
  mask.validate();
  if (mask.p_field == 0.0 && mask.p_row == 0.0) {
    throw ConfigError("p_field = p_row = 0 leaves the masked-data-modeling loss without targets");
  }
  check_conforms(data, schema);

  TabAConvBert<float> model(schema, mcfg, HeadKind::kPretrain, tcfg.seed);
  model.set_training(true);
  AdamState state;
  TrainResult result;
  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    const auto order = epoch_order(data.size(), tcfg.seed, epoch);
    EpochMetrics m;
    m.phase = "pretrain";
    m.epoch = epoch;
    MdmStats stats;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const std::size_t n = std::min(tcfg.batch_size, order.size() - start);
      const auto mb = make_masked_batch(data, std::span(order).subspan(start, n), mask, epoch);
      Rng drop = dropout_stream(tcfg.seed, state.step);
      model.params().zero_grad();
      Tensor<float> reg;
      const auto preds = model.forward_pretrain(mb.batch, &reg, &drop);
      auto loss = mdm_loss(preds, std::span<const MaskPlan>(mb.plans), reg, tcfg.cat_loss_weight,
                           tcfg.cont_loss_weight, &stats);
      check_finite(loss, state.step);
      loss.backward();
      clip_grad_norm(model.params(), tcfg.clip_norm);
      adam_step(model.params(), state, tcfg);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
      m.samples += n;
      m.steps += 1;
    }
    m.loss = m.samples ? loss_sum / static_cast<double>(m.samples) : 0.0;
    m.masked_cat_acc = stats.cat_accuracy();
    m.masked_cont_mse = stats.cont_mse();
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  result.checkpoint = finish(model, std::move(state), tcfg);
  return result;
}

TrainResult finetune(const Checkpoint* init, std::span<const WindowSample> data, const FeatureSchema& schema,
                     const ModelConfig& mcfg, const TrainConfig& tcfg, const EpochCallback& on_epoch) {
  tcfg.validate();
  check_conforms(data, schema);
  for (const auto& s : data) {
    if (!s.label) throw ConfigError("finetuning needs labelled windows; user '" + s.user_id + "' has none");
  }

  std::optional<TabAConvBert<float>> model;
  switch (tcfg.mode) {
    case TrainMode::kFinetune:
      if (!init) throw ConfigError("finetune mode needs a pretrained checkpoint");
      if (init->schema.digest() != schema.digest()) {
        throw ConfigError("checkpoint schema digest does not match the dataset schema");
      }
      model.emplace(init->model());
      model->replace_head_with_classifier(tcfg.seed);
      model->freeze_embeddings();
      break;
    case TrainMode::kScratch:
      mcfg.validate();
      model.emplace(schema, mcfg, HeadKind::kClassifier, tcfg.seed);
      break;
    case TrainMode::kPretrain:
      throw ConfigError("finetune called with mode pretrain");
  }
  model->set_training(true);

  AdamState state;
  TrainResult result;
  const std::string phase = to_string(tcfg.mode);
  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    const auto order = epoch_order(data.size(), tcfg.seed, epoch);
    EpochMetrics m;
    m.phase = phase;
    m.epoch = epoch;
    double loss_sum = 0.0;
    std::vector<int> preds, labels;
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const std::size_t n = std::min(tcfg.batch_size, order.size() - start);
      std::vector<const WindowSample*> items;
      std::vector<float> y;
      for (std::size_t i = 0; i < n; ++i) {
        items.push_back(&data[order[start + i]]);
        y.push_back(static_cast<float>(*items.back()->label));
      }
      const Batch batch = Batch::from(std::span<const WindowSample* const>(items));
      Rng drop = dropout_stream(tcfg.seed, state.step);
      model->params().zero_grad();
      auto logits = model->forward_classify_logits(batch, &drop);
      auto loss = bce_loss(logits, std::span<const float>(y));
      check_finite(loss, state.step);
      loss.backward();
      clip_grad_norm(model->params(), tcfg.clip_norm);
      adam_step(model->params(), state, tcfg);
      for (std::size_t i = 0; i < n; ++i) {
        preds.push_back(logits[i] > 0.0f);
        labels.push_back(static_cast<int>(y[i]));
      }
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
      m.samples += n;
      m.steps += 1;
    }
    m.loss = m.samples ? loss_sum / static_cast<double>(m.samples) : 0.0;
    m.f1 = f1_binary(preds, labels).f1;
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  result.checkpoint = finish(*model, std::move(state), tcfg);
  return result;
}

std::vector<float> predict_proba(const TabAConvBert<float>& model, std::span<const WindowSample> data,
                                 std::size_t batch_size) {
  NoGradGuard guard;
  std::vector<float> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    const auto p = model.classify_head(model.encoder_forward(model.embed_inputs(Batch::from(data.subspan(start, n)))));
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return out;
}

F1Result evaluate_classifier(const TabAConvBert<float>& model, std::span<const WindowSample> data, double threshold) {
  const auto probs = predict_proba(model, data);
  std::vector<int> preds, labels;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data[i].label) throw ConfigError("evaluation needs labelled windows");
    preds.push_back(probs[i] >= threshold);
    labels.push_back(*data[i].label);
  }
  return f1_binary(preds, labels);
}

MdmStats evaluate_mdm(const TabAConvBert<float>& model, std::span<const WindowSample> data, const MaskConfig& mask,
                      std::size_t batch_size) {
  NoGradGuard guard;
  MdmStats stats;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    const auto mb = make_masked_batch(data, std::span(idx).subspan(start, n), mask, 0);
    Tensor<float> reg;
    const auto preds = model.pretrain_heads(model.encoder_forward(model.embed_inputs(mb.batch, &reg)));
    mdm_loss(preds, std::span<const MaskPlan>(mb.plans), reg, 1.0, 1.0, &stats);
  }
  return stats;
}

std::vector<std::int32_t> majority_tokens(std::span<const WindowSample> data) {
  if (data.empty()) return {};
  const std::size_t n_cat = data[0].num_cat;
  std::vector<std::map<std::int32_t, std::size_t>> counts(n_cat);
  for (const auto& s : data)
    for (std::size_t t = 0; t < s.length; ++t)
      for (std::size_t f = 0; f < n_cat; ++f) ++counts[f][s.cat(t, f)];
  std::vector<std::int32_t> out;
  for (const auto& c : counts) {
    out.push_back(std::max_element(c.begin(), c.end(), [](const auto& a, const auto& b) {
                    return a.second < b.second;
                  })->first);
  }
  return out;
}

MdmStats baseline_mdm(std::span<const WindowSample> data, std::span<const std::int32_t> majority,
                      const MaskConfig& mask) {
  MdmStats stats;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const WindowSample& s = data[i];
    if (majority.size() != s.num_cat) throw ContractError("majority tokens do not match the field count");
    Rng rng = mask_stream(mask.seed, 0, i);
    const MaskPlan plan = sample_mask_plan(s.length, s.num_cat, s.num_cont, mask, rng);
    for (std::size_t t = 0; t < s.length; ++t) {
      for (std::size_t f = 0; f < s.num_cat; ++f) {
        if (!plan.cat_masked(t, f)) continue;
        ++stats.cat_count;
        stats.cat_correct += s.cat(t, f) == majority[f];
      }
      for (std::size_t f = 0; f < s.num_cont; ++f) {
        if (!plan.cont_masked(t, f)) continue;
        ++stats.cont_count;
        stats.cont_sq_error += static_cast<double>(s.cont(t, f)) * s.cont(t, f);
      }
    }
  }
  return stats;
}

template Tensor<float> mdm_loss<float>(const PretrainOutput<float>&, std::span<const MaskPlan>, const Tensor<float>&,
                                       double, double, MdmStats*);
template Tensor<double> mdm_loss<double>(const PretrainOutput<double>&, std::span<const MaskPlan>,
                                         const Tensor<double>&, double, double, MdmStats*);
template Tensor<float> bce_loss<float>(const Tensor<float>&, std::span<const float>);
template Tensor<double> bce_loss<double>(const Tensor<double>&, std::span<const double>);
template double clip_grad_norm<float>(Parameters<float>&, double);
template double clip_grad_norm<double>(Parameters<double>&, double);
template void adam_step<float>(Parameters<float>&, AdamState&, const TrainConfig&);
template void adam_step<double>(Parameters<double>&, AdamState&, const TrainConfig&);

}  // namespace tabaconv
