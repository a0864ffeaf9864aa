#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tabaconv/checkpoint.hpp"
#include "tabaconv/masking.hpp"
#include "tabaconv/model.hpp"

namespace tabaconv {

enum class TrainMode { kPretrain, kFinetune, kScratch };
const char* to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& s);

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 5;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // 0 disables clipping
  double cat_loss_weight = 1.0;
  double cont_loss_weight = 1.0;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::kPretrain;

  void validate() const;
};

/// Counts accumulated at masked cells.
struct MdmStats {
  std::size_t cat_count = 0;
  std::size_t cat_correct = 0;
  std::size_t cont_count = 0;
  double cont_sq_error = 0.0;

  double cat_accuracy() const { return cat_count ? static_cast<double>(cat_correct) / cat_count : 0.0; }
  double cont_mse() const { return cont_count ? cont_sq_error / static_cast<double>(cont_count) : 0.0; }
  MdmStats& operator+=(const MdmStats& o);
};

// Mean cross-entropy over masked categorical cells plus mean squared error over
// masked continuous cells plus reg. plans[b] belongs to batch row b and must
// carry targets (see apply_mask). Unmasked predictions never enter the graph.
template <typename T>
Tensor<T> mdm_loss(const PretrainOutput<T>& preds, std::span<const MaskPlan> plans, const Tensor<T>& reg,
                   double cat_weight = 1.0, double cont_weight = 1.0, MdmStats* stats = nullptr);

// Mean binary cross-entropy from logits.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, std::span<const T> labels);

// −[y ln p + (1−y) ln(1−p)] with p = σ(logit), evaluated without overflow.
double bce_from_logit(double logit, int label);

// Global L2 norm of the trainable gradients; rescales them when above max_norm.
template <typename T>
double clip_grad_norm(Parameters<T>& params, double max_norm);

// Bias-corrected Adam on every parameter that requires grad and has one.
// Non-finite gradients raise NumericError naming the parameter.
template <typename T>
void adam_step(Parameters<T>& params, AdamState& state, const TrainConfig& cfg);

struct F1Result {
  double f1 = 0.0, precision = 0.0, recall = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};
// 0 when TP + FP + FN == 0.
F1Result f1_binary(std::span<const int> preds, std::span<const int> labels);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string phase;
  double loss = 0.0;
  std::size_t samples = 0;
  std::size_t steps = 0;
  std::optional<double> masked_cat_acc;
  std::optional<double> masked_cont_mse;
  std::optional<double> f1;

  std::string to_json() const;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochMetrics> history;
};

// Masks every sample with mask_stream(mask.seed, epoch, index) and applies it.
struct MaskedBatch {
  Batch batch;
  std::vector<MaskPlan> plans;
};
MaskedBatch make_masked_batch(std::span<const WindowSample> data, std::span<const std::size_t> indices,
                              const MaskConfig& mask, std::uint64_t epoch);

TrainResult pretrain(std::span<const WindowSample> data, const FeatureSchema& schema, const ModelConfig& mcfg,
                     const TrainConfig& tcfg, const MaskConfig& mask, const EpochCallback& on_epoch = {});

// mode kFinetune starts from init (embeddings frozen, pretraining heads swapped
// for a classifier); kScratch trains a fresh model of the same architecture.
TrainResult finetune(const Checkpoint* init, std::span<const WindowSample> data, const FeatureSchema& schema,
                     const ModelConfig& mcfg, const TrainConfig& tcfg, const EpochCallback& on_epoch = {});

std::vector<float> predict_proba(const TabAConvBert<float>& model, std::span<const WindowSample> data,
                                 std::size_t batch_size = 256);
F1Result evaluate_classifier(const TabAConvBert<float>& model, std::span<const WindowSample> data,
                             double threshold = 0.5);
// Reconstruction quality on freshly masked copies of data, dropout off.
MdmStats evaluate_mdm(const TabAConvBert<float>& model, std::span<const WindowSample> data, const MaskConfig& mask,
                      std::size_t batch_size = 256);

// Most frequent token of each categorical field.
std::vector<std::int32_t> majority_tokens(std::span<const WindowSample> data);
// Scores the majority token and the mean (0) on the cells evaluate_mdm masks.
MdmStats baseline_mdm(std::span<const WindowSample> data, std::span<const std::int32_t> majority,
                      const MaskConfig& mask);

}  // namespace tabaconv
