#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tabaconv/grad_check.hpp"
#include "tabaconv/synth.hpp"
#include "tabaconv/training.hpp"

// End-to-end stages shared by the command-line tool and the Python module.
namespace tabaconv {

namespace fs = std::filesystem;

struct GenResult {
  SynthData data;
  UserSplit split;
};

// transactions.csv, train/val/test.csv (80/10/10 by user), manifest.json, roles.json.
GenResult run_gen(const SynthConfig& cfg, const fs::path& out);

// Explicit roles file, else roles.json beside the data, else ConfigError.
ColumnRoles resolve_roles(const fs::path& data, const std::optional<fs::path>& roles);

struct Dataset {
  FeatureSchema schema;
  std::vector<WindowSample> windows;
};

// Schema inferred from the file itself.
Dataset load_dataset(const fs::path& data, const ColumnRoles& roles, std::size_t window, std::size_t stride,
                     WindowMode mode);
// Encoded with an existing schema (evaluation on held-out users).
Dataset load_dataset(const fs::path& data, const FeatureSchema& schema, std::size_t window, std::size_t stride,
                     WindowMode mode);

struct PretrainOptions {
  fs::path data;
  std::optional<fs::path> roles;
  fs::path out;
  ModelConfig model;
  TrainConfig train;
  MaskConfig mask;
  std::size_t window = kPretrainWindow;
  std::size_t stride = kPretrainStride;
};

struct FinetuneOptions {
  fs::path data;
  std::optional<fs::path> roles;
  std::optional<fs::path> checkpoint;  // required for mode finetune
  fs::path out;
  ModelConfig model;                   // used by mode scratch
  TrainConfig train;
  std::size_t window = kDownstreamWindow;
  std::size_t stride = kDownstreamStride;
};

struct EvaluateOptions {
  fs::path checkpoint;
  fs::path data;
  std::optional<fs::path> schema;  // must match the checkpoint when given
  std::optional<fs::path> out;     // metrics.jsonl directory, default: checkpoint's
  std::size_t window = kDownstreamWindow;
  std::size_t stride = kDownstreamStride;
  double threshold = 0.5;
};

struct StageReport {
  std::vector<EpochMetrics> history;
  fs::path checkpoint;
  std::size_t windows = 0;
};

struct EvaluateReport {
  F1Result f1;
  std::size_t windows = 0;
  std::string line() const;
};

// Each stage writes <out>/ckpt, <out>/schema.json and <out>/metrics.jsonl.
StageReport run_pretrain(const PretrainOptions& opts);
StageReport run_finetune(const FinetuneOptions& opts);
EvaluateReport run_evaluate(const EvaluateOptions& opts);

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double tol = 1e-4;
  double h = 1e-5;
  std::size_t max_coords = 64;
};

// Tiny 64-bit model on a tiny synthetic batch, dropout off. Covers the MDM
// loss through every backbone and pretraining-head parameter and the
// classification loss through the classifier head.
GradReport run_gradcheck(const GradcheckOptions& opts);

}  // namespace tabaconv
