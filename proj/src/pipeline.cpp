#include "tabaconv/pipeline.hpp"

#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "tabaconv/error.hpp"

namespace tabaconv {

using json = nlohmann::json;

GenResult run_gen(const SynthConfig& cfg, const fs::path& out) {
  GenResult r;
  r.data = generate(cfg);
  const CsvTable table = r.data.table();
  fs::create_directories(out);
  write_csv(out / "transactions.csv", table);
  const ColumnRoles roles = synth_roles();
  r.split = split_users(table, roles.user_column, 0.8, 0.1, cfg.seed);
  write_csv(out / "train.csv", select_users(table, roles.user_column, r.split.train));
  write_csv(out / "val.csv", select_users(table, roles.user_column, r.split.validation));
  write_csv(out / "test.csv", select_users(table, roles.user_column, r.split.test));
  std::ofstream(out / "roles.json") << roles.to_json() << "\n";

  json manifest = json::parse(r.data.manifest.to_json());
  manifest["config"] = json::parse(cfg.to_json());
  manifest["split"] = {{"train", r.split.train}, {"validation", r.split.validation}, {"test", r.split.test}};
  std::ofstream(out / "manifest.json") << manifest.dump(2) << "\n";
  return r;
}

ColumnRoles resolve_roles(const fs::path& data, const std::optional<fs::path>& roles) {
  if (roles) return ColumnRoles::load(*roles);
  const fs::path beside = data.parent_path() / "roles.json";
  if (fs::exists(beside)) return ColumnRoles::load(beside);
  throw ConfigError("no column roles for " + data.string() + "; pass --roles or place roles.json beside the data");
}

namespace {

Dataset windows_for(const CsvTable& table, FeatureSchema schema, std::size_t window, std::size_t stride,
                    WindowMode mode) {
  Dataset d;
  d.windows = make_dataset(encode_rows(table, schema), schema, window, stride, mode);
  d.schema = std::move(schema);
  return d;
}

void prepare_run_dir(const fs::path& out) {
  if (out.empty()) throw ConfigError("an output directory is required");
  fs::create_directories(out);
  std::ofstream(out / "metrics.jsonl", std::ios::trunc);
}

void append_metrics(const fs::path& out, const std::string& record) {
  std::ofstream f(out / "metrics.jsonl", std::ios::app);
  if (!f) throw ConfigError("cannot write " + (out / "metrics.jsonl").string());
  f << record << "\n";
}

}  // namespace

Dataset load_dataset(const fs::path& data, const ColumnRoles& roles, std::size_t window, std::size_t stride,
                     WindowMode mode) {
  const CsvTable table = read_csv(data);
  FeatureSchema schema = infer_schema(table, roles);
  for (const auto& w : schema.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  return windows_for(table, std::move(schema), window, stride, mode);
}

Dataset load_dataset(const fs::path& data, const FeatureSchema& schema, std::size_t window, std::size_t stride,
                     WindowMode mode) {
  return windows_for(read_csv(data), schema, window, stride, mode);
}

StageReport run_pretrain(const PretrainOptions& opts) {
  opts.model.validate();
  opts.train.validate();
  opts.mask.validate();
  if (opts.mask.p_field == 0.0 && opts.mask.p_row == 0.0) {
    throw ConfigError("p_field = p_row = 0 leaves the masked-data-modeling loss without targets");
  }
  const Dataset ds = load_dataset(opts.data, resolve_roles(opts.data, opts.roles), opts.window, opts.stride,
                                  WindowMode::kPretrain);
  prepare_run_dir(opts.out);
  ds.schema.save(opts.out / "schema.json");
  TrainConfig tcfg = opts.train;
  tcfg.mode = TrainMode::kPretrain;
  auto result = pretrain(ds.windows, ds.schema, opts.model, tcfg, opts.mask,
                         [&](const EpochMetrics& m) { append_metrics(opts.out, m.to_json()); });
  StageReport report{result.history, opts.out / "ckpt", ds.windows.size()};
  save_checkpoint(result.checkpoint, report.checkpoint);
  return report;
}

StageReport run_finetune(const FinetuneOptions& opts) {
  opts.train.validate();
  std::optional<Checkpoint> init;
  if (opts.train.mode == TrainMode::kFinetune) {
    if (!opts.checkpoint) throw ConfigError("--mode finetune needs --ckpt");
    init = load_checkpoint(*opts.checkpoint);
    if (init->head != HeadKind::kPretrain) throw ConfigError("checkpoint does not hold a pretrained model");
  } else if (opts.train.mode != TrainMode::kScratch) {
    throw ConfigError("finetune mode must be finetune or scratch");
  } else {
    opts.model.validate();
  }
  const Dataset ds = load_dataset(opts.data, resolve_roles(opts.data, opts.roles), opts.window, opts.stride,
                                  WindowMode::kDownstream);
  if (init && init->schema.digest() != ds.schema.digest()) {
    throw ConfigError("schema of " + opts.data.string() + " does not match the checkpoint's schema (digest " +
                      std::to_string(ds.schema.digest()) + " vs " + std::to_string(init->schema.digest()) + ")");
  }
  prepare_run_dir(opts.out);
  ds.schema.save(opts.out / "schema.json");
  auto result = finetune(init ? &*init : nullptr, ds.windows, ds.schema, opts.model, opts.train,
                         [&](const EpochMetrics& m) { append_metrics(opts.out, m.to_json()); });
  StageReport report{result.history, opts.out / "ckpt", ds.windows.size()};
  save_checkpoint(result.checkpoint, report.checkpoint);
  return report;
}

std::string EvaluateReport::line() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "F1 %.6f precision %.6f recall %.6f windows %zu", f1.f1, f1.precision, f1.recall,
                windows);
  return buf;
}

EvaluateReport run_evaluate(const EvaluateOptions& opts) {
  const Checkpoint ckpt = load_checkpoint(opts.checkpoint);
  if (ckpt.head != HeadKind::kClassifier) throw ConfigError("checkpoint has no classifier head; finetune it first");
  if (opts.schema && FeatureSchema::load(*opts.schema).digest() != ckpt.schema.digest()) {
    throw ConfigError("schema " + opts.schema->string() + " does not match the checkpoint's schema");
  }
  const Dataset ds = load_dataset(opts.data, ckpt.schema, opts.window, opts.stride, WindowMode::kDownstream);
  const auto model = ckpt.model();
  EvaluateReport r;
  r.f1 = evaluate_classifier(model, ds.windows, opts.threshold);
  r.windows = ds.windows.size();

  const fs::path out = opts.out ? *opts.out : opts.checkpoint.parent_path();
  fs::create_directories(out);
  append_metrics(out, json{{"phase", "evaluate"},
                           {"data", opts.data.string()},
                           {"f1", r.f1.f1},
                           {"precision", r.f1.precision},
                           {"recall", r.f1.recall},
                           {"tp", r.f1.tp},
                           {"fp", r.f1.fp},
                           {"fn", r.f1.fn},
                           {"tn", r.f1.tn},
                           {"windows", r.windows}}
                          .dump());
  return r;
}

GradReport run_gradcheck(const GradcheckOptions& opts) {
  SynthConfig sc;
  sc.n_users = 2;
  sc.rows_per_user = 8;
  sc.fraud_rate = 0.0;
  sc.n_merchants = 4;
  sc.n_categories = 3;
  sc.n_cities = 3;
  sc.seed = opts.seed;
  const SynthData data = generate(sc);
  const CsvTable table = data.table();
  const FeatureSchema schema = infer_schema(table, synth_roles());
  auto windows = make_dataset(encode_rows(table, schema), schema, 4, 4, WindowMode::kPretrain);
  windows.resize(2);

  ModelConfig mc = ModelConfig::with_width(4);
  mc.num_heads = 2;
  mc.ffn_mult = 2;
  mc.dropout = 0.0;

  MaskConfig mask{0.5, 0.25, opts.seed};
  const std::size_t idx[] = {0, 1};
  const MaskedBatch mb = make_masked_batch(windows, idx, mask, 0);

  GradCheckOptions gco;
  gco.h = opts.h;
  gco.tol = opts.tol;
  gco.max_coords = opts.max_coords;
  gco.seed = opts.seed;

  TabAConvBert<double> pre(schema, mc, HeadKind::kPretrain, opts.seed);
  std::map<std::string, Tensor<double>> params;
  for (auto& [name, t] : pre.params()) params.emplace(name, t);
  GradReport report = grad_check(
      [&] {
        Tensor<double> reg;
        const auto preds = pre.forward_pretrain(mb.batch, &reg);
        return mdm_loss(preds, std::span<const MaskPlan>(mb.plans), reg);
      },
      params, gco);

  TabAConvBert<double> cls(schema, mc, HeadKind::kClassifier, opts.seed + 1);
  std::map<std::string, Tensor<double>> head{{"classifier.weight", cls.params().at("classifier.weight")},
                                             {"classifier.bias", cls.params().at("classifier.bias")}};
  const double labels[] = {1.0, 0.0};
  const Batch plain = Batch::from(std::span<const WindowSample>(windows));
  const GradReport cls_report = grad_check(
      [&] { return bce_loss(cls.forward_classify_logits(plain), std::span<const double>(labels)); }, head, gco);
  for (const auto& [name, err] : cls_report.max_rel_error) report.max_rel_error[name] = err;
  report.pass = report.pass && cls_report.pass;
  return report;
}

}  // namespace tabaconv
