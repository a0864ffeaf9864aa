#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "tabaconv/error.hpp"
#include "tabaconv/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tabaconv;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kInputError = 2, kNumericError = 3 };

struct ModelFlags {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t kernel = 3;
  std::size_t blocks = 1;
  std::size_t attn_channels = 0;  // 0: half of d_model
  std::size_t conv_channels = 0;
  std::size_t ffn_mult = 4;
  double dropout = 0.1;
  double activity_reg = 1e-4;
  std::string padding = "zero";

  void add(CLI::App* cmd) {
    cmd->add_option("--d-model", d_model, "Model width")->capture_default_str();
    cmd->add_option("--heads", heads, "Attention heads")->capture_default_str();
    cmd->add_option("--kernel", kernel, "Convolution kernel size (odd)")->capture_default_str();
    cmd->add_option("--blocks", blocks, "Encoder blocks")->capture_default_str();
    cmd->add_option("--attn-channels", attn_channels, "Attention path channels (0: d_model/2)")->capture_default_str();
    cmd->add_option("--conv-channels", conv_channels, "Convolution path channels (0: d_model - attn)")
        ->capture_default_str();
    cmd->add_option("--ffn-mult", ffn_mult, "Feed-forward width multiplier")->capture_default_str();
    cmd->add_option("--dropout", dropout, "Dropout on sublayer outputs")->capture_default_str();
    cmd->add_option("--activity-reg", activity_reg, "Timestamp-net activity regularisation weight")
        ->capture_default_str();
    cmd->add_option("--padding", padding, "Convolution padding")
        ->check(CLI::IsMember({"zero", "circular"}))
        ->capture_default_str();
  }

  ModelConfig config() const {
    ModelConfig c = ModelConfig::with_width(d_model);
    c.num_heads = heads;
    c.kernel_size = kernel;
    c.num_blocks = blocks;
    if (attn_channels) c.attn_channels = attn_channels;
    c.conv_channels = conv_channels ? conv_channels : d_model - c.attn_channels;
    c.ffn_mult = ffn_mult;
    c.dropout = dropout;
    c.activity_reg_lambda = activity_reg;
    c.conv_padding = padding == "zero" ? ops::Padding::kZero : ops::Padding::kCircular;
    return c;
  }
};

void add_train_flags(CLI::App* cmd, TrainConfig& t) {
  cmd->add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--batch-size", t.batch_size, "Mini-batch size")->capture_default_str();
  cmd->add_option("--lr", t.learning_rate, "Adam learning rate")->capture_default_str();
  cmd->add_option("--beta1", t.beta1, "Adam beta1")->capture_default_str();
  cmd->add_option("--beta2", t.beta2, "Adam beta2")->capture_default_str();
  cmd->add_option("--adam-eps", t.eps, "Adam epsilon")->capture_default_str();
  cmd->add_option("--clip-norm", t.clip_norm, "Global gradient norm clip (0 disables)")->capture_default_str();
  cmd->add_option("--seed", t.seed, "Seed for initialisation, shuffling and dropout")->capture_default_str();
}

void echo_config(const CLI::App& app, const fs::path& out) {
  fs::create_directories(out);
  std::ofstream(out / "config.toml") << app.config_to_str(true, false);
}

void print_history(const std::vector<EpochMetrics>& history) {
  for (const auto& m : history) std::cout << m.to_json() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TabAConvBERT for tabular time series"};
  app.set_config("--config", "", "TOML/INI config file; command-line flags override it");
  app.require_subcommand(1);

  // gen
  SynthConfig synth;
  fs::path gen_out;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic transaction dataset with a known fraud rule");
  gen->add_option("--users", synth.n_users, "Number of users")->capture_default_str();
  gen->add_option("--rows", synth.rows_per_user, "Rows per user")->capture_default_str();
  gen->add_option("--fraud-rate", synth.fraud_rate, "Target rate of the clean fraud rule")->capture_default_str();
  gen->add_option("--label-noise", synth.label_noise, "Probability of flipping a label")->capture_default_str();
  gen->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  gen->add_option("--merchants", synth.n_merchants, "Merchant vocabulary size")->capture_default_str();
  gen->add_option("--categories", synth.n_categories, "Category vocabulary size")->capture_default_str();
  gen->add_option("--cities", synth.n_cities, "City vocabulary size")->capture_default_str();
  gen->add_option("--amount-mu", synth.amount_mu, "Log-normal amount location")->capture_default_str();
  gen->add_option("--amount-sigma", synth.amount_sigma, "Log-normal amount scale")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();

  // pretrain
  PretrainOptions pre;
  ModelFlags pre_model;
  std::string pre_roles;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Masked-data-modeling pretraining");
  pretrain_cmd->add_option("--data", pre.data, "Training CSV")->required()->check(CLI::ExistingFile);
  pretrain_cmd->add_option("--roles", pre_roles, "Column roles JSON (default: roles.json beside the data)");
  pretrain_cmd->add_option("--out", pre.out, "Run directory")->required();
  pretrain_cmd->add_option("--p-field", pre.mask.p_field, "Field masking probability")->capture_default_str();
  pretrain_cmd->add_option("--p-row", pre.mask.p_row, "Row masking probability")->capture_default_str();
  pretrain_cmd->add_option("--window", pre.window, "Window length")->capture_default_str();
  pretrain_cmd->add_option("--stride", pre.stride, "Window stride")->capture_default_str();
  pretrain_cmd->add_option("--cat-weight", pre.train.cat_loss_weight, "Cross-entropy term weight")
      ->capture_default_str();
  pretrain_cmd->add_option("--cont-weight", pre.train.cont_loss_weight, "Squared-error term weight")
      ->capture_default_str();
  add_train_flags(pretrain_cmd, pre.train);
  pre_model.add(pretrain_cmd);

  // finetune
  FinetuneOptions ft;
  ModelFlags ft_model;
  std::string ft_roles, ft_ckpt, ft_mode = "finetune";
  auto* finetune_cmd = app.add_subcommand("finetune", "Binary sequence classification (finetune or from scratch)");
  finetune_cmd->add_option("--ckpt", ft_ckpt, "Pretrained checkpoint (mode finetune)");
  finetune_cmd->add_option("--data", ft.data, "Labelled training CSV")->required()->check(CLI::ExistingFile);
  finetune_cmd->add_option("--roles", ft_roles, "Column roles JSON (default: roles.json beside the data)");
  finetune_cmd->add_option("--out", ft.out, "Run directory")->required();
  finetune_cmd->add_option("--mode", ft_mode, "finetune: frozen pretrained embeddings; scratch: random init")
      ->check(CLI::IsMember({"finetune", "scratch"}))
      ->capture_default_str();
  finetune_cmd->add_option("--window", ft.window, "Window length")->capture_default_str();
  finetune_cmd->add_option("--stride", ft.stride, "Window stride")->capture_default_str();
  add_train_flags(finetune_cmd, ft.train);
  ft_model.add(finetune_cmd);

  // evaluate
  EvaluateOptions ev;
  std::string ev_schema, ev_out;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "F1, precision and recall of a classifier checkpoint");
  evaluate_cmd->add_option("--ckpt", ev.checkpoint, "Classifier checkpoint")->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--data", ev.data, "Labelled held-out CSV")->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--schema", ev_schema, "Schema file that must match the checkpoint");
  evaluate_cmd->add_option("--out", ev_out, "Directory for metrics.jsonl (default: the checkpoint's)");
  evaluate_cmd->add_option("--window", ev.window, "Window length")->capture_default_str();
  evaluate_cmd->add_option("--stride", ev.stride, "Window stride")->capture_default_str();
  evaluate_cmd->add_option("--threshold", ev.threshold, "Decision threshold")->capture_default_str();

  // gradcheck
  GradcheckOptions gc;
  std::size_t gc_show = 5;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient check of a tiny model");
  gradcheck_cmd->add_option("--seed", gc.seed, "Seed for data, weights and coordinate sampling")
      ->capture_default_str();
  gradcheck_cmd->add_option("--tol", gc.tol, "Relative error tolerance")->capture_default_str();
  gradcheck_cmd->add_option("--step", gc.h, "Finite-difference step")->capture_default_str();
  gradcheck_cmd->add_option("--max-coords", gc.max_coords, "Coordinates sampled per parameter")
      ->capture_default_str();
  gradcheck_cmd->add_option("--show", gc_show, "Worst parameters listed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInputError;
  }

  try {
    if (*gen) {
      const auto r = run_gen(synth, gen_out);
      echo_config(app, gen_out);
      std::cout << "wrote " << r.data.rows.size() << " rows to " << (gen_out / "transactions.csv").string()
                << " (rule rate " << r.data.manifest.rule_rate << ", label rate " << r.data.manifest.label_rate
                << ")\n";
    } else if (*pretrain_cmd) {
      if (!pre_roles.empty()) pre.roles = pre_roles;
      pre.model = pre_model.config();
      pre.mask.seed = pre.train.seed;
      const auto r = run_pretrain(pre);
      echo_config(app, pre.out);
      print_history(r.history);
      std::cout << "checkpoint " << r.checkpoint.string() << "\n";
    } else if (*finetune_cmd) {
      if (!ft_roles.empty()) ft.roles = ft_roles;
      if (!ft_ckpt.empty()) ft.checkpoint = ft_ckpt;
      ft.train.mode = train_mode_from_string(ft_mode);
      ft.model = ft_model.config();
      const auto r = run_finetune(ft);
      echo_config(app, ft.out);
      print_history(r.history);
      std::cout << "checkpoint " << r.checkpoint.string() << "\n";
    } else if (*evaluate_cmd) {
      if (!ev_schema.empty()) ev.schema = ev_schema;
      if (!ev_out.empty()) ev.out = ev_out;
      std::cout << run_evaluate(ev).line() << "\n";
    } else if (*gradcheck_cmd) {
      const GradReport report = run_gradcheck(gc);
      std::printf("%s: %zu parameters, tolerance %g\n", report.pass ? "PASS" : "FAIL", report.max_rel_error.size(),
                  report.tolerance);
      for (const auto& [name, err] : report.worst(gc_show)) std::printf("  %-32s %.3e\n", name.c_str(), err);
      return report.pass ? kOk : kCheckFailed;
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumericError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  }
  return kOk;
}
