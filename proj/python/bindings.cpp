#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "tabaconv/error.hpp"
#include "tabaconv/pipeline.hpp"

namespace py = pybind11;
using namespace tabaconv;

namespace {

py::dict epoch_dict(const EpochMetrics& e) {
  py::dict d;
  d["epoch"] = e.epoch;
  d["phase"] = e.phase;
  d["loss"] = e.loss;
  d["samples"] = e.samples;
  d["steps"] = e.steps;
  d["masked_cat_acc"] = e.masked_cat_acc;
  d["masked_cont_mse"] = e.masked_cont_mse;
  d["f1"] = e.f1;
  return d;
}

py::dict stage_dict(const StageReport& r) {
  py::list history;
  for (const auto& e : r.history) history.append(epoch_dict(e));
  py::dict d;
  d["checkpoint"] = r.checkpoint;
  d["windows"] = r.windows;
  d["history"] = history;
  return d;
}

ModelConfig model_config(std::size_t d_model, std::size_t heads, std::size_t kernel, std::size_t blocks,
                         std::size_t ffn_mult, double dropout, bool circular) {
  ModelConfig m = ModelConfig::with_width(d_model);
  m.num_heads = heads;
  m.kernel_size = kernel;
  m.num_blocks = blocks;
  m.ffn_mult = ffn_mult;
  m.dropout = dropout;
  m.conv_padding = circular ? ops::Padding::kCircular : ops::Padding::kZero;
  return m;
}

TrainConfig train_config(std::size_t epochs, std::size_t batch_size, double lr, double clip_norm, std::uint64_t seed,
                         TrainMode mode) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.learning_rate = lr;
  t.clip_norm = clip_norm;
  t.seed = seed;
  t.mode = mode;
  return t;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "TabAConvBERT: masked pretraining and fraud classification for tabular time series";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<IndexError>(m, "TensorIndexError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<ValueError>(m, "InvalidValueError", base.ptr());
  py::register_exception<SchemaError>(m, "SchemaError", base.ptr());
  py::register_exception<IntegrityError>(m, "IntegrityError", base.ptr());
  py::register_exception<UnsupportedVersionError>(m, "UnsupportedVersionError", base.ptr());

  m.def(
      "gen",
      [](const fs::path& out, std::size_t users, std::size_t rows, double fraud_rate, double label_noise,
         std::uint64_t seed) {
        SynthConfig c;
        c.n_users = users;
        c.rows_per_user = rows;
        c.fraud_rate = fraud_rate;
        c.label_noise = label_noise;
        c.seed = seed;
        GenResult g;
        {
          py::gil_scoped_release release;
          g = run_gen(c, out);
        }
        py::dict d;
        d["rows"] = g.data.rows.size();
        d["rule_rate"] = g.data.manifest.rule_rate;
        d["label_rate"] = g.data.manifest.label_rate;
        d["bayes_f1_bound"] = bayes_f1_bound(g.data);
        d["train_users"] = g.split.train;
        d["validation_users"] = g.split.validation;
        d["test_users"] = g.split.test;
        return d;
      },
      py::arg("out"), py::arg("users") = 200, py::arg("rows") = 200, py::arg("fraud_rate") = 0.05,
      py::arg("label_noise") = 0.05, py::arg("seed") = 0,
      "Writes a synthetic transaction dataset with train/val/test splits to out.");

  m.def(
      "bayes_f1_bound",
      [](std::size_t users, std::size_t rows, double fraud_rate, double label_noise, std::uint64_t seed) {
        SynthConfig c;
        c.n_users = users;
        c.rows_per_user = rows;
        c.fraud_rate = fraud_rate;
        c.label_noise = label_noise;
        c.seed = seed;
        return bayes_f1_bound(c);
      },
      py::arg("users") = 200, py::arg("rows") = 200, py::arg("fraud_rate") = 0.05, py::arg("label_noise") = 0.05,
      py::arg("seed") = 0, "Row-level F1 of the clean rule against the noisy labels.");

  m.def(
      "pretrain",
      [](const fs::path& data, const fs::path& out, std::size_t epochs, std::size_t batch_size, double lr,
         double p_field, double p_row, std::size_t window, std::size_t stride, std::size_t d_model, std::size_t heads,
         std::size_t kernel, std::size_t blocks, std::size_t ffn_mult, double dropout, bool circular,
         std::uint64_t seed, const std::optional<fs::path>& roles) {
        PretrainOptions o;
        o.data = data;
        o.out = out;
        o.roles = roles;
        o.model = model_config(d_model, heads, kernel, blocks, ffn_mult, dropout, circular);
        o.train = train_config(epochs, batch_size, lr, 1.0, seed, TrainMode::kPretrain);
        o.mask = {p_field, p_row, seed};
        o.window = window;
        o.stride = stride;
        StageReport r;
        {
          py::gil_scoped_release release;
          r = run_pretrain(o);
        }
        return stage_dict(r);
      },
      py::arg("data"), py::arg("out"), py::arg("epochs") = 5, py::arg("batch_size") = 32, py::arg("lr") = 1e-3,
      py::arg("p_field") = 0.30, py::arg("p_row") = 0.15, py::arg("window") = kPretrainWindow,
      py::arg("stride") = kPretrainStride, py::arg("d_model") = 64, py::arg("heads") = 4, py::arg("kernel") = 3,
      py::arg("blocks") = 1, py::arg("ffn_mult") = 4, py::arg("dropout") = 0.1, py::arg("circular") = false,
      py::arg("seed") = 0, py::arg("roles") = py::none(),
      "Masked-data-modelling pretraining; writes out/ckpt, out/schema.json and out/metrics.jsonl.");

  m.def(
      "finetune",
      [](const fs::path& data, const fs::path& out, const std::optional<fs::path>& ckpt,
         const std::string& mode, std::size_t epochs, std::size_t batch_size, double lr, std::size_t window,
         std::size_t stride, std::size_t d_model, std::size_t heads, std::size_t kernel, std::size_t blocks,
         std::size_t ffn_mult, double dropout, bool circular, std::uint64_t seed,
         const std::optional<fs::path>& roles) {
        FinetuneOptions o;
        o.data = data;
        o.out = out;
        o.checkpoint = ckpt;
        o.roles = roles;
        o.model = model_config(d_model, heads, kernel, blocks, ffn_mult, dropout, circular);
        o.train = train_config(epochs, batch_size, lr, 1.0, seed, train_mode_from_string(mode));
        o.window = window;
        o.stride = stride;
        StageReport r;
        {
          py::gil_scoped_release release;
          r = run_finetune(o);
        }
        return stage_dict(r);
      },
      py::arg("data"), py::arg("out"), py::arg("ckpt") = py::none(), py::arg("mode") = "finetune",
      py::arg("epochs") = 5, py::arg("batch_size") = 32, py::arg("lr") = 1e-3, py::arg("window") = kDownstreamWindow,
      py::arg("stride") = kDownstreamStride, py::arg("d_model") = 64, py::arg("heads") = 4, py::arg("kernel") = 3,
      py::arg("blocks") = 1, py::arg("ffn_mult") = 4, py::arg("dropout") = 0.1, py::arg("circular") = false,
      py::arg("seed") = 0, py::arg("roles") = py::none(),
      "Trains the fraud classifier from a pretrained checkpoint (mode 'finetune') or from scratch ('scratch').");

  m.def(
      "evaluate",
      [](const fs::path& ckpt, const fs::path& data, const std::optional<fs::path>& schema,
         std::size_t window, std::size_t stride, double threshold) {
        EvaluateOptions o;
        o.checkpoint = ckpt;
        o.data = data;
        o.schema = schema;
        o.window = window;
        o.stride = stride;
        o.threshold = threshold;
        EvaluateReport r;
        {
          py::gil_scoped_release release;
          r = run_evaluate(o);
        }
        py::dict d;
        d["f1"] = r.f1.f1;
        d["precision"] = r.f1.precision;
        d["recall"] = r.f1.recall;
        d["tp"] = r.f1.tp;
        d["fp"] = r.f1.fp;
        d["fn"] = r.f1.fn;
        d["tn"] = r.f1.tn;
        d["windows"] = r.windows;
        return d;
      },
      py::arg("ckpt"), py::arg("data"), py::arg("schema") = py::none(), py::arg("window") = kDownstreamWindow,
      py::arg("stride") = kDownstreamStride, py::arg("threshold") = 0.5, "F1 of a classifier checkpoint on a CSV.");

  m.def(
      "gradcheck",
      [](std::uint64_t seed, double tol, double h, std::size_t max_coords) {
        GradReport r;
        {
          py::gil_scoped_release release;
          r = run_gradcheck({seed, tol, h, max_coords});
        }
        py::dict d;
        d["pass"] = r.pass;
        d["tolerance"] = r.tolerance;
        d["max_rel_error"] = r.max_rel_error;
        return d;
      },
      py::arg("seed") = 0, py::arg("tol") = 1e-4, py::arg("h") = 1e-5, py::arg("max_coords") = 64,
      "Central-difference gradient check of the whole model in double precision.");

  m.def(
      "calendar_parts",
      [](std::int64_t ts) {
        const auto c = calendar_parts(ts);
        py::dict d;
        d["year"] = c.year;
        d["month"] = c.month;
        d["day"] = c.day;
        d["weekday"] = c.weekday;
        d["iso_week"] = c.iso_week;
        d["hour"] = c.hour;
        d["minute"] = c.minute;
        d["second"] = c.second;
        d["day_of_year"] = c.day_of_year;
        return d;
      },
      py::arg("epoch_seconds"), "UTC calendar fields of a Unix timestamp (weekday Monday = 0).");

  m.def("window_count", &window_count, py::arg("rows"), py::arg("window"), py::arg("stride"));

  m.def(
      "sample_mask",
      [](std::size_t length, std::size_t num_cat, std::size_t num_cont, double p_field, double p_row,
         std::uint64_t seed) {
        Rng rng(seed);
        const auto plan = sample_mask_plan(length, num_cat, num_cont, {p_field, p_row, seed}, rng);
        std::vector<std::vector<bool>> field(length, std::vector<bool>(plan.width()));
        std::vector<bool> rows(length);
        for (std::size_t t = 0; t < length; ++t) {
          rows[t] = plan.row_mask[t] != 0;
          for (std::size_t c = 0; c < plan.width(); ++c) field[t][c] = plan.masked(t, c);
        }
        return py::make_tuple(field, rows);
      },
      py::arg("length"), py::arg("num_cat"), py::arg("num_cont"), py::arg("p_field") = 0.30, py::arg("p_row") = 0.15,
      py::arg("seed") = 0, "One mask plan as (cells[T][F], rows[T]).");
}
