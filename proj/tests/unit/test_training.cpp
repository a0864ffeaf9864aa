#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "tabaconv/error.hpp"
#include "tabaconv/synth.hpp"
#include "tabaconv/training.hpp"

using namespace tabaconv;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  FeatureSchema schema;
  std::vector<WindowSample> pretrain, downstream;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    SynthConfig cfg;
    cfg.n_users = 6;
    cfg.rows_per_user = 60;
    cfg.n_merchants = 12;
    cfg.n_categories = 4;
    cfg.n_cities = 6;
    const auto table = generate(cfg).table();
    Fixture out;
    out.schema = infer_schema(table, synth_roles());
    const auto users = encode_rows(table, out.schema);
    out.pretrain = make_dataset(users, out.schema, 10, 5, WindowMode::kPretrain);
    out.downstream = make_dataset(users, out.schema, 10, 10, WindowMode::kDownstream);
    return out;
  }();
  return f;
}

ModelConfig tiny() {
  ModelConfig c = ModelConfig::with_width(16);
  c.num_heads = 2;
  c.ffn_mult = 2;
  return c;
}

TrainConfig quick(std::uint64_t seed = 0, std::size_t epochs = 2) {
  TrainConfig t;
  t.batch_size = 16;
  t.epochs = epochs;
  t.seed = seed;
  return t;
}

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "tabaconv_test_training";
  fs::create_directories(dir);
  return dir / name;
}

// One window with one masked categorical cell or one masked continuous cell.
MaskPlan single_cell_plan(std::size_t T, std::size_t n_cat, std::size_t n_cont, std::size_t t, std::size_t c) {
  MaskPlan p;
  p.length = T;
  p.num_cat = n_cat;
  p.num_cont = n_cont;
  p.field_mask.assign(T * (n_cat + n_cont), 0);
  p.row_mask.assign(T, 0);
  p.field_mask[t * (n_cat + n_cont) + c] = 1;
  return p;
}

}  // namespace

TEST_CASE("mdm_loss examples") {
  const std::size_t T = 3, V = 7;
  PretrainOutput<double> preds;
  preds.cat_logits.push_back(Tensor<double>::zeros({1, T, V}));
  preds.cont_preds.push_back(Tensor<double>::full({1, T, 1}, 0.5));
  const auto reg = Tensor<double>::scalar(0.125);

  SUBCASE("empty plan leaves only the regulariser") {
    auto p = single_cell_plan(T, 1, 1, 0, 0);
    p.field_mask.assign(p.field_mask.size(), 0);
    std::vector<MaskPlan> plans = {p};
    CHECK(mdm_loss(preds, std::span<const MaskPlan>(plans), reg).item() == 0.125);
  }
  SUBCASE("uniform logits give ln V") {
    auto p = single_cell_plan(T, 1, 1, 1, 0);
    p.cat_targets = {4};
    std::vector<MaskPlan> plans = {p};
    CHECK(mdm_loss(preds, std::span<const MaskPlan>(plans), Tensor<double>()).item() ==
          doctest::Approx(std::log(7.0)).epsilon(1e-12));
  }
  SUBCASE("prediction 0.5 against target 0 gives 0.25") {
    auto p = single_cell_plan(T, 1, 1, 2, 1);
    p.cont_targets = {0.0f};
    std::vector<MaskPlan> plans = {p};
    CHECK(mdm_loss(preds, std::span<const MaskPlan>(plans), Tensor<double>()).item() ==
          doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("plans without targets are rejected") {
    std::vector<MaskPlan> plans = {single_cell_plan(T, 1, 1, 1, 0)};
    CHECK_THROWS_AS(mdm_loss(preds, std::span<const MaskPlan>(plans), reg), ContractError);
  }
}

TEST_CASE("mdm_loss is bit-exactly invariant to unmasked predictions") {
  const auto& f = fixture();
  TabAConvBert<double> model(f.schema, tiny(), HeadKind::kPretrain, 3);
  MaskConfig mask;
  std::vector<std::size_t> idx = {0, 1, 2, 3};
  const auto mb = make_masked_batch(f.pretrain, idx, mask, 1);
  Tensor<double> reg;
  auto preds = model.forward_pretrain(mb.batch, &reg);
  const double before = mdm_loss(preds, std::span<const MaskPlan>(mb.plans), reg).item();

  Rng rng(1);
  const std::size_t L = mb.batch.length;
  for (std::size_t b = 0; b < mb.plans.size(); ++b)
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t c = 0; c < preds.cat_logits.size(); ++c) {
        if (mb.plans[b].cat_masked(t, c)) continue;
        auto& v = preds.cat_logits[c].values();
        const std::size_t V = preds.cat_logits[c].size(2);
        for (std::size_t k = 0; k < V; ++k) v[(b * L + t) * V + k] += rng.normal() * 100.0;
      }
      for (std::size_t c = 0; c < preds.cont_preds.size(); ++c)
        if (!mb.plans[b].cont_masked(t, c)) preds.cont_preds[c].values()[b * L + t] = rng.normal() * 1e6;
    }
  const double after = mdm_loss(preds, std::span<const MaskPlan>(mb.plans), reg).item();
  CHECK(std::memcmp(&before, &after, sizeof before) == 0);
}

TEST_CASE("bce examples") {
  CHECK(bce_from_logit(0.0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(bce_from_logit(0.0, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  const double logit_09 = std::log(0.9 / 0.1);
  CHECK(bce_from_logit(logit_09, 0) == doctest::Approx(2.302585).epsilon(1e-6));
  CHECK(bce_from_logit(1000.0, 1) == doctest::Approx(0.0));
  CHECK(std::isfinite(bce_from_logit(1000.0, 0)));
  CHECK(bce_from_logit(1000.0, 0) == doctest::Approx(1000.0));
  CHECK(bce_from_logit(-1000.0, 0) == doctest::Approx(0.0));

  auto logits = Tensor<double>::from({3}, {0.0, logit_09, 1000.0});
  std::vector<double> y = {1.0, 0.0, 1.0};
  CHECK(bce_loss(logits, std::span<const double>(y)).item() ==
        doctest::Approx((std::log(2.0) + std::log(10.0)) / 3.0).epsilon(1e-12));
}

TEST_CASE("adam examples") {
  TrainConfig cfg;
  Parameters<double> p;
  p.add("a", Tensor<double>::from({3}, {1.0, 2.0, 3.0}).set_requires_grad(true));
  p.add("b", Tensor<double>::from({3}, {1.0, 2.0, 3.0}).set_requires_grad(true));
  p.add("z", Tensor<double>::from({2}, {5.0, 6.0}).set_requires_grad(true));
  const std::vector<double> g = {0.5, -3.0, 1e-3};
  for (const char* n : {"a", "b"}) {
    auto buf = p.at(n).mutable_grad();
    std::copy(g.begin(), g.end(), buf.begin());
  }
  auto zb = p.at("z").mutable_grad();
  std::fill(zb.begin(), zb.end(), 0.0);
  AdamState state;
  adam_step(p, state, cfg);
  CHECK(state.step == 1);
  const std::vector<double> start = {1.0, 2.0, 3.0};
  for (std::size_t i = 0; i < 3; ++i) {
    const double sign = g[i] > 0 ? 1.0 : -1.0;
    CHECK(p.at("a")[i] == doctest::Approx(start[i] - cfg.learning_rate * sign).epsilon(1e-7));
    CHECK(p.at("a")[i] == p.at("b")[i]);
  }
  CHECK(p.at("z")[0] == 5.0);
  CHECK(p.at("z")[1] == 6.0);

  p.at("a").mutable_grad()[1] = std::nan("");
  CHECK_THROWS_WITH_AS(adam_step(p, state, cfg), doctest::Contains("'a'"), NumericError);
}

TEST_CASE("gradient clipping") {
  Parameters<double> p;
  p.add("a", Tensor<double>::from({2}, {0.0, 0.0}).set_requires_grad(true));
  auto g = p.at("a").mutable_grad();
  g[0] = 3.0;
  g[1] = 4.0;
  CHECK(clip_grad_norm(p, 1.0) == doctest::Approx(5.0));
  CHECK(p.at("a").grad()[0] == doctest::Approx(0.6));
  CHECK(p.at("a").grad()[1] == doctest::Approx(0.8));
  CHECK(clip_grad_norm(p, 10.0) == doctest::Approx(1.0));
  CHECK(p.at("a").grad()[0] == doctest::Approx(0.6));
}

TEST_CASE("f1 examples") {
  std::vector<int> y = {1, 0, 1, 1, 0};
  CHECK(f1_binary(y, y).f1 == 1.0);
  // TP=2 FP=1 FN=1
  std::vector<int> p = {1, 1, 1, 0, 0};
  std::vector<int> l = {1, 0, 1, 1, 0};
  const auto r = f1_binary(p, l);
  CHECK(r.precision == doctest::Approx(2.0 / 3.0));
  CHECK(r.recall == doctest::Approx(2.0 / 3.0));
  CHECK(r.f1 == doctest::Approx(2.0 / 3.0));
  std::vector<int> zeros(5, 0);
  CHECK(f1_binary(zeros, l).f1 == 0.0);
  CHECK(f1_binary(zeros, zeros).f1 == 0.0);
  std::vector<int> shorter = {1, 0};
  CHECK_THROWS_AS(f1_binary(shorter, l), ContractError);
}

TEST_CASE("f1 matches a brute-force confusion matrix") {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<int> p(n), l(n);
    const double pp = rng.uniform(), pl = rng.uniform();
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.bernoulli(pp);
      l[i] = rng.bernoulli(pl);
    }
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      tp += p[i] && l[i];
      fp += p[i] && !l[i];
      fn += !p[i] && l[i];
    }
    const double expect = tp + fp + fn == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
    REQUIRE(f1_binary(p, l).f1 == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("checkpoint round trip") {
  const auto& f = fixture();
  auto tcfg = quick(1, 1);
  const auto result = pretrain(f.pretrain, f.schema, tiny(), tcfg, MaskConfig{0.3, 0.15, 1});
  const auto path = temp_path("rt.ckpt");
  save_checkpoint(result.checkpoint, path);
  const auto loaded = load_checkpoint(path);
  CHECK(loaded.step == result.checkpoint.step);
  CHECK(loaded.config == result.checkpoint.config);
  CHECK(loaded.schema.digest() == f.schema.digest());
  CHECK(loaded.optimizer == result.checkpoint.optimizer);
  CHECK(loaded.rng_key == result.checkpoint.rng_key);
  CHECK(loaded.rng_counter == result.checkpoint.rng_counter);

  const auto batch = Batch::from(std::span<const WindowSample>(f.pretrain.data(), 8));
  const auto a = result.checkpoint.model().forward_pretrain(batch, nullptr);
  const auto b = loaded.model().forward_pretrain(batch, nullptr);
  for (std::size_t i = 0; i < a.cat_logits.size(); ++i) CHECK(a.cat_logits[i].values() == b.cat_logits[i].values());
  for (std::size_t i = 0; i < a.cont_preds.size(); ++i) CHECK(a.cont_preds[i].values() == b.cont_preds[i].values());

  SUBCASE("truncated file") {
    const auto size = fs::file_size(path);
    for (auto keep : {std::uintmax_t{3}, std::uintmax_t{12}, size / 2, size - 1}) {
      fs::copy_file(path, temp_path("cut.ckpt"), fs::copy_options::overwrite_existing);
      fs::resize_file(temp_path("cut.ckpt"), keep);
      CHECK_THROWS_AS(load_checkpoint(temp_path("cut.ckpt")), IntegrityError);
    }
  }
  SUBCASE("flipped byte") {
    std::fstream io(path, std::ios::in | std::ios::out | std::ios::binary);
    io.seekg(static_cast<std::streamoff>(fs::file_size(path) / 2));
    char c = 0;
    io.get(c);
    io.seekp(static_cast<std::streamoff>(fs::file_size(path) / 2));
    io.put(static_cast<char>(c ^ 0x5A));
    io.close();
    CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
  }
  SUBCASE("future version") {
    std::fstream io(path, std::ios::in | std::ios::out | std::ios::binary);
    io.seekp(5);
    const std::uint32_t v = 999;
    io.write(reinterpret_cast<const char*>(&v), sizeof v);
    io.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("999"), UnsupportedVersionError);
  }
  SUBCASE("missing file") { CHECK_THROWS(load_checkpoint(temp_path("does_not_exist.ckpt"))); }
}

TEST_CASE("one step decreases the loss on a fixed batch") {
  const auto& f = fixture();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto cfg = tiny();
    cfg.dropout = 0.0;
    TabAConvBert<float> model(f.schema, cfg, HeadKind::kPretrain, seed);
    std::vector<std::size_t> idx(16);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = (i * 7 + seed) % f.pretrain.size();
    const auto mb = make_masked_batch(f.pretrain, idx, MaskConfig{0.3, 0.15, seed}, 1);
    auto eval = [&] {
      Tensor<float> reg;
      return mdm_loss(model.forward_pretrain(mb.batch, &reg), std::span<const MaskPlan>(mb.plans), reg);
    };
    auto loss = eval();
    const float before = loss.item();
    CHECK(std::isfinite(before));
    CHECK(before > 0.0f);
    loss.backward();
    AdamState state;
    TrainConfig t;
    adam_step(model.params(), state, t);
    CHECK(eval().item() < before);
  }
}

TEST_CASE("pretraining is deterministic and logs every epoch") {
  const auto& f = fixture();
  std::vector<EpochMetrics> seen;
  const auto a = pretrain(f.pretrain, f.schema, tiny(), quick(4), MaskConfig{0.3, 0.15, 4},
                          [&](const EpochMetrics& m) { seen.push_back(m); });
  const auto b = pretrain(f.pretrain, f.schema, tiny(), quick(4), MaskConfig{0.3, 0.15, 4});
  REQUIRE(a.history.size() == 2);
  CHECK(seen.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(a.history[e].to_json() == b.history[e].to_json());
    CHECK(a.history[e].masked_cat_acc.has_value());
    CHECK(a.history[e].masked_cont_mse.has_value());
  }
  for (const auto& [name, t] : a.checkpoint.params) CHECK(t.values() == b.checkpoint.params.at(name).values());
  const auto c = pretrain(f.pretrain, f.schema, tiny(), quick(5), MaskConfig{0.3, 0.15, 5});
  CHECK(c.history[0].loss != a.history[0].loss);
}

TEST_CASE("pretraining edge cases") {
  const auto& f = fixture();
  const auto empty = pretrain(std::span<const WindowSample>(), f.schema, tiny(), quick(0, 1), MaskConfig{});
  CHECK(empty.checkpoint.step == 0);
  CHECK(empty.history.size() == 1);
  CHECK_THROWS_AS(pretrain(f.pretrain, f.schema, tiny(), quick(), MaskConfig{0.0, 0.0, 0}), ConfigError);
  // Windows from another schema.
  auto other = f.schema;
  other.fields.erase(other.fields.begin() + static_cast<std::ptrdiff_t>(other.categorical_fields()[0]));
  CHECK_THROWS_AS(pretrain(f.pretrain, other, tiny(), quick(), MaskConfig{}), ConfigError);
}

TEST_CASE("finetuning freezes embeddings and refuses a foreign schema") {
  const auto& f = fixture();
  const auto pre = pretrain(f.pretrain, f.schema, tiny(), quick(2, 1), MaskConfig{0.3, 0.15, 2});
  auto t = quick(3, 2);
  t.mode = TrainMode::kFinetune;
  const auto ft = finetune(&pre.checkpoint, f.downstream, f.schema, tiny(), t);
  CHECK(ft.checkpoint.head == HeadKind::kClassifier);
  CHECK(ft.history.size() == 2);
  CHECK(ft.history[0].f1.has_value());
  std::size_t frozen = 0, moved = 0;
  for (const auto& [name, value] : ft.checkpoint.params) {
    if (name.rfind("embed.", 0) == 0 || name.rfind("time.", 0) == 0) {
      CHECK(value.values() == pre.checkpoint.params.at(name).values());
      ++frozen;
    } else if (name.rfind("block", 0) == 0 && pre.checkpoint.params.contains(name)) {
      moved += value.values() != pre.checkpoint.params.at(name).values();
    }
    CHECK(name.rfind("head.", 0) != 0);
  }
  CHECK(frozen > 0);
  CHECK(moved > 0);

  auto other = f.schema;
  other.fields[other.continuous_fields()[0]].mean += 1.0;
  CHECK_THROWS_AS(finetune(&pre.checkpoint, f.downstream, other, tiny(), t), ConfigError);
  CHECK_THROWS_AS(finetune(nullptr, f.downstream, f.schema, tiny(), t), ConfigError);
  CHECK_THROWS_AS(finetune(&pre.checkpoint, f.pretrain, f.schema, tiny(), t), ConfigError);

  t.mode = TrainMode::kScratch;
  const auto scratch = finetune(nullptr, f.downstream, f.schema, tiny(), t);
  CHECK(scratch.checkpoint.params.numel() == parameter_count(f.schema, tiny(), HeadKind::kClassifier));
  CHECK(scratch.history[0].loss != ft.history[0].loss);
}

TEST_CASE("evaluation helpers") {
  const auto& f = fixture();
  const auto pre = pretrain(f.pretrain, f.schema, tiny(), quick(2, 1), MaskConfig{0.3, 0.15, 2});
  const MaskConfig mask{0.3, 0.15, 99};
  const auto model = pre.checkpoint.model();
  const auto s1 = evaluate_mdm(model, f.pretrain, mask);
  const auto s2 = evaluate_mdm(model, f.pretrain, mask);
  const auto base = baseline_mdm(f.pretrain, majority_tokens(f.pretrain), mask);
  CHECK(s1.cat_correct == s2.cat_correct);
  CHECK(s1.cat_count == base.cat_count);
  CHECK(s1.cont_count == base.cont_count);
  CHECK(base.cat_accuracy() > 0.0);

  auto t = quick(0, 1);
  t.mode = TrainMode::kScratch;
  const auto cls = finetune(nullptr, f.downstream, f.schema, tiny(), t).checkpoint.model();
  const auto probs = predict_proba(cls, f.downstream);
  CHECK(probs.size() == f.downstream.size());
  for (float p : probs) CHECK((p > 0.0f && p < 1.0f));
  const auto r = evaluate_classifier(cls, f.downstream);
  CHECK(r.tp + r.fp + r.fn + r.tn == f.downstream.size());
}
