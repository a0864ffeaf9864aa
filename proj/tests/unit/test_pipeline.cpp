#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tabaconv/error.hpp"
#include "tabaconv/pipeline.hpp"

using namespace tabaconv;
namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "tabaconv_test_pipeline";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI with stdout and stderr captured.
Run cli(const std::string& args) {
  const char* exe = std::getenv("TABACONV_CLI");
  REQUIRE_MESSAGE(exe != nullptr, "TABACONV_CLI is not set");
  const auto log = work() / "last.log";
  const std::string cmd = std::string("\"") + exe + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(log);
  return r;
}

std::string p(const fs::path& path) { return "\"" + path.string() + "\""; }

const std::string kTiny = " --d-model 16 --heads 2 --ffn-mult 2 --batch-size 16";

// gen 20×100 once for the stage tests.
const fs::path& data() {
  static const fs::path d = [] {
    const auto out = work() / "data";
    const auto r = cli("gen --users 20 --rows 100 --seed 7 --out " + p(out));
    REQUIRE(r.code == 0);
    return out;
  }();
  return d;
}

}  // namespace

TEST_CASE("help exits 0 and documents the flags") {
  auto r = cli("--help");
  CHECK(r.code == 0);
  for (const char* cmd : {"gen", "pretrain", "finetune", "evaluate", "gradcheck"}) CHECK(r.out.find(cmd) != std::string::npos);
  r = cli("gen --help");
  CHECK(r.code == 0);
  for (const char* f : {"--users", "--rows", "--fraud-rate", "--label-noise", "--seed", "--out"})
    CHECK(r.out.find(f) != std::string::npos);
  r = cli("pretrain --help");
  CHECK(r.code == 0);
  for (const char* f : {"--data", "--epochs", "--out", "--p-field", "--p-row", "--window", "--stride", "--d-model"})
    CHECK(r.out.find(f) != std::string::npos);
  r = cli("finetune --help");
  CHECK(r.code == 0);
  for (const char* f : {"--ckpt", "--data", "--mode", "--window", "--stride"}) CHECK(r.out.find(f) != std::string::npos);
  r = cli("evaluate --help");
  CHECK(r.code == 0);
  CHECK(r.out.find("--threshold") != std::string::npos);
  r = cli("gradcheck --help");
  CHECK(r.code == 0);
  CHECK(r.out.find("--tol") != std::string::npos);
}

TEST_CASE("usage errors exit 2") {
  CHECK(cli("").code == 2);
  CHECK(cli("frobnicate").code == 2);
  CHECK(cli("gen").code == 2);
  CHECK(cli("gen --users many --out " + p(work() / "x")).code == 2);
}

TEST_CASE("gen writes the dataset deterministically") {
  const auto& d = data();
  for (const char* f : {"transactions.csv", "train.csv", "val.csv", "test.csv", "manifest.json", "roles.json", "config.toml"})
    CHECK(fs::exists(d / f));
  const auto again = work() / "data_again";
  REQUIRE(cli("gen --users 20 --rows 100 --seed 7 --out " + p(again)).code == 0);
  for (const char* f : {"transactions.csv", "train.csv", "test.csv", "manifest.json"})
    CHECK(slurp(d / f) == slurp(again / f));
  CHECK(cli("gen --fraud-rate 1.5 --out " + p(work() / "bad")).code == 2);
  CHECK(cli("gen --fraud-rate 0.9 --out " + p(work() / "bad")).code == 2);
}

TEST_CASE("pretrain, finetune and evaluate") {
  const auto& d = data();
  const auto pre = work() / "p1";
  auto r = cli("pretrain --data " + p(d / "train.csv") + " --epochs 1 --out " + p(pre) + kTiny);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(pre / "ckpt"));
  CHECK(fs::exists(pre / "schema.json"));
  CHECK(fs::exists(pre / "config.toml"));
  CHECK(slurp(pre / "metrics.jsonl").find("masked_cat_acc") != std::string::npos);
  CHECK(slurp(pre / "config.toml").find("p-field") != std::string::npos);

  CHECK(cli("pretrain --data " + p(d / "train.csv") + " --p-field 0 --p-row 0 --out " + p(work() / "p0")).code == 2);

  const auto ft = work() / "f1";
  r = cli("finetune --ckpt " + p(pre / "ckpt") + " --data " + p(d / "train.csv") + " --mode finetune --epochs 1 --out " +
          p(ft) + " --batch-size 16");
  REQUIRE(r.code == 0);
  const auto sc = work() / "s1";
  r = cli("finetune --data " + p(d / "train.csv") + " --mode scratch --epochs 1 --out " + p(sc) + kTiny);
  REQUIRE(r.code == 0);

  r = cli("evaluate --ckpt " + p(ft / "ckpt") + " --data " + p(d / "test.csv"));
  CHECK(r.code == 0);
  CHECK(r.out.rfind("F1 ", 0) == 0);
  CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 1);
  CHECK(slurp(ft / "metrics.jsonl").find("\"evaluate\"") != std::string::npos);
  CHECK(cli("evaluate --ckpt " + p(ft / "ckpt") + " --data " + p(d / "test.csv") + " --schema " + p(ft / "schema.json"))
            .code == 0);

  // A pretrained checkpoint has no classifier; a classifier cannot be finetuned again.
  CHECK(cli("evaluate --ckpt " + p(pre / "ckpt") + " --data " + p(d / "test.csv")).code == 2);
  CHECK(cli("finetune --ckpt " + p(ft / "ckpt") + " --data " + p(d / "train.csv") + " --out " + p(work() / "f2")).code ==
        2);
  CHECK(cli("finetune --data " + p(d / "train.csv") + " --mode finetune --out " + p(work() / "f3")).code == 2);

  SUBCASE("schema digest mismatch") {
    const auto other = work() / "other";
    REQUIRE(cli("gen --users 20 --rows 100 --seed 8 --out " + p(other)).code == 0);
    CHECK(cli("finetune --ckpt " + p(pre / "ckpt") + " --data " + p(other / "train.csv") + " --out " + p(work() / "f4"))
              .code == 2);
    CHECK(cli("evaluate --ckpt " + p(ft / "ckpt") + " --data " + p(other / "test.csv") + " --schema " +
              p(work() / "f4" / "schema.json"))
              .code == 2);
  }
  SUBCASE("missing and corrupt inputs") {
    CHECK(cli("pretrain --data " + p(work() / "nope.csv") + " --out " + p(work() / "p9")).code == 2);
    std::ofstream(work() / "junk.ckpt") << "not a checkpoint";
    CHECK(cli("evaluate --ckpt " + p(work() / "junk.ckpt") + " --data " + p(d / "test.csv")).code == 2);
  }
}

TEST_CASE("non-finite training exits 3") {
  const auto& d = data();
  const auto r =
      cli("pretrain --data " + p(d / "train.csv") + " --epochs 3 --lr 1e38 --clip-norm 0 --out " + p(work() / "nan") + kTiny);
  CHECK(r.code == 3);
  CHECK(r.out.find("numeric error") != std::string::npos);
}

TEST_CASE("config file with flag overrides") {
  const auto& d = data();
  const auto cfg = work() / "run.toml";
  std::ofstream(cfg) << "[pretrain]\nepochs = 2\nd-model = 16\nheads = 2\nffn-mult = 2\nbatch-size = 16\n";
  const auto out = work() / "pc";
  auto r = cli("--config " + p(cfg) + " pretrain --data " + p(d / "train.csv") + " --out " + p(out));
  REQUIRE(r.code == 0);
  CHECK(std::count(r.out.begin(), r.out.end(), '{') == 2);
  r = cli("--config " + p(cfg) + " pretrain --epochs 1 --data " + p(d / "train.csv") + " --out " + p(out));
  REQUIRE(r.code == 0);
  CHECK(std::count(r.out.begin(), r.out.end(), '{') == 1);
  CHECK(slurp(out / "config.toml").find("epochs=1") != std::string::npos);
}

TEST_CASE("gradcheck exit codes") {
  auto r = cli("gradcheck");
  CHECK(r.code == 0);
  CHECK(r.out.rfind("PASS", 0) == 0);
  CHECK(cli("gradcheck --seed 1").code == 0);
  CHECK(cli("gradcheck --seed 2").code == 0);
  r = cli("gradcheck --tol 1e-12");
  CHECK(r.code == 1);
  CHECK(r.out.rfind("FAIL", 0) == 0);
}

TEST_CASE("library stages") {
  const auto& d = data();
  CHECK_THROWS_AS(resolve_roles(work() / "elsewhere" / "x.csv", std::nullopt), ConfigError);
  CHECK(resolve_roles(d / "train.csv", std::nullopt).label_column == std::optional<std::string>("is_fraud"));
  const auto ds = load_dataset(d / "train.csv", synth_roles(), 10, 5, WindowMode::kPretrain);
  // 16 training users × 100 rows, W=10, S=5.
  CHECK(ds.windows.size() == 16 * window_count(100, 10, 5));
  for (const auto& w : ds.windows) CHECK(!w.label.has_value());
  const auto down = load_dataset(d / "test.csv", ds.schema, 10, 10, WindowMode::kDownstream);
  CHECK(down.windows.size() == 2 * 10);
  for (const auto& w : down.windows) CHECK(w.label.has_value());
}
