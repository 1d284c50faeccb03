#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kTiny = std::string(DCAR_TEST_DATA_DIR) + "/tiny.json";

int run_cli(std::vector<std::string> args, const std::string& config = kTiny) {
  std::vector<std::string> full = {"--log-level", "warn"};
  if (!config.empty()) {
    full.push_back("--config");
    full.push_back(config);
  }
  full.insert(full.end(), args.begin(), args.end());
  return dcar::cli::run(full);
}

std::string bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  return json::parse(is);
}

// One tokenizer and one generator shared by the sampling tests.
struct Trained {
  fs::path dir;
  fs::path tokenizer;
  fs::path generator;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained r;
    r.dir = dcar::test::scratch_dir("cli_trained");
    REQUIRE(run_cli({"train-tokenizer", "--out", r.dir.string()}) == 0);
    r.tokenizer = r.dir / "tokenizer.ckpt";
    REQUIRE(run_cli({"train-generator", "--tokenizer", r.tokenizer.string(), "--out", r.dir.string()}) == 0);
    r.generator = r.dir / "generator_32.ckpt";
    return r;
  }();
  return t;
}

}  // namespace

TEST_CASE("usage errors exit with the configuration code") {
  CHECK(run_cli({}) == dcar::cli::kExitConfig);
  CHECK(run_cli({"--help"}, "") == dcar::cli::kExitOk);
  CHECK(run_cli({"frobnicate"}) == dcar::cli::kExitConfig);
  CHECK(run_cli({"sample", "--bogus"}) == dcar::cli::kExitConfig);
  CHECK(run_cli({"profile", "--stub"}, "/nonexistent/config.json") == dcar::cli::kExitConfig);
  CHECK(run_cli({"--set", "sampler.stepz=3", "profile", "--stub"}) == dcar::cli::kExitConfig);
  CHECK(run_cli({"--set", "generator.vocab=33", "profile", "--stub"}) == dcar::cli::kExitConfig);
  CHECK(run_cli({"--log-level", "loud", "profile", "--stub"}) == dcar::cli::kExitConfig);
  CHECK(run_cli({"profile"}) == dcar::cli::kExitConfig);
  CHECK(run_cli({"profile", "--stub", "--runs", "4"}) == dcar::cli::kExitConfig);
}

TEST_CASE("a later stage without its predecessor is a configuration error") {
  auto dir = dcar::test::scratch_dir("cli_stage");
  CHECK(run_cli({"train-tokenizer", "--stage", "3", "--out", dir.string()}) == dcar::cli::kExitConfig);
  CHECK(run_cli({"train-tokenizer", "--stage", "2", "--out", dir.string()}) == dcar::cli::kExitConfig);
  CHECK(run_cli({"train-tokenizer", "--stage", "4", "--out", dir.string()}) == dcar::cli::kExitConfig);
  CHECK(run_cli({"train-tokenizer", "--strategy", "no-warmup", "--stage", "1", "--out", dir.string()}) ==
        dcar::cli::kExitConfig);
  CHECK_FALSE(fs::exists(dir / "tokenizer_stage3.ckpt"));
}

TEST_CASE("stage-by-stage training equals a single run") {
  auto all = dcar::test::scratch_dir("cli_all");
  auto staged = dcar::test::scratch_dir("cli_staged");
  REQUIRE(run_cli({"train-tokenizer", "--out", all.string()}) == 0);
  for (auto s : {"1", "2", "3"}) REQUIRE(run_cli({"train-tokenizer", "--stage", s, "--out", staged.string()}) == 0);
  for (auto name : {"tokenizer_stage1.ckpt", "tokenizer_stage2.ckpt", "tokenizer_stage3.ckpt", "tokenizer.ckpt"}) {
    REQUIRE_MESSAGE(fs::exists(all / name), name);
    CHECK_MESSAGE(bytes(all / name) == bytes(staged / name), name);
  }
  // a checkpoint from another strategy is refused
  auto other = dcar::test::scratch_dir("cli_other");
  fs::copy_file(all / "tokenizer_stage2.ckpt", other / "tokenizer_stage2.ckpt");
  CHECK(run_cli({"train-tokenizer", "--strategy", "no-warmup", "--stage", "3", "--out", other.string()}) ==
        dcar::cli::kExitConfig);
}

TEST_CASE("unreadable checkpoints") {
  auto dir = dcar::test::scratch_dir("cli_corrupt");
  const auto& t = trained();
  {
    const auto whole = bytes(t.tokenizer);
    std::ofstream f(dir / "truncated.ckpt", std::ios::binary);
    f << whole.substr(0, whole.size() / 2);
  }
  CHECK(run_cli({"evaluate", "--tokenizer", (dir / "truncated.ckpt").string()}) == dcar::cli::kExitRuntime);
  CHECK(run_cli({"evaluate", "--tokenizer", (dir / "missing.ckpt").string()}) == dcar::cli::kExitConfig);
  // a generator checkpoint is not a tokenizer
  CHECK(run_cli({"evaluate", "--tokenizer", t.generator.string()}) != dcar::cli::kExitOk);
  CHECK(run_cli({"train-generator", "--tokenizer", t.tokenizer.string(), "--init", "from_lowres", "--out",
              dir.string()}) == dcar::cli::kExitConfig);
}

TEST_CASE("sample writes images and a manifest") {
  const auto& t = trained();
  auto out = dcar::test::scratch_dir("cli_sample");
  REQUIRE(run_cli({"--seed", "9", "sample", "--tokenizer", t.tokenizer.string(), "--generator", t.generator.string(),
                "--num", "5", "--batch", "2", "--classes", "3,7", "--out", out.string()}) == 0);
  auto m = read_json(out / "manifest.json");
  CHECK(m["seed"] == 9);
  CHECK(m["config_hash"].get<std::string>().size() == 16);
  REQUIRE(m["images"].size() == 5);
  for (size_t i = 0; i < 5; ++i) {
    const auto& row = m["images"][i];
    CHECK(fs::exists(out / row["file"].get<std::string>()));
    CHECK(row["condition"]["class_label"] == (i % 2 == 0 ? 3 : 7));
  }

  CHECK(run_cli({"sample", "--tokenizer", t.tokenizer.string(), "--generator", t.generator.string(), "--steps", "40",
              "--out", out.string()}) == dcar::cli::kExitConfig);
  CHECK(run_cli({"sample", "--tokenizer", t.tokenizer.string(), "--generator", t.generator.string(),
              "--temperature", "-1", "--out", out.string()}) == dcar::cli::kExitConfig);
}

TEST_CASE("sweep, evaluate and profile reports") {
  const auto& t = trained();
  auto out = dcar::test::scratch_dir("cli_reports");
  REQUIRE(run_cli({"sample", "--tokenizer", t.tokenizer.string(), "--generator", t.generator.string(), "--num", "4",
                "--reference", "8", "--sweep", "2,4", "--out", out.string()}) == 0);
  auto sweep = read_json(out / "sweep.json");
  REQUIRE(sweep["sweep"].size() == 2);
  CHECK(sweep["sweep"][1]["steps"] == 4);

  REQUIRE(run_cli({"evaluate", "--tokenizer", t.tokenizer.string(), "--generator", t.generator.string(), "--images",
                "8", "--samples", "4", "--report", (out / "eval.json").string()}) == 0);
  auto ev = read_json(out / "eval.json");
  for (auto row : {"recon continuous", "recon discrete", "generate hybrid", "generate discrete-only"}) {
    CHECK_MESSAGE(ev.contains(row), row);
  }
  CHECK(ev["recon continuous"].contains("psnr"));
  CHECK(ev["generate hybrid"].contains("fid_proxy"));

  REQUIRE(run_cli({"--seed", "4", "profile", "--tokenizer", t.tokenizer.string(), "--generator",
                t.generator.string(), "--steps", "2", "--report", (out / "profile.json").string()}) == 0);
  auto pf = read_json(out / "profile.json");
  for (auto key : {"latency_s", "throughput_ips", "warmup_runs", "timed_runs", "complete", "note", "seed"}) {
    CHECK_MESSAGE(pf.contains(key), key);
  }
  CHECK(pf["seed"] == 4);
  CHECK(pf["complete"] == true);

  REQUIRE(run_cli({"profile", "--stub", "--report", (out / "stub.json").string()}) == 0);
  CHECK(read_json(out / "stub.json")["timed_runs"] == 5);
}

TEST_CASE("high-resolution fine-tuning from a low-resolution generator") {
  const auto& t = trained();
  auto out = dcar::test::scratch_dir("cli_highres");
  REQUIRE(run_cli({"train-generator", "--tokenizer", t.tokenizer.string(), "--init", "from_lowres", "--lowres",
                t.generator.string(), "--out", out.string()}) == 0);
  REQUIRE(fs::exists(out / "generator_64.ckpt"));
  std::ifstream log(out / "generator_64_loss.jsonl");
  std::string line;
  int rows = 0;
  while (std::getline(log, line)) ++rows;
  CHECK(rows == 4);
  auto samples = dcar::test::scratch_dir("cli_highres_samples");
  REQUIRE(run_cli({"sample", "--tokenizer", t.tokenizer.string(), "--generator", (out / "generator_64.ckpt").string(),
                "--num", "2", "--steps", "6", "--out", samples.string()}) == 0);
}

TEST_CASE("ablation table") {
  auto out = dcar::test::scratch_dir("cli_ablate");
  REQUIRE(run_cli({"ablate", "--out", out.string()}) == 0);
  auto ab = read_json(out / "ablation.json");
  REQUIRE(ab["rows"].size() == 3);
  CHECK(ab["rows"][0]["strategy"] == "three-stage");
  CHECK(ab["rows"][0].contains("stage2_discrete_mse"));
  CHECK_FALSE(ab["rows"][2].contains("stage2_discrete_mse"));
  CHECK(run_cli({"ablate", "--strategies", "three-stage,sideways", "--out", out.string()}) == dcar::cli::kExitConfig);
}
