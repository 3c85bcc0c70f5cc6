#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "pvmc/manifest.hpp"

// End-to-end tests of the installed binary: grammar, exit codes, artifact
// layout, and idempotence of reruns.

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string cli = PVMC_CLI_PATH;

int run(const std::string& args) {
  const std::string cmd = cli + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pvmc_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  f << j.dump(2);
}

json tiny_dataset_config() {
  return json{{"phantom",
               {{"kind", "lesion"},
                {"width", 16},
                {"height", 16},
                {"base_activity", 5.0}}},
              {"system",
               {{"kernel", "delta"},
                {"lors_per_voxel", 1},
                {"correction_spread", 0.0}}},
              {"doses", {{"low", 1.0}, {"full", 100.0}}},
              {"pairs", {{"train", 5}, {"test", 2}}},
              {"seed", 3407}};
}

}  // namespace

TEST_CASE("grammar: bad subcommand and missing args exit with config code") {
  CHECK(run("frobnicate") == 2);
  CHECK(run("train") == 2);  // --config is required
}

TEST_CASE("gradcheck passes on a fresh build") {
  CHECK(run("gradcheck") == 0);
}

TEST_CASE("simulate is idempotent: identical output hashes across reruns") {
  const fs::path dir = fresh_dir("simulate");
  write_json(dir / "config.json", tiny_dataset_config());

  const std::string args = "simulate --config " + (dir / "config.json").string();
  CHECK(run(args + " --out " + (dir / "run1").string()) == 0);
  CHECK(run(args + " --out " + (dir / "run2").string()) == 0);

  const pvmc::RunManifest m1 = pvmc::read_manifest((dir / "run1").string());
  const pvmc::RunManifest m2 = pvmc::read_manifest((dir / "run2").string());
  CHECK(m1.outputs == m2.outputs);
  CHECK(!m1.outputs.empty());
  CHECK(fs::exists(dir / "run1" / "dataset.json"));
  // exactly one manifest per output directory
  CHECK(fs::exists(dir / "run1" / "manifest.json"));
  fs::remove_all(dir);
}

TEST_CASE("seed override changes the outputs") {
  const fs::path dir = fresh_dir("seed");
  write_json(dir / "config.json", tiny_dataset_config());
  const std::string args = "simulate --config " + (dir / "config.json").string();
  CHECK(run(args + " --out " + (dir / "a").string()) == 0);
  CHECK(run(args + " --seed 99 --out " + (dir / "b").string()) == 0);
  const pvmc::RunManifest ma = pvmc::read_manifest((dir / "a").string());
  const pvmc::RunManifest mb = pvmc::read_manifest((dir / "b").string());
  CHECK(ma.outputs != mb.outputs);
  fs::remove_all(dir);
}

TEST_CASE("config errors exit 2, I/O errors exit 1") {
  const fs::path dir = fresh_dir("errors");
  json bad = tiny_dataset_config();
  bad["phantom"]["width"] = 4;  // below the minimum
  write_json(dir / "bad.json", bad);
  CHECK(run("simulate --config " + (dir / "bad.json").string() + " --out " +
            (dir / "out").string()) == 2);

  json train_cfg{{"dataset", (dir / "missing_dataset").string()}};
  write_json(dir / "train.json", train_cfg);
  CHECK(run("train --config " + (dir / "train.json").string() + " --out " +
            (dir / "out2").string()) == 1);

  std::ofstream junk(dir / "junk.json");
  junk << "{not json";
  junk.close();
  CHECK(run("simulate --config " + (dir / "junk.json").string() + " --out " +
            (dir / "out3").string()) == 2);
  fs::remove_all(dir);
}

TEST_CASE("train then eval end to end on a tiny dataset") {
  const fs::path dir = fresh_dir("train_eval");
  write_json(dir / "sim.json", tiny_dataset_config());
  REQUIRE(run("simulate --config " + (dir / "sim.json").string() + " --out " +
              (dir / "data").string()) == 0);

  json tcfg{{"dataset", (dir / "data").string()},
            {"net", {{"depth", 2}, {"channels", {2, 4}}}},
            {"train",
             {{"epochs", 2},
              {"batch_size", 2},
              {"lambda_weight", 1e-3},
              {"patches", {{"sx", 8}, {"sy", 8}, {"count", 4}}}}}};
  write_json(dir / "train.json", tcfg);
  REQUIRE(run("train --config " + (dir / "train.json").string() + " --out " +
              (dir / "model").string()) == 0);
  CHECK(fs::exists(dir / "model" / "checkpoint_best" / "index.json"));
  CHECK(fs::exists(dir / "model" / "trainrun.json"));

  json ecfg{{"dataset", (dir / "data").string()},
            {"checkpoint", (dir / "model" / "checkpoint_best").string()},
            {"patches", {{"sx", 8}, {"sy", 8}}},
            {"patches_per_image", 40},
            {"bootstrap", 100},
            {"dump_images", true}};
  write_json(dir / "eval.json", ecfg);
  REQUIRE(run("eval --config " + (dir / "eval.json").string() + " --out " +
              (dir / "report").string()) == 0);
  CHECK(fs::exists(dir / "report" / "eval_report.json"));
  CHECK(fs::exists(dir / "report" / "pi_hist.csv"));
  CHECK(fs::exists(dir / "report" / "img_000_denoised.pgm"));

  std::ifstream f(dir / "report" / "eval_report.json");
  json rep;
  f >> rep;
  CHECK(rep.contains("quality"));
  CHECK(rep.contains("moments"));
  CHECK(rep.contains("bias"));
  fs::remove_all(dir);
}

TEST_CASE("calibrate-k and ablate emit their artifacts") {
  const fs::path dir = fresh_dir("calib");
  json sim = tiny_dataset_config();
  sim["pairs"]["train"] = 6;
  write_json(dir / "sim.json", sim);
  REQUIRE(run("simulate --config " + (dir / "sim.json").string() + " --out " +
              (dir / "data").string()) == 0);

  json ccfg{{"dataset", (dir / "data").string()},
            {"net", {{"depth", 2}, {"channels", {2, 4}}}},
            {"train",
             {{"epochs", 2},
              {"batch_size", 2},
              {"lambda_weight", 1e-3},
              {"val_fraction", 0.0},
              {"patches", {{"sx", 8}, {"sy", 8}, {"count", 4}}}}},
            {"splits", 3}};
  write_json(dir / "calib.json", ccfg);
  REQUIRE(run("calibrate-k --config " + (dir / "calib.json").string() +
              " --out " + (dir / "kout").string()) == 0);
  CHECK(fs::exists(dir / "kout" / "calibration.json"));
  CHECK(fs::exists(dir / "kout" / "k_trajectory.csv"));

  json acfg{{"dataset", (dir / "data").string()},
            {"net", {{"depth", 2}, {"channels", {2, 4}}}},
            {"train",
             {{"epochs", 1},
              {"batch_size", 2},
              {"patches", {{"sx", 8}, {"sy", 8}, {"count", 4}}}}},
            {"lambdas", {0.0, 1e-3}},
            {"patch_sizes", {8}}};
  write_json(dir / "ablate.json", acfg);
  REQUIRE(run("ablate --config " + (dir / "ablate.json").string() + " --out " +
              (dir / "aout").string()) == 0);
  CHECK(fs::exists(dir / "aout" / "ablation.csv"));
  fs::remove_all(dir);
}
