#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "doctest.h"
#include "trunet/checkpoint.hpp"
#include "trunet/error.hpp"
#include "trunet/experiment.hpp"
#include "trunet/metrics.hpp"
#include "trunet/svg_plot.hpp"

using namespace trunet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("trunet_experiment_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Drops the last CSV column (wall time) from every line.
std::string without_last_column(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + '\n';
  return out;
}

// Small but complete dataset: 32^3, 4 patients (2/1/1), 2 timepoints.
nlohmann::json small_options(const fs::path& dir) {
  return {{"out_dir", dir.string()}, {"patients", 4},       {"timepoints", 2},
          {"train_patients", 2},     {"val_patients", 1},   {"seed", 3}};
}

}  // namespace

TEST_CASE("experiment config round-trips through JSON") {
  auto c = ExperimentConfig::toy();
  c.seed = 9;
  c.out_dir = "elsewhere";
  c.localize.margin = 5;
  c.train.input_mode = InputMode::patches;
  c.phantom.contrast_levels = {1.0, 0.5};
  nlohmann::json j = c;
  ExperimentConfig back = ExperimentConfig::toy();
  from_json(j, back);
  CHECK(nlohmann::json(back) == j);
  CHECK(back.localize.margin == 5);
  CHECK(back.train.seed == 9);
  CHECK(back.phantom.seed == 9);
  CHECK(back.train.input_mode == InputMode::patches);
}

TEST_CASE("top-level seed and input_mode override nested values") {
  auto c = ExperimentConfig::toy();
  from_json(nlohmann::json{{"seed", 42}, {"input_mode", "patches"}, {"train", {{"seed", 1}, {"input_mode", "downsample"}}}},
            c);
  CHECK(c.seed == 42);
  CHECK(c.train.seed == 42);
  CHECK(c.phantom.seed == 42);
  CHECK(c.train.input_mode == InputMode::patches);

  auto nested = ExperimentConfig::toy();
  from_json(nlohmann::json{{"train", {{"seed", 7}}}}, nested);
  CHECK(nested.seed == 7);
  CHECK(nested.phantom.seed == 7);
}

TEST_CASE("experiment config rejects bad documents") {
  auto c = ExperimentConfig::toy();
  CHECK_THROWS_AS(from_json(nlohmann::json{{"epochs", 3}}, c), ConfigError);
  CHECK_THROWS_AS(from_json(nlohmann::json{{"localize", {{"margins", 3}}}}, c), ConfigError);
  CHECK_THROWS_AS(from_json(nlohmann::json::array(), c), ConfigError);

  auto bad = ExperimentConfig::toy();
  bad.train.target_extent = 48;
  bad.phantom.extent = 20;
  try {
    bad.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("target_extent") != std::string::npos);
    CHECK(msg.find("extent must be at least 32") != std::string::npos);
  }
  CHECK_NOTHROW(ExperimentConfig::toy().validate());
}

TEST_CASE("localize margin scales from 20 voxels at 224") {
  LocalizeSettings s;
  CHECK(s.effective_margin(224) == 20);
  CHECK(s.effective_margin(32) == 3);
  CHECK(s.effective_margin(112) == 10);
  s.margin = 20;
  CHECK(s.effective_margin(32) == 20);
}

TEST_CASE("toy defaults") {
  const auto c = ExperimentConfig::toy();
  CHECK(c.phantom.extent == 32);
  CHECK(c.phantom.train_patients == 8);
  CHECK(c.phantom.val_patients == 2);
  CHECK(c.phantom.num_patients - c.phantom.train_patients - c.phantom.val_patients == 2);
  CHECK(c.phantom.timepoints == 5);
  CHECK(c.model.patch_extent == 16);
  CHECK(c.model.vit.hidden == 64);
  CHECK(c.model.vit.heads == 4);
  CHECK(c.model.vit.layers == 2);
  CHECK(c.model.input_extent == c.train.target_extent);
}

TEST_CASE("svg plot has one polyline per non-empty series") {
  std::vector<PlotSeries> s{{"a", "red", {{1, 0.5}, {2, 0.7}, {3, 0.9}}},
                            {"b", "blue", {{1, 0.2}, {2, 0.8}}},
                            {"empty", "green", {}}};
  const auto svg = svg_line_plot(s, "t <&>", "epoch", "dss");
  CHECK(svg.rfind("<?xml", 0) == 0);
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
  const std::regex poly("<polyline[^>]*points=\"([^\"]*)\"");
  std::vector<std::string> points;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), poly); it != std::sregex_iterator(); ++it)
    points.push_back((*it)[1]);
  REQUIRE(points.size() == 2);
  CHECK(std::count(points[0].begin(), points[0].end(), ',') == 3);
  CHECK(std::count(points[1].begin(), points[1].end(), ',') == 2);
  CHECK(svg.find("t <&>") == std::string::npos);  // escaped
}

TEST_CASE("run_command validates before writing") {
  const auto dir = scratch("invalid");
  auto opts = small_options(dir);
  opts["extent"] = 20;
  CHECK_THROWS_AS(run_command("gen-data", opts), ConfigError);
  CHECK_FALSE(fs::exists(dir));
  CHECK_THROWS_AS(run_command("bogus", opts), UsageError);
  CHECK_THROWS_AS(run_command("gen-data", nlohmann::json::array()), UsageError);
  CHECK_THROWS_AS(run_command("train", {{"out_dir", dir.string()}, {"model", "localizer"}}), UsageError);
  CHECK_THROWS_AS(run_command("train", {{"out_dir", dir.string()}}), IoError);  // no dataset yet
  CHECK_FALSE(fs::exists(dir / "train"));
}

TEST_CASE("gen-data is deterministic per seed") {
  const auto a = scratch("gen_a"), b = scratch("gen_b"), c = scratch("gen_c");
  const auto ra = run_command("gen-data", small_options(a));
  run_command("gen-data", small_options(b));
  auto other = small_options(c);
  other["seed"] = 4;
  run_command("gen-data", other);
  CHECK(ra["files"] == 8);
  CHECK(ra["splits"]["train"]["patients"] == 2);
  CHECK(ra["splits"]["test"]["volumes"] == 2);
  for (const auto& entry : fs::directory_iterator(a / "data")) {
    const auto name = entry.path().filename();
    CHECK(slurp(entry.path()) == slurp(b / "data" / name));
    if (entry.path().extension() == ".vol") CHECK(slurp(entry.path()) != slurp(c / "data" / name));
  }
}

TEST_CASE("train writes artifacts deterministically and evaluate scores them") {
  const auto a = scratch("train_a"), b = scratch("train_b");
  for (const auto& dir : {a, b}) {
    run_command("gen-data", small_options(dir));
    auto opts = small_options(dir);
    opts["epochs"] = 2;
    const auto summary = run_command("train", opts);
    CHECK(summary["trace"]["epochs_run"] == 2);
    CHECK(summary["split_hash"].get<std::string>().size() == 16);
  }
  const auto ta = a / "train" / "trunet", tb = b / "train" / "trunet";
  for (const char* f : {"best.ckpt", "final.ckpt", "trace.csv", "summary.json"}) CHECK(fs::exists(ta / f));
  CHECK(without_last_column(slurp(ta / "trace.csv")) == without_last_column(slurp(tb / "trace.csv")));
  CHECK(slurp(ta / "final.ckpt") == slurp(tb / "final.ckpt"));
  CHECK(slurp(ta / "best.ckpt") == slurp(tb / "best.ckpt"));

  const auto best = load_checkpoint((ta / "best.ckpt").string());
  CHECK(best.extra["input_mode"] == "downsample");
  CHECK(best.extra["epoch"].get<int64_t>() >= 1);

  auto opts = small_options(a);
  opts["checkpoint"] = (ta / "best.ckpt").string();
  opts["cluster_removal"] = true;
  const auto ev = run_command("evaluate", opts);
  CHECK(ev["volumes"] == 2);
  CHECK(ev["split"] == "test");
  CHECK(std::isfinite(ev["macro_dss"].get<double>()));
  CHECK(ev.contains("cluster_removal"));
  CHECK(ev["cluster_removal"]["pv_components"].get<int64_t>() <= ev["pv_components"].get<int64_t>());
  CHECK(fs::exists(a / "evaluate" / "test" / "metrics.csv"));
  CHECK(fs::exists(a / "evaluate" / "test" / "metrics_cluster_removal.json"));

  // the JSON report carries the same macro value as the summary
  const auto report = nlohmann::json::parse(slurp(a / "evaluate" / "test" / "metrics.json"));
  CHECK(report["macro_dss"].get<double>() == doctest::Approx(ev["macro_dss"].get<double>()).epsilon(1e-12));

  opts.erase("cluster_removal");
  opts["split"] = "train";
  CHECK_NOTHROW(run_command("evaluate", opts));
  opts.erase("checkpoint");
  CHECK_THROWS_AS(run_command("evaluate", opts), UsageError);
}

TEST_CASE("evaluate rejects empty splits and extent mismatches") {
  const auto dir = scratch("eval_errors");
  auto opts = small_options(dir);
  opts["patients"] = 3;  // 2 train, 1 val, no test
  run_command("gen-data", opts);
  const auto ckpt = (dir / "m.ckpt").string();
  save_checkpoint(Model<float>(ModelConfig::toy(), 1), ckpt);
  opts["checkpoint"] = ckpt;
  CHECK_THROWS_AS(run_command("evaluate", opts), UsageError);
  opts["split"] = "val";
  CHECK_NOTHROW(run_command("evaluate", opts));

  auto wide = ModelConfig::toy();
  wide.input_extent = 48;
  wide.vit.tokens = wide.token_count();
  save_checkpoint(Model<float>(wide, 1), ckpt);
  CHECK_THROWS_AS(run_command("evaluate", opts), ConfigError);
}

TEST_CASE("localize with margin 0 writes the predicted tight unions") {
  const auto dir = scratch("localize");
  auto opts = small_options(dir);
  run_command("gen-data", opts);
  opts["epochs"] = 3;
  opts["margin"] = 0;
  const auto result = run_command("localize", opts);
  CHECK(result["margin"] == 0);
  CHECK(result["patients"] == 4);
  const auto boxes = nlohmann::json::parse(slurp(dir / "localize" / "boxes.json"));
  CHECK(boxes["margin"] == 0);
  for (const auto& p : boxes["patients"]) CHECK(p["box"] == p["tight"]);
  CHECK(fs::exists(dir / "localize" / "localizer.ckpt"));
  CHECK(fs::exists(dir / "localize" / "trace.csv"));

  // a recorded margin is written verbatim and widens every box
  opts["margin"] = 20;
  run_command("localize", opts);
  const auto wide = nlohmann::json::parse(slurp(dir / "localize" / "boxes.json"));
  CHECK(wide["margin"] == 20);
  for (const auto& p : wide["patients"]) {
    const auto box = box_from_json(p["box"]), tight = box_from_json(p["tight"]);
    CHECK(box.contains(tight));
    for (int a = 0; a < 3; ++a) {
      CHECK(box.lo[a] == std::max<int64_t>(0, tight.lo[a] - 20));
      CHECK(box.hi[a] == std::min<int64_t>(31, tight.hi[a] + 20));
    }
  }
}

TEST_CASE("gradcheck command reports every op") {
  const auto one = run_command("gradcheck", {{"op", "relu"}});
  REQUIRE(one["rows"].size() == 1);
  CHECK(one["rows"][0]["name"] == "relu");
  CHECK(one["all_pass"] == true);
  CHECK_THROWS_AS(run_command("gradcheck", {{"op", "nope"}}), UsageError);
}
