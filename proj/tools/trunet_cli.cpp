// trunet command-line harness. Every command goes through the C API in
// libtrunet; this file only parses flags and formats the results.

#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "trunet/trunet.h"

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

int exit_code(trunet_status status) {
  switch (status) {
    case TRUNET_OK: return kExitOk;
    case TRUNET_ERR_CONFIG:
    case TRUNET_ERR_USAGE: return kExitValidation;
    default: return kExitRuntime;
  }
}

void print_gradcheck(const json& result) {
  std::printf("%-20s %-10s %14s %14s %8s %s\n", "op", "kind", "max_rel_err", "max_abs_err", "checked", "result");
  for (const auto& r : result.at("rows")) {
    std::printf("%-20s %-10s %14.3e %14.3e %8lld %s\n", r.at("name").get<std::string>().c_str(),
                r.at("kind").get<std::string>().c_str(), r.at("max_rel_err").get<double>(),
                r.at("max_abs_err").get<double>(), static_cast<long long>(r.at("checked").get<int64_t>()),
                r.at("pass").get<bool>() ? "PASS" : "FAIL");
  }
  std::printf("%s\n", result.at("all_pass").get<bool>() ? "all gradient checks passed" : "gradient checks FAILED");
}

void print_gen_data(const json& result) {
  std::printf("wrote %lld volumes to %s\n", static_cast<long long>(result.at("files").get<int64_t>()),
              result.at("directory").get<std::string>().c_str());
  for (const char* split : {"train", "val", "test"}) {
    const auto& s = result.at("splits").at(split);
    std::printf("  %-5s %3lld patients %4lld volumes\n", split, static_cast<long long>(s.at("patients").get<int64_t>()),
                static_cast<long long>(s.at("volumes").get<int64_t>()));
  }
  std::printf("split hash %s\n", result.at("split_hash").get<std::string>().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TRUNet and residual U-Net segmentation on synthetic cardiac phantoms"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  json opts = json::object();
  std::string config, out_dir, data_dir;
  uint64_t seed = 0;
  bool verbose = false, as_json = false;
  auto* config_opt = app.add_option("--config", config, "experiment config JSON")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "seed for data, initialization and augmentation");
  auto* out_opt = app.add_option("--out-dir", out_dir, "output root (default runs)");
  auto* data_opt = app.add_option("--data-dir", data_dir, "dataset directory (default <out-dir>/data)");
  app.add_flag("-v,--verbose", verbose, "per-epoch progress on stderr");
  app.add_flag("--json", as_json, "print the full result document");

  int64_t patients = 0, timepoints = 0, extent = 0, train_patients = 0, val_patients = 0;
  auto* gen = app.add_subcommand("gen-data", "generate the phantom dataset and manifest");
  auto* patients_opt = gen->add_option("--patients", patients, "number of patients");
  auto* timepoints_opt = gen->add_option("--timepoints", timepoints, "timepoints per cardiac cycle");
  auto* extent_opt = gen->add_option("--extent", extent, "cubic volume extent in voxels");
  auto* train_opt = gen->add_option("--train-patients", train_patients, "patients in the training split");
  auto* val_opt = gen->add_option("--val-patients", val_patients, "patients in the validation split");

  int64_t margin = 0, epochs = 0;
  auto* loc = app.add_subcommand("localize", "train the localizer and write per-patient crop boxes");
  auto* margin_opt = loc->add_option("--margin", margin, "box margin in voxels")->check(CLI::NonNegativeNumber);
  auto* loc_epochs_opt = loc->add_option("--epochs", epochs, "localizer epochs");

  std::string model = "trunet", input_mode, boxes;
  auto* train = app.add_subcommand("train", "train one model");
  train->add_option("--model", model, "trunet or res_unet")->check(CLI::IsMember({"trunet", "res_unet"}));
  auto* mode_opt = train->add_option("--input-mode", input_mode, "downsample, patches or crop_then_downsample")
                       ->check(CLI::IsMember({"downsample", "patches", "crop_then_downsample"}));
  auto* train_epochs_opt = train->add_option("--epochs", epochs, "training epochs");
  auto* boxes_opt = train->add_option("--boxes", boxes, "boxes.json from localize");

  std::string checkpoint, split = "test";
  bool cluster_removal = false;
  auto* eval = app.add_subcommand("evaluate", "score a checkpoint on one split");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_flag("--cluster-removal", cluster_removal, "also report metrics after cluster removal");
  auto* eval_boxes_opt = eval->add_option("--boxes", boxes, "boxes.json for crop checkpoints");

  std::string op;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of every primitive and block");
  auto* op_opt = grad->add_option("--op", op, "restrict to one op");

  auto* compare = app.add_subcommand("compare", "train TRUNet and res_unet under one budget and compare");
  auto* cmp_epochs_opt = compare->add_option("--epochs", epochs, "epochs per model");
  auto* cmp_mode_opt = compare->add_option("--input-mode", input_mode, "input mode for both models")
                           ->check(CLI::IsMember({"downsample", "patches", "crop_then_downsample"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  if (*config_opt) opts["config"] = config;
  if (*seed_opt) opts["seed"] = seed;
  if (*out_opt) opts["out_dir"] = out_dir;
  if (*data_opt) opts["data_dir"] = data_dir;
  opts["verbose"] = verbose;

  std::string command;
  if (*gen) {
    command = "gen-data";
    if (*patients_opt) opts["patients"] = patients;
    if (*timepoints_opt) opts["timepoints"] = timepoints;
    if (*extent_opt) opts["extent"] = extent;
    if (*train_opt) opts["train_patients"] = train_patients;
    if (*val_opt) opts["val_patients"] = val_patients;
  } else if (*loc) {
    command = "localize";
    if (*margin_opt) opts["margin"] = margin;
    if (*loc_epochs_opt) opts["epochs"] = epochs;
  } else if (*train) {
    command = "train";
    opts["model"] = model;
    if (*mode_opt) opts["input_mode"] = input_mode;
    if (*train_epochs_opt) opts["epochs"] = epochs;
    if (*boxes_opt) opts["boxes"] = boxes;
  } else if (*eval) {
    command = "evaluate";
    opts["checkpoint"] = checkpoint;
    opts["split"] = split;
    opts["cluster_removal"] = cluster_removal;
    if (*eval_boxes_opt) opts["boxes"] = boxes;
  } else if (*grad) {
    command = "gradcheck";
    if (*op_opt) opts["op"] = op;
  } else {
    command = "compare";
    if (*cmp_epochs_opt) opts["epochs"] = epochs;
    if (*cmp_mode_opt) opts["input_mode"] = input_mode;
  }

  char* out = nullptr;
  const trunet_status status = trunet_run_command(command.c_str(), opts.dump().c_str(), &out);
  if (status != TRUNET_OK) {
    std::fprintf(stderr, "trunet %s: %s error: %s\n", command.c_str(), trunet_status_name(status), trunet_last_error());
    return exit_code(status);
  }
  const json result = json::parse(out);
  trunet_string_free(out);

  if (as_json) {
    std::cout << result.dump(2) << '\n';
  } else if (command == "gradcheck") {
    print_gradcheck(result);
  } else if (command == "gen-data") {
    print_gen_data(result);
  } else {
    json shown = result;
    shown.erase("config");
    if (shown.contains("rows"))
      for (auto& r : shown["rows"]) r.erase("test_report");
    std::cout << shown.dump(2) << '\n';
  }
  if (command == "gradcheck" && !result.at("all_pass").get<bool>()) return kExitRuntime;
  return kExitOk;
}
