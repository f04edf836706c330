#include "trunet/experiment.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "trunet/checkpoint.hpp"
#include "trunet/error.hpp"
#include "trunet/gradcheck_suite.hpp"
#include "trunet/metrics.hpp"
#include "trunet/svg_plot.hpp"

namespace trunet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// configuration

int64_t LocalizeSettings::effective_margin(int64_t extent) const {
  if (margin) return *margin;
  return std::llround(20.0 * static_cast<double>(extent) / 224.0);
}

ExperimentConfig ExperimentConfig::toy() {
  ExperimentConfig c;
  c.model = ModelConfig::toy();
  c.train.epochs = 20;
  c.train.target_extent = c.model.input_extent;
  c.phantom.extent = 32;
  c.phantom.num_patients = 12;
  c.phantom.timepoints = 5;
  c.phantom.train_patients = 8;
  c.phantom.val_patients = 2;
  return c;
}

std::string ExperimentConfig::dataset_dir() const {
  return data_dir.empty() ? (fs::path(out_dir) / "data").string() : data_dir;
}

std::string ExperimentConfig::boxes_file() const {
  return boxes_path.empty() ? (fs::path(out_dir) / "localize" / "boxes.json").string() : boxes_path;
}

ModelConfig ExperimentConfig::model_for(ModelKind kind) const {
  ModelConfig m = model;
  m.kind = kind;
  if (kind == ModelKind::localizer) {
    m.num_classes = 2;
    m.unet_channels = localize.unet_channels;
  }
  m.vit.tokens = m.token_count();
  return m;
}

void ExperimentConfig::validate() const {
  std::vector<std::string> problems;
  auto collect = [&](const std::function<void()>& check) {
    try {
      check();
    } catch (const ConfigError& e) {
      problems.emplace_back(e.what());
    }
  };
  collect([&] { model_for(ModelKind::trunet).validate(); });
  collect([&] { model_for(ModelKind::res_unet).validate(); });
  collect([&] { model_for(ModelKind::localizer).validate(); });
  collect([&] { train.validate(); });
  collect([&] { phantom.validate(); });
  if (model.input_extent != train.target_extent) {
    problems.push_back("model.input_extent (" + std::to_string(model.input_extent) + ") must equal train.target_extent (" +
                       std::to_string(train.target_extent) + ")");
  }
  if (localize.margin && *localize.margin < 0) problems.push_back("localize.margin must be non-negative");
  if (localize.epochs < 0) problems.push_back("localize.epochs must be non-negative");
  if (!(localize.base_lr > 0.0)) problems.push_back("localize.base_lr must be positive");
  if (out_dir.empty()) problems.push_back("out_dir must not be empty");
  if (problems.empty()) return;
  std::string msg = "invalid experiment config:";
  for (const auto& p : problems) msg += "\n  " + p;
  throw ConfigError(msg);
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json loc{{"epochs", c.localize.epochs}, {"base_lr", c.localize.base_lr}, {"unet_channels", c.localize.unet_channels}};
  loc["margin"] = c.localize.margin ? nlohmann::json(*c.localize.margin) : nlohmann::json(nullptr);
  j = nlohmann::json{{"seed", c.seed},
                     {"out_dir", c.out_dir},
                     {"data_dir", c.data_dir},
                     {"boxes_path", c.boxes_path},
                     {"input_mode", to_string(c.train.input_mode)},
                     {"model", c.model},
                     {"train", c.train},
                     {"phantom", c.phantom},
                     {"localize", loc}};
  // One seed drives everything; the nested copies always mirror it.
  j["train"]["seed"] = c.seed;
  j["phantom"]["seed"] = c.seed;
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  static const std::vector<std::string> known = {"seed",  "out_dir", "data_dir", "boxes_path", "input_mode",
                                                 "model", "train",   "phantom",  "localize"};
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) {
      throw ConfigError("unknown key '" + item.key() + "' in experiment config");
    }
  }
  try {
    c.out_dir = j.value("out_dir", c.out_dir);
    c.data_dir = j.value("data_dir", c.data_dir);
    c.boxes_path = j.value("boxes_path", c.boxes_path);
    if (j.contains("model")) from_json(j.at("model"), c.model);
    if (j.contains("train")) from_json(j.at("train"), c.train);
    if (j.contains("phantom")) from_json(j.at("phantom"), c.phantom);
    if (j.contains("localize")) {
      const auto& l = j.at("localize");
      for (const auto& item : l.items()) {
        if (item.key() != "margin" && item.key() != "epochs" && item.key() != "base_lr" && item.key() != "unet_channels") {
          throw ConfigError("unknown key '" + item.key() + "' in localize settings");
        }
      }
      if (l.contains("margin")) {
        c.localize.margin = l.at("margin").is_null() ? std::nullopt : std::optional<int64_t>(l.at("margin").get<int64_t>());
      }
      c.localize.epochs = l.value("epochs", c.localize.epochs);
      c.localize.base_lr = l.value("base_lr", c.localize.base_lr);
      c.localize.unet_channels = l.value("unet_channels", c.localize.unet_channels);
    }
    if (j.contains("input_mode")) c.train.input_mode = input_mode_from_string(j.at("input_mode").get<std::string>());
    if (j.contains("seed")) {
      c.seed = j.at("seed").get<uint64_t>();
    } else if (j.contains("train") && j.at("train").contains("seed")) {
      c.seed = c.train.seed;
    } else if (j.contains("phantom") && j.at("phantom").contains("seed")) {
      c.seed = c.phantom.seed;
    }
    c.phantom.seed = c.seed;
    c.train.seed = c.seed;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad experiment config value: ") + e.what());
  }
  c.model.vit.tokens = c.model.token_count();
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  auto c = ExperimentConfig::toy();
  from_json(j, c);
  return c;
}

// ---------------------------------------------------------------------------
// helpers

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

struct Dataset {
  Manifest manifest;

  std::vector<VolumeSample> load(Split split) const {
    std::vector<VolumeSample> out;
    for (const auto& e : manifest.select(split)) out.push_back(load_volume(manifest.resolve(e)));
    return out;
  }
};

Dataset open_dataset(const ExperimentConfig& cfg) {
  const auto path = fs::path(cfg.dataset_dir()) / "manifest.json";
  if (!fs::exists(path)) throw IoError("no dataset at " + cfg.dataset_dir() + " (run gen-data first)");
  return {load_manifest(path.string())};
}

std::vector<VolumeSample> binarized(std::vector<VolumeSample> samples) {
  for (auto& s : samples)
    for (auto& l : s.labels) l = l != background ? 1 : 0;
  return samples;
}

std::map<int64_t, Box> load_boxes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open boxes " + path + " (run localize first)");
  std::map<int64_t, Box> out;
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& p : j.at("patients")) out[p.at("patient_id").get<int64_t>()] = box_from_json(p.at("box"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad boxes file: " + e.what());
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(10);
  out << v;
  return out.str();
}

std::function<void(const EpochRecord&)> progress(bool verbose, const std::string& tag, int64_t epochs) {
  if (!verbose) return {};
  return [tag, epochs](const EpochRecord& r) {
    std::cerr << '[' << tag << "] epoch " << r.epoch << '/' << epochs << " loss " << fmt(r.train_loss);
    if (r.val_dss_macro) std::cerr << " val_dss " << fmt(*r.val_dss_macro) << " val_hd95 " << fmt(*r.val_hd95_macro);
    std::cerr << " (" << fmt(r.wall_seconds) << " s)" << std::endl;
  };
}

int64_t pv_components(const std::vector<LabelVolume>& preds) {
  int64_t n = 0;
  for (const auto& p : preds) n += static_cast<int64_t>(connected_components(binary_mask(p, pv), p.shape).count());
  return n;
}

// ---------------------------------------------------------------------------
// commands

nlohmann::json cmd_gen_data(const ExperimentConfig& cfg) {
  const auto manifest = write_dataset(cfg.phantom, cfg.dataset_dir());
  nlohmann::json counts;
  for (Split s : {Split::train, Split::val, Split::test}) {
    counts[to_string(s)] = {{"patients", manifest.patients(s).size()}, {"volumes", manifest.select(s).size()}};
  }
  return {{"command", "gen-data"},
          {"directory", cfg.dataset_dir()},
          {"files", manifest.entries.size()},
          {"splits", counts},
          {"split_hash", split_hash(manifest)}};
}

nlohmann::json cmd_localize(const ExperimentConfig& cfg, bool verbose) {
  const auto dataset = open_dataset(cfg);
  const auto out = fs::path(cfg.out_dir) / "localize";
  TrainingData data;
  data.train = binarized(dataset.load(Split::train));
  data.val = binarized(dataset.load(Split::val));
  if (data.train.empty()) throw UsageError("localize needs at least one training volume");
  // The default margin scales with the volumes on disk, not the config.
  const int64_t extent = *std::max_element(data.train.front().shape.begin(), data.train.front().shape.end());
  const int64_t margin = cfg.localize.effective_margin(extent);
  TrainConfig tc = cfg.train;
  tc.epochs = cfg.localize.epochs;
  tc.base_lr = cfg.localize.base_lr;
  tc.input_mode = InputMode::downsample;

  Model<float> model(cfg.model_for(ModelKind::localizer), cfg.seed);
  const auto best_path = out / "localizer_best.ckpt";
  FitCallbacks cb;
  cb.on_epoch = progress(verbose, "localizer", tc.epochs);
  cb.on_best = [&](const EpochRecord& r, const Model<float>& m, const AdamState<float>&) {
    save_checkpoint(m, best_path.string(), r.iter, nullptr, {{"epoch", r.epoch}, {"input_mode", "downsample"}});
  };
  fs::create_directories(out);
  const auto trace = fit(model, data, tc, cb);
  write_text(out / "trace.csv", trace.to_csv());
  // Boxes come from the checkpoint with the best validation DSS.
  Model<float> chosen = trace.best_epoch > 0 ? load_checkpoint(best_path.string()).model : std::move(model);
  save_checkpoint(chosen, (out / "localizer.ckpt").string(), 0, nullptr,
                  {{"best_epoch", trace.best_epoch}, {"input_mode", "downsample"}});

  nlohmann::json patients = nlohmann::json::array();
  bool all_contained = true;
  const auto splits = [&] {
    std::map<int64_t, Split> m;
    for (const auto& e : dataset.manifest.entries) m[e.patient_id] = e.split;
    return m;
  }();
  for (const auto& [pid, split] : splits) {
    std::vector<Mask> predicted, truth;
    Extent3 shape{};
    for (const auto& e : dataset.manifest.entries) {
      if (e.patient_id != pid) continue;
      const auto v = load_volume(dataset.manifest.resolve(e));
      shape = v.shape;
      predicted.push_back(foreground_mask(predict(chosen, v, InputMode::downsample)));
      truth.push_back(foreground_mask(v.label_volume()));
    }
    bool any = false;
    for (const auto& m : predicted) any = any || std::find(m.begin(), m.end(), 1) != m.end();
    if (!any) throw DataError("localizer predicted no foreground for patient " + std::to_string(pid));
    const Box box = bounding_box(predicted, margin, shape);
    const Box tight = bounding_box(predicted, 0, shape);
    const Box truth_box = bounding_box(truth, 0, shape);
    const bool contains = box.contains(truth_box);
    all_contained = all_contained && contains;
    patients.push_back({{"patient_id", pid},
                        {"split", to_string(split)},
                        {"box", to_json_value(box)},
                        {"tight", to_json_value(tight)},
                        {"truth", to_json_value(truth_box)},
                        {"contains_truth", contains}});
  }
  nlohmann::json boxes{{"margin", margin},
                       {"margin_rule", cfg.localize.margin ? "configured" : "20 voxels at 224, scaled to the volume extent"},
                       {"extent", extent},
                       {"localizer_best_epoch", trace.best_epoch},
                       {"localizer_best_val_dss", trace.best_val_dss},
                       {"patients", patients}};
  write_json(cfg.boxes_file(), boxes);
  return {{"command", "localize"},
          {"boxes", cfg.boxes_file()},
          {"margin", margin},
          {"patients", patients.size()},
          {"all_contain_truth", all_contained},
          {"localizer", trace.summary()}};
}

struct TrainOutcome {
  nlohmann::json summary;
  TrainingTrace trace;
  fs::path best_checkpoint;
};

TrainOutcome train_model(const ExperimentConfig& cfg, const Dataset& dataset, ModelKind kind, const fs::path& out,
                         bool verbose) {
  TrainingData data;
  data.train = dataset.load(Split::train);
  data.val = dataset.load(Split::val);
  if (cfg.train.input_mode == InputMode::crop_then_downsample) data.boxes = load_boxes(cfg.boxes_file());

  Model<float> model(cfg.model_for(kind), cfg.seed);
  fs::create_directories(out);
  const auto best = out / "best.ckpt";
  const std::string mode = to_string(cfg.train.input_mode);
  FitCallbacks cb;
  cb.on_epoch = progress(verbose, to_string(kind), cfg.train.epochs);
  cb.on_best = [&](const EpochRecord& r, const Model<float>& m, const AdamState<float>& adam) {
    save_checkpoint(m, best.string(), r.iter, &adam,
                    {{"epoch", r.epoch}, {"val_dss_macro", *r.val_dss_macro}, {"input_mode", mode}});
  };
  AdamState<float> adam(model.parameters());
  TrainOutcome outcome;
  outcome.trace = fit(model, data, cfg.train, cb, &adam);
  const int64_t last_epoch = outcome.trace.epochs.empty() ? 0 : outcome.trace.epochs.back().epoch;
  save_checkpoint(model, (out / "final.ckpt").string(), adam.step, &adam, {{"epoch", last_epoch}, {"input_mode", mode}});
  if (outcome.trace.best_epoch == 0) fs::copy_file(out / "final.ckpt", best, fs::copy_options::overwrite_existing);
  write_text(out / "trace.csv", outcome.trace.to_csv());
  nlohmann::json cfg_json = cfg;
  outcome.summary = {{"model", to_string(kind)},
                     {"input_mode", mode},
                     {"parameter_count", model.summary().parameter_count},
                     {"split_hash", split_hash(dataset.manifest)},
                     {"trace", outcome.trace.summary()},
                     {"best_checkpoint", best.string()},
                     {"final_checkpoint", (out / "final.ckpt").string()},
                     {"trace_csv", (out / "trace.csv").string()},
                     {"config", cfg_json}};
  write_json(out / "summary.json", outcome.summary);
  outcome.best_checkpoint = best;
  return outcome;
}

nlohmann::json cmd_train(const ExperimentConfig& cfg, ModelKind kind, bool verbose) {
  const auto dataset = open_dataset(cfg);
  if (cfg.train.input_mode == InputMode::crop_then_downsample && !fs::exists(cfg.boxes_file())) {
    throw IoError("crop_then_downsample needs boxes at " + cfg.boxes_file() + " (run localize first)");
  }
  auto outcome = train_model(cfg, dataset, kind, fs::path(cfg.out_dir) / "train" / to_string(kind), verbose);
  outcome.summary["command"] = "train";
  return outcome.summary;
}

struct Evaluation {
  MetricsReport raw;
  std::optional<MetricsReport> cleaned;
  int64_t pv_before = 0, pv_after = 0;
};

Evaluation evaluate_checkpoint(const Model<float>& model, InputMode mode, const std::vector<VolumeSample>& samples,
                               const std::map<int64_t, Box>& boxes, bool cluster_removal) {
  std::vector<LabelVolume> preds, truths, cleaned;
  std::vector<std::string> ids;
  for (const auto& s : samples) {
    const Box* box = nullptr;
    if (mode == InputMode::crop_then_downsample) {
      auto it = boxes.find(s.patient_id);
      if (it == boxes.end()) throw UsageError("no bounding box for patient " + std::to_string(s.patient_id));
      box = &it->second;
    }
    preds.push_back(predict(model, s, mode, box));
    truths.push_back(s.label_volume());
    char id[32];
    std::snprintf(id, sizeof id, "p%03lld_t%02lld", static_cast<long long>(s.patient_id),
                  static_cast<long long>(s.timepoint));
    ids.emplace_back(id);
  }
  Evaluation ev;
  ev.raw = evaluate(preds, truths, ids, false);
  ev.pv_before = pv_components(preds);
  if (cluster_removal) {
    for (const auto& p : preds) cleaned.push_back(retain_clusters(p));
    ev.cleaned = evaluate(cleaned, truths, ids, false);
    ev.cleaned->cluster_removal = true;
    ev.pv_after = pv_components(cleaned);
  }
  return ev;
}

nlohmann::json cmd_evaluate(const ExperimentConfig& cfg, const std::string& checkpoint, Split split, bool cluster_removal) {
  if (checkpoint.empty()) throw UsageError("evaluate needs --checkpoint");
  const auto dataset = open_dataset(cfg);
  auto loaded = load_checkpoint(checkpoint);
  const auto& mc = loaded.model.config();
  if (mc.kind == ModelKind::localizer) throw UsageError("evaluate expects a segmentation checkpoint, not a localizer");
  if (mc.input_extent != cfg.model.input_extent) {
    throw ConfigError("config/checkpoint extent mismatch: config input_extent " + std::to_string(cfg.model.input_extent) +
                      ", checkpoint " + std::to_string(mc.input_extent));
  }
  InputMode mode = cfg.train.input_mode;
  if (loaded.extra.is_object() && loaded.extra.contains("input_mode")) {
    mode = input_mode_from_string(loaded.extra.at("input_mode").get<std::string>());
  }
  const auto samples = dataset.load(split);
  if (samples.empty()) throw UsageError("split '" + to_string(split) + "' has no volumes");
  std::map<int64_t, Box> boxes;
  if (mode == InputMode::crop_then_downsample) boxes = load_boxes(cfg.boxes_file());

  const auto ev = evaluate_checkpoint(loaded.model, mode, samples, boxes, cluster_removal);
  const auto out = fs::path(cfg.out_dir) / "evaluate" / to_string(split);
  write_text(out / "metrics.csv", ev.raw.to_csv());
  write_json(out / "metrics.json", ev.raw.to_json());
  nlohmann::json result{{"command", "evaluate"},
                        {"checkpoint", checkpoint},
                        {"split", to_string(split)},
                        {"input_mode", to_string(mode)},
                        {"volumes", samples.size()},
                        {"macro_dss", ev.raw.macro_dss},
                        {"macro_hd95", ev.raw.macro_hd95},
                        {"pv_components", ev.pv_before},
                        {"split_hash", split_hash(dataset.manifest)},
                        {"metrics_csv", (out / "metrics.csv").string()}};
  if (ev.cleaned) {
    write_text(out / "metrics_cluster_removal.csv", ev.cleaned->to_csv());
    write_json(out / "metrics_cluster_removal.json", ev.cleaned->to_json());
    result["cluster_removal"] = {{"macro_dss", ev.cleaned->macro_dss},
                                 {"macro_hd95", ev.cleaned->macro_hd95},
                                 {"pv_components", ev.pv_after},
                                 {"metrics_csv", (out / "metrics_cluster_removal.csv").string()}};
  }
  return result;
}

nlohmann::json cmd_gradcheck(const std::string& op, uint64_t seed) {
  const auto rows = run_gradcheck_suite(op, seed);
  nlohmann::json list = nlohmann::json::array();
  bool all = true;
  for (const auto& r : rows) {
    all = all && r.report.pass;
    list.push_back({{"name", r.name},
                    {"kind", r.kind},
                    {"max_rel_err", r.report.max_rel_err},
                    {"max_abs_err", r.report.max_abs_err},
                    {"checked", r.report.checked},
                    {"pass", r.report.pass},
                    {"seconds", r.seconds}});
  }
  return {{"command", "gradcheck"}, {"tolerance", 1e-4}, {"eps", 1e-6}, {"rows", list}, {"all_pass", all}};
}

nlohmann::json cmd_compare(const ExperimentConfig& cfg, bool verbose) {
  const auto dataset = open_dataset(cfg);
  if (cfg.train.input_mode == InputMode::crop_then_downsample && !fs::exists(cfg.boxes_file())) {
    throw IoError("crop_then_downsample needs boxes at " + cfg.boxes_file() + " (run localize first)");
  }
  const auto out = fs::path(cfg.out_dir) / "compare";
  const auto test = dataset.load(Split::test);
  std::map<int64_t, Box> boxes;
  if (cfg.train.input_mode == InputMode::crop_then_downsample) boxes = load_boxes(cfg.boxes_file());

  std::ostringstream csv;
  csv << "model,epochs_run,best_epoch,best_val_dss_macro,epochs_to_within_0.01_of_best,seconds_to_within_0.01_of_best,"
         "test_dss_macro,test_hd95_macro,split_hash,wall_seconds\n";
  nlohmann::json rows = nlohmann::json::array();
  std::vector<PlotSeries> series;
  std::map<std::string, int64_t> near_best;
  for (auto kind : {ModelKind::trunet, ModelKind::res_unet}) {
    const auto name = to_string(kind);
    const auto outcome = train_model(cfg, dataset, kind, out / name, verbose);
    const auto& tr = outcome.trace;
    nlohmann::json row{{"model", name},
                       {"epochs_run", tr.epochs.size()},
                       {"best_epoch", tr.best_epoch},
                       {"best_val_dss_macro", tr.best_val_dss},
                       {"epochs_to_within_0.01_of_best", tr.epochs_to_near_best},
                       {"seconds_to_within_0.01_of_best", tr.seconds_to_near_best},
                       {"split_hash", split_hash(dataset.manifest)},
                       {"wall_seconds", tr.wall_seconds}};
    std::string test_dss, test_hd;
    if (!test.empty()) {
      const auto best = load_checkpoint(outcome.best_checkpoint.string());
      const auto ev = evaluate_checkpoint(best.model, cfg.train.input_mode, test, boxes, false);
      row["test_dss_macro"] = ev.raw.macro_dss;
      row["test_hd95_macro"] = ev.raw.macro_hd95;
      row["test_report"] = ev.raw.to_json();
      test_dss = fmt(ev.raw.macro_dss);
      test_hd = fmt(ev.raw.macro_hd95);
    }
    csv << name << ',' << tr.epochs.size() << ',' << tr.best_epoch << ',' << fmt(tr.best_val_dss) << ','
        << tr.epochs_to_near_best << ',' << fmt(tr.seconds_to_near_best) << ',' << test_dss << ',' << test_hd << ','
        << split_hash(dataset.manifest) << ',' << fmt(tr.wall_seconds) << '\n';
    PlotSeries s{name, kind == ModelKind::trunet ? "#d62728" : "#1f77b4", {}};
    for (const auto& e : tr.epochs)
      if (e.val_dss_macro) s.points.emplace_back(static_cast<double>(e.epoch), *e.val_dss_macro);
    series.push_back(s);
    near_best[name] = tr.epochs_to_near_best;
    rows.push_back(row);
  }
  write_text(out / "comparison.csv", csv.str());
  write_text(out / "val_dss.svg", svg_line_plot(series, "Validation macro DSS", "epoch", "macro DSS"));
  nlohmann::json result{{"command", "compare"},
                        {"rows", rows},
                        {"trunet_converges_no_later", near_best["trunet"] <= near_best["res_unet"]},
                        {"comparison_csv", (out / "comparison.csv").string()},
                        {"plot", (out / "val_dss.svg").string()}};
  if (near_best["trunet"] > 0) {
    result["epoch_ratio_res_unet_over_trunet"] =
        static_cast<double>(near_best["res_unet"]) / static_cast<double>(near_best["trunet"]);
  }
  write_json(out / "comparison.json", result);
  return result;
}

template <typename T>
std::optional<T> option(const nlohmann::json& options, const char* key) {
  if (!options.contains(key) || options.at(key).is_null()) return std::nullopt;
  try {
    return options.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw UsageError(std::string("option '") + key + "' has the wrong type");
  }
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"gen-data", "localize", "train", "evaluate", "gradcheck", "compare"};
  return names;
}

nlohmann::json run_command(const std::string& command, const nlohmann::json& options) {
  if (std::find(command_names().begin(), command_names().end(), command) == command_names().end()) {
    throw UsageError("unknown command '" + command + "'");
  }
  if (!options.is_null() && !options.is_object()) throw UsageError("command options must be a JSON object");
  const nlohmann::json opts = options.is_null() ? nlohmann::json::object() : options;

  ExperimentConfig cfg = ExperimentConfig::toy();
  if (auto path = option<std::string>(opts, "config")) cfg = load_experiment_config(*path);
  if (auto seed = option<uint64_t>(opts, "seed")) {
    cfg.seed = *seed;
    cfg.phantom.seed = *seed;
    cfg.train.seed = *seed;
  }
  if (auto dir = option<std::string>(opts, "out_dir")) cfg.out_dir = *dir;
  if (auto dir = option<std::string>(opts, "data_dir")) cfg.data_dir = *dir;
  if (auto boxes = option<std::string>(opts, "boxes")) cfg.boxes_path = *boxes;
  if (auto mode = option<std::string>(opts, "input_mode")) cfg.train.input_mode = input_mode_from_string(*mode);
  if (auto epochs = option<int64_t>(opts, "epochs")) {
    if (command == "localize") {
      cfg.localize.epochs = *epochs;
    } else {
      cfg.train.epochs = *epochs;
    }
  }
  if (auto margin = option<int64_t>(opts, "margin")) cfg.localize.margin = *margin;
  if (auto n = option<int64_t>(opts, "patients")) cfg.phantom.num_patients = *n;
  if (auto n = option<int64_t>(opts, "timepoints")) cfg.phantom.timepoints = *n;
  if (auto n = option<int64_t>(opts, "extent")) cfg.phantom.extent = *n;
  if (auto n = option<int64_t>(opts, "train_patients")) cfg.phantom.train_patients = *n;
  if (auto n = option<int64_t>(opts, "val_patients")) cfg.phantom.val_patients = *n;
  const bool verbose = option<bool>(opts, "verbose").value_or(false);

  ModelKind kind = ModelKind::trunet;
  if (auto name = option<std::string>(opts, "model")) {
    kind = model_kind_from_string(*name);
    if (kind == ModelKind::localizer) throw UsageError("train --model must be trunet or res_unet");
  }
  Split split = Split::test;
  if (auto name = option<std::string>(opts, "split")) split = split_from_string(*name);

  if (command == "gradcheck") return cmd_gradcheck(option<std::string>(opts, "op").value_or(""), cfg.seed);
  cfg.validate();
  if (command == "gen-data") return cmd_gen_data(cfg);
  if (command == "localize") return cmd_localize(cfg, verbose);
  if (command == "train") return cmd_train(cfg, kind, verbose);
  if (command == "evaluate") {
    return cmd_evaluate(cfg, option<std::string>(opts, "checkpoint").value_or(""), split,
                        option<bool>(opts, "cluster_removal").value_or(false));
  }
  return cmd_compare(cfg, verbose);
}

}  // namespace trunet
