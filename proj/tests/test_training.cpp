#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "test_util.hpp"
#include "trunet/checkpoint.hpp"
#include "trunet/error.hpp"
#include "trunet/gradcheck.hpp"
#include "trunet/phantom.hpp"
#include "trunet/training.hpp"

using namespace trunet;

namespace {

PhantomSpec phantom(int64_t extent, int64_t patients = 3) {
  PhantomSpec s;
  s.extent = extent;
  s.num_patients = patients;
  s.timepoints = 4;
  s.train_patients = patients - 1;
  s.val_patients = 1;
  s.seed = 5;
  return s;
}

std::set<uint8_t> label_set(const std::vector<uint8_t>& v) { return {v.begin(), v.end()}; }

// Independent recomputation of both loss terms from raw arrays.
LossTerms oracle_terms(const std::vector<double>& p, const std::vector<uint8_t>& y, int64_t n, int64_t c, bool fg_ce) {
  const int64_t v = static_cast<int64_t>(y.size()) / n;
  double dice = 0, ce = 0, ce_n = 0;
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t k = 1; k < c; ++k) {
      double inter = 0, ps = 0, ys = 0;
      for (int64_t i = 0; i < v; ++i) {
        const double pi = p[(b * c + k) * v + i];
        const bool on = y[b * v + i] == k;
        inter += on ? pi : 0;
        ps += pi;
        ys += on;
      }
      dice += (2 * inter + 1e-5) / (ps + ys + 1e-5);
    }
    for (int64_t i = 0; i < v; ++i) {
      const int t = y[b * v + i];
      if (fg_ce && t == 0) continue;
      ce -= std::log(p[(b * c + t) * v + i]);
      ce_n += 1;
    }
  }
  return {1 - dice / static_cast<double>(n * (c - 1)), ce_n > 0 ? ce / ce_n : 0.0};
}

TensorD random_probs(std::mt19937_64& rng, int64_t n, int64_t c, int64_t v) {
  auto logits = testing::random_tensor<double>({n, c, v}, rng, -2, 2);
  NoGradGuard g;
  return ops::softmax(logits, 1).detach();
}

Model<float> toy(ModelKind kind = ModelKind::trunet, uint64_t seed = 1) {
  auto c = ModelConfig::toy();
  c.kind = kind;
  return Model<float>(c, seed);
}

}  // namespace

TEST_CASE("poly_lr closed form") {
  const int64_t T = 1000;
  CHECK(poly_lr(0.01, 0, T, 0.9) == 0.01);
  CHECK(poly_lr(0.01, T, T, 0.9) == 0.0);
  CHECK(poly_lr(0.01, T / 2, T, 0.9) == doctest::Approx(5.3589e-3).epsilon(1e-4));
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int64_t> max_iters(1, 100000);
  std::uniform_real_distribution<double> base(1e-4, 1.0), power(0.0, 3.0);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const int64_t m = max_iters(rng);
    const int64_t it = std::uniform_int_distribution<int64_t>(0, m)(rng);
    const double b = base(rng), pw = power(rng);
    const double expected = b * std::pow(1.0 - static_cast<double>(it) / static_cast<double>(m), pw);
    worst = std::max(worst, std::abs(poly_lr(b, it, m, pw) - expected));
  }
  CHECK(worst <= 1e-12);
  double prev = INFINITY;
  for (int64_t it = 0; it <= 200; ++it) {
    const double lr = poly_lr(0.01, it, 200, 0.9);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK(poly_lr(0.01, T + 5, T, 0.9) == 0.0);
}

TEST_CASE("adam steps against hand-evaluated updates") {
  ParameterSet<float> params(0);
  auto w = params.add("w", {4}, Init::zeros);
  AdamState<float> state(params);
  auto set_grad = [&](float g) {
    w.zero_grad();
    auto y = ops::sum(ops::scale(w, g));
    y.backward();
  };
  set_grad(1.0f);
  adam_step(params, state, 0.01);
  // m̂ = 1, v̂ = 1 after bias correction
  const double first = -0.01 * 1.0 / (1.0 + 1e-8);
  for (float x : w.data()) CHECK(std::abs(x - first) <= 1e-9);
  CHECK(state.step == 1);

  // constant gradient: bias correction makes every step the same size
  const std::vector<float> before(w.data().begin(), w.data().end());
  set_grad(1.0f);
  adam_step(params, state, 0.01);
  for (size_t i = 0; i < 4; ++i) CHECK(std::abs((w.data()[i] - before[i]) - first) <= 1e-9);

  // varying gradient: the second step reflects both moments
  ParameterSet<float> p2(0);
  auto u = p2.add("u", {1}, Init::zeros);
  AdamState<float> s2(p2);
  auto step = [&](float g) {
    u.zero_grad();
    ops::sum(ops::scale(u, g)).backward();
    adam_step(p2, s2, 0.01);
  };
  step(1.0f);
  const double u1 = u.data()[0];
  step(-0.5f);
  const double m = 0.9 * 0.1 + 0.1 * -0.5, v = 0.999 * 0.001 + 0.001 * 0.25;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  const double expected = -0.01 * mh / (std::sqrt(vh) + 1e-8);
  CHECK(std::abs((u.data()[0] - u1) - expected) <= 1e-9);
  CHECK(std::abs(expected) < 0.01);

  // zero gradients leave parameters unchanged
  ParameterSet<float> p3(0);
  auto z = p3.add("z", {3}, Init::normal_002);
  const std::vector<float> z0(z.data().begin(), z.data().end());
  AdamState<float> s3(p3);
  adam_step(p3, s3, 0.01);
  CHECK(std::equal(z0.begin(), z0.end(), z.data().begin()));
}

TEST_CASE("dice_ce_loss examples") {
  const int64_t c = 6, v = 10;
  // near-one-hot correct prediction
  std::vector<uint8_t> y(v);
  for (int64_t i = 0; i < v; ++i) y[i] = static_cast<uint8_t>(i % c);
  std::vector<double> p(static_cast<size_t>(c * v), 1e-6 / (c - 1));
  for (int64_t i = 0; i < v; ++i) p[y[i] * v + i] = 1 - 1e-6;
  CHECK(dice_ce_loss(TensorD({1, c, v}, p), y).item() < 1e-3);

  // uniform probabilities over 6 classes, all-foreground labels
  std::vector<uint8_t> fg(v, 3);
  LossTerms terms;
  auto loss = dice_ce_loss(TensorD::full({1, c, v}, 1.0 / 6), fg, true, &terms);
  CHECK(terms.ce == doctest::Approx(std::log(6.0)).epsilon(1e-12));
  CHECK(terms.ce == doctest::Approx(1.7918).epsilon(1e-4));
  CHECK(loss.item() == doctest::Approx(0.5 * (terms.dice + terms.ce)).epsilon(1e-14));

  // no foreground at all: Dice is driven by the smoothing, CE is empty
  std::vector<uint8_t> bg(v, 0);
  dice_ce_loss(TensorD::full({1, c, v}, 1.0 / 6), bg, true, &terms);
  CHECK(terms.ce == 0.0);
  const double d = 1e-5 / (v / 6.0 + 1e-5);
  CHECK(terms.dice == doctest::Approx(1 - d).epsilon(1e-12));

  std::vector<uint8_t> bad(v, 6);
  CHECK_THROWS_AS(dice_ce_loss(TensorD::full({1, c, v}, 1.0 / 6), bad), DataError);
  CHECK_THROWS_AS(dice_ce_loss(TensorD::full({1, c, v}, 1.0 / 6), std::vector<uint8_t>(3, 0)), ConfigError);
}

TEST_CASE("dice_ce_loss terms match an independent recomputation") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t n = 1 + trial % 2, c = 3 + trial % 4, v = 27;
    auto probs = random_probs(rng, n, c, v);
    std::vector<uint8_t> y(static_cast<size_t>(n * v));
    for (auto& l : y) l = static_cast<uint8_t>(rng() % c);
    const std::vector<double> p(probs.data().begin(), probs.data().end());
    for (auto scope : {CeVoxels::foreground, CeVoxels::all}) {
      LossTerms got;
      const double loss = dice_ce_loss(probs, y, true, &got, scope).item();
      const auto want = oracle_terms(p, y, n, c, scope == CeVoxels::foreground);
      CHECK(got.dice == doctest::Approx(want.dice).epsilon(1e-12));
      CHECK(got.ce == doctest::Approx(want.ce).epsilon(1e-12));
      CHECK(loss == doctest::Approx(0.5 * (want.dice + want.ce)).epsilon(1e-12));
      CHECK(loss >= 0.0);
    }
  }
}

TEST_CASE("dice_ce_loss gradient check at 4^3 with 3 classes") {
  std::mt19937_64 rng(9);
  std::vector<uint8_t> y(64);
  for (auto& l : y) l = static_cast<uint8_t>(rng() % 3);
  for (auto scope : {CeVoxels::foreground, CeVoxels::all}) {
    auto logits = testing::random_tensor<double>({1, 3, 4, 4, 4}, rng, -1, 1);
    // through softmax, as in training
    auto rep = finite_diff_check([&](const TensorD& x) { return dice_ce_loss(ops::softmax(x, 1), y, true, nullptr, scope); },
                                 logits, 1e-6, 1e-4);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err <= 1e-4);
    // and directly on probabilities
    auto probs = random_probs(rng, 1, 3, 64);
    auto direct = finite_diff_check([&](const TensorD& p) { return dice_ce_loss(p, y, true, nullptr, scope); },
                                    TensorD({1, 3, 4, 4, 4}, std::vector<double>(probs.data().begin(), probs.data().end())),
                                    1e-6, 1e-4);
    CHECK(direct.pass);
  }
}

TEST_CASE("resizing") {
  // a linear field is reproduced exactly by half-voxel trilinear downsampling
  const Extent3 from{64, 64, 64}, to{32, 32, 32};
  std::vector<float> field(static_cast<size_t>(voxel_count(from)));
  for (int64_t i = 0; i < 64; ++i)
    for (int64_t j = 0; j < 64; ++j)
      for (int64_t k = 0; k < 64; ++k) field[flat_index(from, i, j, k)] = static_cast<float>(0.5 * i - 0.25 * j + k);
  const auto small = resize_intensity(field, from, to);
  double worst = 0;
  for (int64_t i = 0; i < 32; ++i)
    for (int64_t j = 0; j < 32; ++j)
      for (int64_t k = 0; k < 32; ++k) {
        const double si = 2 * i + 0.5, sj = 2 * j + 0.5, sk = 2 * k + 0.5;
        worst = std::max(worst, std::abs(small[flat_index(to, i, j, k)] - (0.5 * si - 0.25 * sj + sk)));
      }
  CHECK(worst < 1e-4);
  CHECK(resize_intensity(field, from, from) == field);

  std::vector<uint8_t> labels(field.size());
  for (size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<uint8_t>((i / 7) % 4);
  const auto nn = resize_labels(labels, from, to);
  CHECK(nn.size() == 32768);
  for (auto l : label_set(nn)) CHECK(label_set(labels).count(l) == 1);
  CHECK(resize_labels(labels, from, from) == labels);
}

TEST_CASE("augmentation") {
  const auto v = generate_volume(phantom(32), 1, 1);
  TrainConfig none;
  none.rotate_prob = 0;
  none.flip_prob = 0;
  std::mt19937_64 rng(1);
  const auto same = augment(v, none, rng);
  CHECK(same.labels == v.labels);
  CHECK(same.intensity == v.intensity);

  for (int axis = 0; axis < 3; ++axis) {
    const auto twice = flip(flip(v, axis), axis);
    CHECK(twice.labels == v.labels);
    CHECK(twice.intensity == v.intensity);
    CHECK(flip(v, axis).labels != v.labels);
    const auto r0 = rotate(v, axis, 0.0);
    CHECK(r0.labels == v.labels);
    double worst = 0;
    for (size_t i = 0; i < v.intensity.size(); ++i) worst = std::max(worst, std::abs(double(r0.intensity[i]) - v.intensity[i]));
    CHECK(worst <= 1e-6);
    // four quarter turns bring every label back
    auto r = v;
    for (int q = 0; q < 4; ++q) r = rotate(r, axis, 90.0);
    CHECK(r.labels == v.labels);
  }
  // a quarter turn about axis 0 maps (i, j, k) to (i, n-1-k, j)
  const auto q = rotate(v, 0, 90.0);
  const int64_t n = 32;
  int mismatches = 0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t k = 0; k < n; ++k) {
        const auto want = v.labels[flat_index(v.shape, i, k, n - 1 - j)];
        mismatches += q.labels[flat_index(v.shape, i, j, k)] != want;
      }
  CHECK(mismatches == 0);

  TrainConfig cfg;  // default probabilities
  cfg.rotate_prob = 1.0;
  const auto before = label_set(v.labels);
  for (int t = 0; t < 10; ++t) {
    std::mt19937_64 r(t);
    const auto a = augment(v, cfg, r);
    CHECK(a.shape == v.shape);
    CHECK(a.spacing_mm == v.spacing_mm);
    for (auto l : label_set(a.labels)) CHECK(before.count(l) == 1);
  }
}

TEST_CASE("preprocess modes") {
  const auto big = generate_volume(phantom(64), 1, 1);
  const auto down = preprocess(big, InputMode::downsample, 32);
  CHECK(down.image.shape() == Shape{1, 1, 32, 32, 32});
  CHECK(down.labels.size() == 32768);
  for (auto l : label_set(down.labels)) CHECK(label_set(big.labels).count(l) == 1);
  double mean = 0, sq = 0;
  for (float x : down.image.data()) {
    mean += x;
    sq += double(x) * x;
  }
  mean /= 32768;
  CHECK(std::abs(mean) < 1e-5);
  CHECK(std::abs(sq / 32768 - 1) < 1e-4);

  const auto mid = generate_volume(phantom(48), 1, 1);
  std::mt19937_64 rng(3);
  std::set<int64_t> seen;
  for (int t = 0; t < 50; ++t) {
    const auto p = preprocess(mid, InputMode::patches, 32, nullptr, &rng);
    for (int64_t o : p.offset) {
      CHECK(o >= 0);
      CHECK(o <= 16);
      seen.insert(o);
    }
    CHECK(p.image.shape() == Shape{1, 1, 32, 32, 32});
  }
  CHECK(seen.size() > 3);

  const Box full{{0, 0, 0}, {63, 63, 63}};
  const auto cropped = preprocess(big, InputMode::crop_then_downsample, 32, &full);
  CHECK(std::equal(cropped.image.data().begin(), cropped.image.data().end(), down.image.data().begin()));
  CHECK(cropped.labels == down.labels);
  CHECK_THROWS_AS(preprocess(big, InputMode::crop_then_downsample, 32), UsageError);
  const Box outside{{0, 0, 0}, {64, 10, 10}};
  CHECK_THROWS_AS(preprocess(big, InputMode::crop_then_downsample, 32, &outside), DataError);

  // smaller than the patch: padded with background
  const auto sub = crop(mid, {0, 0, 0}, {20, 20, 20});
  const auto padded = preprocess(sub, InputMode::patches, 32);
  CHECK(padded.labels.size() == 32768);
  CHECK(padded.labels[flat_index({32, 32, 32}, 31, 31, 31)] == background);

  CHECK(tile_origins(48, 32) == std::vector<int64_t>{0, 16});
  CHECK(tile_origins(64, 32) == std::vector<int64_t>{0, 32});
  CHECK(tile_origins(32, 32) == std::vector<int64_t>{0});
  CHECK(tile_origins(20, 32) == std::vector<int64_t>{0});
}

TEST_CASE("predict restores the sample geometry") {
  const auto model = toy();
  const auto v = generate_volume(phantom(48), 2, 1);
  for (auto mode : {InputMode::downsample, InputMode::patches}) {
    const auto p = predict(model, v, mode);
    CHECK(p.shape == v.shape);
    CHECK(p.labels.size() == v.labels.size());
    CHECK(*std::max_element(p.labels.begin(), p.labels.end()) < 6);
  }
  const Box box{{8, 8, 8}, {39, 39, 39}};
  const auto c = predict(model, v, InputMode::crop_then_downsample, &box);
  CHECK(c.labels[flat_index(v.shape, 2, 2, 2)] == background);
  CHECK(c.labels[flat_index(v.shape, 47, 20, 20)] == background);
}

TEST_CASE("fit contract") {
  const auto spec = phantom(32);
  TrainingData data;
  data.train = {generate_volume(spec, 1, 1), generate_volume(spec, 1, 2)};
  data.val = {generate_volume(spec, 3, 1)};
  TrainConfig cfg;
  cfg.epochs = 0;
  auto model = toy();
  bool called = false;
  FitCallbacks cb;
  cb.on_best = [&](const EpochRecord&, const Model<float>&, const AdamState<float>&) { called = true; };
  const auto empty = fit(model, data, cfg, cb);
  CHECK(empty.epochs.empty());
  CHECK(empty.best_epoch == 0);
  CHECK(!called);

  cfg.epochs = 2;
  cfg.seed = 4;
  auto a = toy(), b = toy();
  const auto ta = fit(a, data, cfg);
  const auto tb = fit(b, data, cfg);
  CHECK(ta.epochs.size() == 2);
  CHECK(ta.to_csv(false) == tb.to_csv(false));
  CHECK(flatten_parameters(a) == flatten_parameters(b));
  CHECK(ta.epochs[1].iter == 4);
  CHECK(ta.epochs[0].val_dss_macro.has_value());
  CHECK(ta.epochs_to_near_best >= 1);
  CHECK(ta.to_csv().rfind("epoch,iter,lr,train_loss,val_dss_macro,val_hd95_macro,wall_seconds\n", 0) == 0);

  cfg.seed = 5;
  auto c = toy();
  CHECK(fit(c, data, cfg).to_csv(false) != ta.to_csv(false));

  auto d = toy();
  TrainingData broken = data;
  broken.train[0].intensity[5] = NAN;
  cfg.epochs = 1;
  CHECK_THROWS_AS(fit(d, broken, cfg), TrainingError);
  cfg.target_extent = 48;
  CHECK_THROWS_AS(fit(d, data, cfg), ConfigError);
  cfg.target_extent = 32;
  CHECK_THROWS_AS(fit(d, TrainingData{}, cfg), UsageError);
  cfg.input_mode = InputMode::crop_then_downsample;
  CHECK_THROWS_AS(fit(d, data, cfg), UsageError);
}

TEST_CASE("near-best statistic") {
  CHECK(first_within({0.5, 0.8, 0.795, 0.81}, 0.01) == 1);
  CHECK(first_within({0.9}, 0.01) == 0);
  CHECK(first_within({}, 0.01) == -1);
  CHECK(first_within({0.1, 0.2, 0.3}, 0.0) == 2);
}

TEST_CASE("train config validation and JSON") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.rotate_prob = 1.5;
  c.target_extent = 40;
  try {
    c.validate();
    FAIL("accepted");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("rotate_prob") != std::string::npos);
    CHECK(msg.find("target_extent") != std::string::npos);
  }
  TrainConfig d;
  d.input_mode = InputMode::patches;
  d.ce_voxels = CeVoxels::foreground;
  d.base_lr = 0.003;
  nlohmann::json j = d;
  const auto back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
  j["learning_rate"] = 1;
  CHECK_THROWS_AS(j.get<TrainConfig>(), ConfigError);
  CHECK_THROWS_AS(input_mode_from_string("tiles"), ConfigError);
}
