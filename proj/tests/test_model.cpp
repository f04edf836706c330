#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "trunet/checkpoint.hpp"
#include "trunet/error.hpp"
#include "trunet/gradcheck.hpp"
#include "trunet/model.hpp"
#include "trunet/ops.hpp"

using namespace trunet;
using trunet::testing::random_tensor;
using trunet::testing::weighted_sum;

namespace {

namespace fs = std::filesystem;

fs::path scratch_dir() {
  auto dir = fs::temp_directory_path() / "trunet_test_model";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Independent parameter arithmetic.
int64_t conv(int64_t in, int64_t out, int64_t k, bool bias) { return out * in * k * k * k + (bias ? out : 0); }
int64_t norm(int64_t c) { return 2 * c; }

int64_t trunet_count(const ModelConfig& c) {
  auto s = [&](int64_t ch) { return std::max<int64_t>(1, std::llround(ch * c.width_multiplier)); };
  const int64_t stem = s(64);
  const int64_t widths[3] = {s(256), s(512), s(1024)};
  int64_t n = conv(1, stem, 7, false) + norm(stem);
  int64_t in = stem;
  for (int b = 0; b < 3; ++b) {
    for (int u = 0; u < c.block_depths[b]; ++u) {
      const int64_t out = widths[b], mid = out / 4;
      const bool proj = (u == 0 && b > 0) || in != out;
      n += norm(in) + conv(in, mid, 1, false) + norm(mid) + conv(mid, mid, 3, false) + norm(mid) +
           conv(mid, out, 1, false) + (proj ? in * out : 0);
      in = out;
    }
  }
  n += norm(in);
  const int64_t e = c.vit.hidden, m = c.vit.mlp, g = c.input_extent / 16;
  n += conv(in, e, 1, true) + g * g * g * e;
  n += c.vit.layers * (4 * e * e + 2 * e * m + 9 * e + m) + 2 * e;
  int64_t d[4];
  for (int i = 0; i < 4; ++i) d[i] = s(c.decoder_channels[i]);
  n += conv(e, d[0], 3, true) + norm(d[0]);
  const int64_t skips[4] = {widths[1], widths[0], stem, 0};
  int64_t prev = d[0];
  for (int i = 0; i < 4; ++i) {
    n += conv(prev + skips[i], d[i], 3, true) + norm(d[i]);
    prev = d[i];
  }
  return n + conv(prev, c.num_classes, 3, true);
}

int64_t unit_count(int64_t in, int64_t out, int stride, int subunits, bool last_conv_only) {
  int64_t n = 0, c = in;
  for (int s = 0; s < subunits; ++s) {
    n += conv(c, out, 3, true);
    if (!(last_conv_only && s == subunits - 1)) n += norm(out) + out;
    c = out;
  }
  if (stride != 1) n += conv(in, out, 3, true);
  else if (in != out) n += conv(in, out, 1, true);
  return n;
}

int64_t res_unet_count(const ModelConfig& c) {
  const auto& ch = c.unet_channels;
  const size_t l = ch.size();
  int64_t n = 0, in = 1;
  for (size_t i = 0; i + 1 < l; ++i) {
    n += unit_count(in, ch[i], 2, c.unet_res_units, false);
    in = ch[i];
  }
  n += unit_count(ch[l - 2], ch[l - 1], 1, c.unet_res_units, false);
  for (size_t i = 0; i + 1 < l; ++i) {
    const int64_t below = i == l - 2 ? ch[l - 1] : ch[i];
    const int64_t out = i == 0 ? c.num_classes : ch[i - 1];
    n += conv(ch[i] + below, out, 3, true) + norm(out) + out + unit_count(out, out, 1, 1, i == 0);
  }
  return n;
}

ModelConfig small_unet(int64_t extent, std::vector<int64_t> channels, int64_t classes) {
  ModelConfig c;
  c.kind = ModelKind::res_unet;
  c.input_extent = extent;
  c.unet_channels = std::move(channels);
  c.num_classes = classes;
  return c;
}

}  // namespace

TEST_CASE("full-scale TRUNet declares the full structure") {
  auto model = build_trunet<float>(ModelConfig::full_scale(), 0, false);
  const auto s = model.summary();
  CHECK(s.tokens == 2744);
  CHECK(s.voxels_per_patch == 4096);
  CHECK(s.vit_hidden == 768);
  CHECK(s.vit_mlp == 3072);
  CHECK(s.vit_heads == 12);
  CHECK(s.vit_layers == 12);
  CHECK(s.skip_channels == std::array<int64_t, 3>{64, 256, 512});
  CHECK(s.skip_extents == std::array<int64_t, 3>{112, 56, 28});
  CHECK(s.encoder_channels == 1024);
  CHECK(s.encoder_units == 16);
  CHECK(s.decoder_channels == std::array<int64_t, 4>{512, 256, 128, 64});
  CHECK(s.num_classes == 6);
  CHECK(s.parameter_count == trunet_count(ModelConfig::full_scale()));
  CHECK_THROWS_AS(model.forward(BasicTensor<float>::zeros({1, 1, 16, 16, 16})), UsageError);

  // Declared tensor shapes agree with the summary.
  const auto& entries = model.parameters().entries();
  auto shape_of = [&](const std::string& name) {
    for (const auto& e : entries)
      if (e.name == name) return e.shape;
    FAIL("missing " << name);
    return Shape{};
  };
  CHECK(shape_of("encoder.stem.conv.weight") == Shape{64, 1, 7, 7, 7});
  CHECK(shape_of("vit.embedding.position") == Shape{2744, 768});
  CHECK(shape_of("decoder.stage1.conv.weight") == Shape{512, 512 + 512, 3, 3, 3});
  CHECK(shape_of("decoder.stage3.conv.weight") == Shape{128, 256 + 64, 3, 3, 3});
  CHECK(shape_of("head.conv.weight") == Shape{6, 64, 3, 3, 3});
}

TEST_CASE("res_unet summary") {
  ModelConfig c = ModelConfig::full_scale();
  c.kind = ModelKind::res_unet;
  auto s = build_res_unet<float>(c, 0, false).summary();
  CHECK(s.unet_levels == 5);
  CHECK(s.convs_per_unit == 2);
  CHECK(s.kernel_size == 3);
  CHECK(s.stride == 2);
  CHECK(s.activation == "prelu");
}

TEST_CASE("config validation lists violated constraints") {
  ModelConfig c = ModelConfig::toy();
  c.input_extent = 100;
  try {
    c.validate();
    FAIL("expected a configuration error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("not divisible by 16") != std::string::npos);
  }
  c = ModelConfig::toy();
  c.vit.heads = 5;
  c.num_classes = 1;
  try {
    c.validate();
    FAIL("expected a configuration error");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("heads") != std::string::npos);
    CHECK(msg.find("num_classes") != std::string::npos);
  }
  CHECK_THROWS_AS(build_res_unet<float>(small_unet(24, {4, 4, 4, 4, 4}, 3), 0), ConfigError);
  CHECK_NOTHROW(ModelConfig::full_scale().validate());
  CHECK_NOTHROW(ModelConfig::toy().validate());
}

TEST_CASE("config JSON round trip") {
  ModelConfig c = ModelConfig::toy();
  c.head_upsample = true;
  c.vit.pos_embedding = PosEmbedding::random_init_learnable_1d;
  nlohmann::json j = c;
  const auto back = j.get<ModelConfig>();
  CHECK(nlohmann::json(back) == j);

  auto parsed = nlohmann::json::parse(R"({"width_multiplier": "1/8", "input_extent": 48})").get<ModelConfig>();
  CHECK(parsed.width_multiplier == 0.125);
  CHECK(parsed.token_count() == 27);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"depth": 3})").get<ModelConfig>(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"kind": "resnet"})").get<ModelConfig>(), ConfigError);
}

TEST_CASE("parameter counts match closed forms for random toy configs") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> depth(1, 3), layers(0, 3), classes(2, 6);
  const double widths[] = {0.0625, 0.125, 0.25};
  for (int trial = 0; trial < 3; ++trial) {
    ModelConfig c = ModelConfig::toy();
    c.width_multiplier = widths[rng() % 3];
    c.block_depths = {depth(rng), depth(rng), depth(rng)};
    c.vit.hidden = 16 * (1 + rng() % 3);
    c.vit.heads = 4;
    c.vit.layers = layers(rng);
    c.vit.mlp = 8 * (1 + rng() % 8);
    c.input_extent = 16 * (1 + rng() % 3);
    c.num_classes = classes(rng);
    c.head_upsample = rng() % 2;
    CHECK(build_trunet<float>(c, 1, false).summary().parameter_count == trunet_count(c));

    ModelConfig u = small_unet(32, {}, classes(rng));
    for (int l = 0; l < 5; ++l) u.unet_channels.push_back(4 * (1 + rng() % 4));
    u.unet_res_units = depth(rng);
    CHECK(build_res_unet<float>(u, 1, false).summary().parameter_count == res_unet_count(u));
  }
  ModelConfig full_unet = ModelConfig::full_scale();
  CHECK(build_res_unet<float>(full_unet, 0, false).summary().parameter_count == res_unet_count(full_unet));
}

TEST_CASE("toy TRUNet forward contract") {
  std::mt19937_64 rng(5);
  auto model = build_trunet<float>(ModelConfig::toy(), 42);
  auto x = random_tensor<float>({1, 1, 32, 32, 32}, rng);
  NoGradGuard no_grad;
  auto y = model.forward(x);
  CHECK(y.shape() == Shape{1, 6, 32, 32, 32});
  const int64_t v = 32 * 32 * 32;
  for (int64_t i = 0; i < v; i += 97) {
    double s = 0;
    for (int c = 0; c < 6; ++c) s += y.data()[c * v + i];
    CHECK(std::abs(s - 1.0) < 1e-5);
  }
  // determinism, including across separately built models
  auto y2 = model.forward(x);
  auto other = build_trunet<float>(ModelConfig::toy(), 42);
  auto y3 = other.forward(x);
  CHECK(std::equal(y.data().begin(), y.data().end(), y2.data().begin()));
  CHECK(std::equal(y.data().begin(), y.data().end(), y3.data().begin()));

  ModelConfig hu = ModelConfig::toy();
  hu.head_upsample = true;
  CHECK(build_trunet<float>(hu, 1).forward(x).shape() == Shape{1, 6, 32, 32, 32});
}

TEST_CASE("res_unet and localizer forward contract") {
  std::mt19937_64 rng(6);
  auto x = random_tensor<float>({1, 1, 32, 32, 32}, rng);
  NoGradGuard no_grad;
  auto unet = build_res_unet<float>(small_unet(32, {16, 32, 64, 128, 256}, 6), 3);
  CHECK(unet.forward(x).shape() == Shape{1, 6, 32, 32, 32});

  auto loc = build_localizer<float>(small_unet(32, {4, 8, 8, 8, 8}, 6), 3);
  CHECK(loc.config().num_classes == 2);
  auto p = loc.forward(x);
  CHECK(p.shape() == Shape{1, 2, 32, 32, 32});
  for (int64_t i = 0; i < p.numel() / 2; i += 31) CHECK(std::abs(p.data()[i] + p.data()[i + p.numel() / 2] - 1.0) < 1e-6);
}

TEST_CASE("res_unet with zeroed residual branches reduces to its shortcut paths") {
  std::mt19937_64 rng(7);
  auto model = build_res_unet<float>(small_unet(16, {2, 4, 4, 4, 4}, 3), 8);
  const auto* net = model.res_unet();
  REQUIRE(net);
  auto zero_branches = [](const ResidualUnit<float>& u) {
    for (const auto& st : u.stages) {
      BasicTensor<float> w = st.conv.weight, b = st.conv.bias;
      for (auto& v : w.mutable_data()) v = 0;
      for (auto& v : b.mutable_data()) v = 0;
    }
  };
  for (const auto& u : net->down) zero_branches(u);
  zero_branches(net->bottom);
  for (const auto& up : net->up) zero_branches(up.unit);

  NoGradGuard no_grad;
  auto x = random_tensor<float>({1, 1, 16, 16, 16}, rng);
  std::vector<BasicTensor<float>> feats;
  auto h = x;
  for (const auto& u : net->down) {
    h = (*u.shortcut)(h);
    feats.push_back(h);
  }
  if (net->bottom.shortcut) h = (*net->bottom.shortcut)(h);
  for (size_t i = net->up.size(); i-- > 0;) {
    const auto& up = net->up[i];
    h = ops::concat<float>({feats[i], h}, 1);
    h = ops::prelu(up.norm(up.conv(ops::trilinear_upsample(h, 2))), up.alpha);
  }
  auto expected = ops::softmax(h, 1);
  auto y = model.forward(x);
  double worst = 0;
  for (int64_t i = 0; i < y.numel(); ++i) worst = std::max(worst, double(std::abs(y.data()[i] - expected.data()[i])));
  CHECK(worst < 1e-6);
}

TEST_CASE("res_unet gradient check at 16^3") {
  std::mt19937_64 rng(8);
  ModelConfig c = small_unet(16, {2, 3, 4, 4}, 3);
  auto model = build_res_unet<double>(c, 9);
  auto x = random_tensor<double>({1, 1, 16, 16, 16}, rng);
  auto w = random_tensor<double>({1, 3, 16, 16, 16}, rng);
  // Biases that feed a normalization have an exactly zero gradient.
  std::vector<TensorD> leaves{x};
  for (const auto& e : model.parameters().entries()) {
    const bool before_norm = e.name.size() > 10 && e.name.ends_with(".conv.bias") && e.name != "unet.up0.unit.sub0.conv.bias";
    if (!before_norm) leaves.push_back(e.tensor);
  }
  // A whole network accumulates more roundoff than a single block, so the
  // step is 1e-5 here: small enough to stay clear of PReLU kinks.
  auto r = finite_diff_check([&] { return weighted_sum(model.forward(x), w); }, leaves, 1e-5, 1e-4);
  INFO("max_rel_err=" << r.max_rel_err << " checked=" << r.checked);
  CHECK(r.pass);
}

TEST_CASE("checkpoint round trip is bit exact") {
  std::mt19937_64 rng(10);
  auto dir = scratch_dir();
  auto model = build_trunet<float>(ModelConfig::toy(), 77);
  AdamState<float> adam(model.parameters());
  adam.step = 3;
  adam.m[0][0] = 0.5f;
  adam.v[1][0] = 0.25f;
  save_checkpoint(model, (dir / "a.ckpt").string(), 12, &adam, {{"note", "x"}});

  auto loaded = load_checkpoint((dir / "a.ckpt").string());
  CHECK(loaded.step == 12);
  CHECK(loaded.extra["note"] == "x");
  REQUIRE(loaded.adam.has_value());
  CHECK(loaded.adam->step == 3);
  CHECK(loaded.adam->m == adam.m);
  CHECK(loaded.adam->v == adam.v);
  CHECK(flatten_parameters(loaded.model) == flatten_parameters(model));
  CHECK(nlohmann::json(loaded.model.config()) == nlohmann::json(model.config()));

  const auto& a = model.parameters().entries();
  const auto& b = loaded.model.parameters().entries();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].name == b[i].name);
  CHECK(a.front().name == "encoder.stem.conv.weight");
  CHECK(a.back().name == "head.conv.bias");

  NoGradGuard no_grad;
  auto probe = random_tensor<float>({1, 1, 32, 32, 32}, rng);
  auto y1 = model.forward(probe), y2 = loaded.model.forward(probe);
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));

  // saving the loaded model reproduces the file byte for byte
  save_checkpoint(loaded.model, (dir / "b.ckpt").string(), 12, &*loaded.adam, loaded.extra);
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
}

TEST_CASE("checkpoint load errors") {
  auto dir = scratch_dir();
  auto model = build_res_unet<float>(small_unet(16, {2, 2, 2, 2, 2}, 3), 1);
  const auto good = dir / "good.ckpt";
  save_checkpoint(model, good.string());
  const std::string bytes = slurp(good);

  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), IoError);

  std::string bad = bytes;
  bad[0] = 'X';
  spit(dir / "magic.ckpt", bad);
  CHECK_THROWS_AS(load_checkpoint((dir / "magic.ckpt").string()), FormatError);

  spit(dir / "short.ckpt", bytes.substr(0, bytes.size() - 10));
  try {
    load_checkpoint((dir / "short.ckpt").string());
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("payload") != std::string::npos);
  }

  std::string renamed = bytes;
  const auto pos = renamed.find("unet.down0.sub0.conv.weight");
  REQUIRE(pos != std::string::npos);
  renamed[pos + 5] = 'X';
  spit(dir / "renamed.ckpt", renamed);
  try {
    load_checkpoint((dir / "renamed.ckpt").string());
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("unet.Xown0.sub0.conv.weight") != std::string::npos);
  }
}
