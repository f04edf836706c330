#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "trunet/error.hpp"
#include "trunet/gradcheck.hpp"
#include "trunet/layers.hpp"
#include "trunet/ops.hpp"

using namespace trunet;
using trunet::testing::random_tensor;
using trunet::testing::weighted_sum;

namespace {

template <typename T>
void fill(BasicTensor<T>& t, double value) {
  for (auto& v : t.mutable_data()) v = static_cast<T>(value);
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
  return m;
}

// Gathers rows of [N, T, E] in the order given by perm.
template <typename T>
BasicTensor<T> permute_tokens(const BasicTensor<T>& x, const std::vector<int64_t>& perm) {
  const int64_t n = x.dim(0), t = x.dim(1), e = x.dim(2);
  std::vector<T> out(static_cast<size_t>(x.numel()));
  for (int64_t b = 0; b < n; ++b)
    for (int64_t i = 0; i < t; ++i)
      for (int64_t k = 0; k < e; ++k) out[(b * t + i) * e + k] = x.data()[(b * t + perm[i]) * e + k];
  return BasicTensor<T>(x.shape(), std::move(out));
}

// Per-layer count from first principles: Q/K/V/out (E² + E each), two layer
// norms (2E each), fc1 (E·M + M), fc2 (M·E + E).
int64_t closed_form_vit_layer(int64_t e, int64_t m) { return 4 * e * e + 2 * e * m + 9 * e + m; }

GradCheckReport check(const std::function<TensorD()>& f, const std::vector<TensorD>& leaves) {
  return finite_diff_check(f, leaves, 1e-6, 1e-4);
}

// The key bias shifts every score of a query by the same amount, which the
// softmax removes, so its exact gradient is zero.
std::vector<TensorD> trainable_except_key_bias(const ParameterSet<double>& params, const TensorD& x) {
  std::vector<TensorD> leaves{x};
  for (const auto& e : params.entries()) {
    if (e.name.find(".key.bias") == std::string::npos) leaves.push_back(e.tensor);
  }
  return leaves;
}

}  // namespace

TEST_CASE("norm group rule") {
  CHECK(norm_groups(8) == 8);
  CHECK(norm_groups(32) == 32);
  CHECK(norm_groups(64) == 32);
  CHECK(norm_groups(48) == 16);
  CHECK(norm_groups(1) == 1);
}

TEST_CASE("parameter set declares names in order and rejects duplicates") {
  ParameterSet<float> params(1);
  params.add("a", {2, 3}, Init::zeros);
  params.add("b", {4}, Init::ones);
  CHECK(params.entries()[0].name == "a");
  CHECK(params.entries()[1].name == "b");
  CHECK(params.parameter_count() == 10);
  CHECK_THROWS_AS(params.add("a", {1}, Init::zeros), ConfigError);

  ParameterSet<float> shapes(1, false);
  auto t = shapes.add("w", {1000, 1000}, Init::he_normal, 1000);
  CHECK_FALSE(t.defined());
  CHECK(shapes.parameter_count() == 1000000);
}

TEST_CASE("float and double parameter sets draw identical initial values") {
  ParameterSet<float> pf(7);
  ParameterSet<double> pd(7);
  auto a = pf.add("w", {5, 3}, Init::he_normal, 3);
  auto b = pd.add("w", {5, 3}, Init::he_normal, 3);
  for (int i = 0; i < 15; ++i) CHECK(a.data()[i] == static_cast<float>(b.data()[i]));
}

TEST_CASE("bottleneck shapes and errors") {
  std::mt19937_64 rng(1);
  ParameterSet<float> params(3);
  Bottleneck<float> down(params, "b", {8, 4, 16, 2});
  CHECK(down.spec.has_projection());
  auto y = down(random_tensor<float>({1, 8, 8, 8, 8}, rng));
  CHECK(y.shape() == Shape{1, 16, 4, 4, 4});

  Bottleneck<float> same(params, "s", {16, 4, 16, 1});
  CHECK_FALSE(same.spec.has_projection());
  CHECK_THROWS_AS(same(random_tensor<float>({1, 8, 4, 4, 4}, rng)), ConfigError);
  CHECK_THROWS_AS(Bottleneck<float>(params, "bad", {8, 4, 12, 1}), ConfigError);
}

TEST_CASE("zeroed residual branches make bottleneck and vit layer identities") {
  std::mt19937_64 rng(2);
  ParameterSet<float> params(5);
  Bottleneck<float> unit(params, "b", {16, 4, 16, 1});
  fill(unit.conv3.weight, 0.0);
  auto x = random_tensor<float>({1, 16, 4, 4, 4}, rng);
  CHECK(max_abs_diff(unit(x), x) == 0.0);

  // With a projection the output is the projected pre-activation.
  Bottleneck<float> proj(params, "p", {8, 4, 16, 2});
  fill(proj.conv3.weight, 0.0);
  auto x8 = random_tensor<float>({1, 8, 4, 4, 4}, rng);
  auto expected = proj.projection(ops::relu(proj.norm1(x8)));
  CHECK(max_abs_diff(proj(x8), expected) == 0.0);

  ViTSpec spec{16, 32, 4, 1, 6};
  VitLayer<float> layer(params, "l", spec);
  fill(layer.attention.out.weight, 0.0);
  fill(layer.fc2.weight, 0.0);
  auto tokens = random_tensor<float>({2, 6, 16}, rng);
  CHECK(max_abs_diff(layer(tokens), tokens) == 0.0);
}

TEST_CASE("encoder at toy scale") {
  std::mt19937_64 rng(3);
  ParameterSet<float> params(11);
  EncoderSpec spec{1, 8, {32, 64, 128}, {1, 1, 2}};
  ResNetEncoder<float> encoder(params, "encoder", spec);
  CHECK(encoder.unit_count() == 4);
  auto out = encoder(random_tensor<float>({1, 1, 32, 32, 32}, rng));
  CHECK(out.features.shape() == Shape{1, 128, 2, 2, 2});
  CHECK(out.skips.features[0].shape() == Shape{1, 8, 16, 16, 16});
  CHECK(out.skips.features[1].shape() == Shape{1, 32, 8, 8, 8});
  CHECK(out.skips.features[2].shape() == Shape{1, 64, 4, 4, 4});
  CHECK_THROWS_AS(encoder(random_tensor<float>({1, 1, 40, 40, 40}, rng)), ConfigError);
}

TEST_CASE("encoder downsampling is 16 with halving skips for several extents") {
  std::mt19937_64 rng(4);
  ParameterSet<float> params(12);
  ResNetEncoder<float> encoder(params, "e", EncoderSpec{1, 4, {8, 8, 16}, {1, 1, 1}});
  for (int64_t s : {16, 32, 48}) {
    auto out = encoder(random_tensor<float>({1, 1, s, s, s}, rng));
    CHECK(out.features.dim(2) == s / 16);
    for (int k = 0; k < 3; ++k) CHECK(out.skips.features[k].dim(2) == s >> (k + 1));
  }
}

TEST_CASE("patch embedding token layout") {
  std::mt19937_64 rng(5);
  ParameterSet<float> params(13);
  ViTSpec spec{16, 32, 4, 1, 8};
  PatchEmbed<float> embed(params, "embed", 12, spec);
  auto grid = random_tensor<float>({1, 12, 2, 2, 2}, rng);
  auto tokens = embed.embed(grid);
  CHECK(tokens.shape() == Shape{1, 8, 16});
  CHECK(max_abs_diff(embed.add_position(tokens), tokens) == 0.0);

  // Token t is the projection of grid voxel t in row-major order.
  auto proj = embed.projection(grid);
  for (int64_t t = 0; t < 8; ++t)
    for (int64_t e = 0; e < 16; ++e) CHECK(tokens.data()[t * 16 + e] == proj.data()[e * 8 + t]);

  ViTSpec random_pos = spec;
  random_pos.pos_embedding = PosEmbedding::random_init_learnable_1d;
  PatchEmbed<float> embed2(params, "embed2", 12, random_pos);
  double sq = 0.0;
  for (float v : embed2.position.data()) sq += double(v) * v;
  const double sd = std::sqrt(sq / embed2.position.numel());
  CHECK(sd > 0.01);
  CHECK(sd < 0.04);
}

TEST_CASE("attention examples") {
  std::mt19937_64 rng(6);
  ParameterSet<float> params(17);
  MultiHeadAttention<float> attn(params, "attn", 8, 2);

  auto single = random_tensor<float>({1, 1, 8}, rng);
  auto expected = attn.out(attn.value(single));
  CHECK(max_abs_diff(attn(single), expected) < 1e-6);

  auto row = random_tensor<float>({1, 1, 8}, rng);
  auto same = ops::concat<float>({row, row, row, row}, 1);
  auto y = attn(same);
  for (int t = 1; t < 4; ++t)
    for (int e = 0; e < 8; ++e) CHECK(y.data()[t * 8 + e] == doctest::Approx(y.data()[e]).epsilon(1e-6));

  CHECK_THROWS_AS(MultiHeadAttention<float>(params, "bad", 10, 3), ConfigError);
}

TEST_CASE("attention is permutation equivariant") {
  std::mt19937_64 rng(7);
  ParameterSet<float> params(19);
  MultiHeadAttention<float> attn(params, "attn", 16, 4);
  auto x = random_tensor<float>({2, 7, 16}, rng);
  auto y = attn(x);
  std::vector<int64_t> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    CHECK(max_abs_diff(attn(permute_tokens(x, perm)), permute_tokens(y, perm)) < 1e-5);
  }
}

TEST_CASE("ViT encoder with zero position is permutation equivariant") {
  std::mt19937_64 rng(8);
  ParameterSet<float> params(23);
  ViTSpec spec{64, 128, 4, 2, 8};
  VitEncoder<float> vit(params, "vit", 128, spec);
  auto tokens = random_tensor<float>({1, 8, 64}, rng);
  auto y = vit.encode(tokens);
  std::vector<int64_t> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    CHECK(max_abs_diff(vit.encode(permute_tokens(tokens, perm)), permute_tokens(y, perm)) < 1e-5);
  }
}

TEST_CASE("ViT parameter count matches the closed form") {
  for (auto [e, m] : {std::pair<int64_t, int64_t>{8, 16}, {64, 128}, {768, 3072}}) {
    CHECK(VitLayer<float>::parameter_count(ViTSpec{e, m, 4, 1, 1}) == closed_form_vit_layer(e, m));
  }
  ParameterSet<float> shapes(0, false);
  ViTSpec full{768, 3072, 12, 12, 2744};
  VitEncoder<float> vit(shapes, "vit", 1024, full);
  const int64_t expected = 12 * closed_form_vit_layer(768, 3072) + (1024 * 768 + 768) + 2744 * 768 + 2 * 768;
  CHECK(shapes.parameter_count() == expected);
  CHECK(vit.layers.size() == 12);
}

TEST_CASE("decoder stage and head") {
  std::mt19937_64 rng(9);
  ParameterSet<float> params(29);
  DecoderStage<float> plain(params, "d", 4, 0, 3);
  CHECK(plain(random_tensor<float>({1, 4, 16, 16, 16}, rng)).shape() == Shape{1, 3, 32, 32, 32});

  DecoderStage<float> with_skip(params, "s", 4, 2, 3);
  auto x = random_tensor<float>({1, 4, 2, 2, 2}, rng);
  CHECK(with_skip(x, random_tensor<float>({1, 2, 4, 4, 4}, rng)).shape() == Shape{1, 3, 4, 4, 4});
  CHECK_THROWS_AS(with_skip(x, random_tensor<float>({1, 2, 6, 6, 6}, rng)), ConfigError);
  CHECK_THROWS_AS(with_skip(x), ConfigError);

  // A centre-tap kernel on a constant volume stays constant before the norm.
  DecoderStage<float> centre(params, "c", 1, 0, 1);
  fill(centre.conv.weight, 0.0);
  centre.conv.weight.mutable_data()[13] = 1.0f;
  auto pre = centre.conv(ops::trilinear_upsample(BasicTensor<float>::full({1, 1, 3, 3, 3}, 2.5f), 2));
  for (float v : pre.data()) CHECK(v == doctest::Approx(2.5f));

  SegmentationHead<float> head(params, "h", 3, 6);
  auto probs = head(random_tensor<float>({1, 3, 4, 4, 4}, rng));
  CHECK(probs.shape() == Shape{1, 6, 4, 4, 4});
  for (int64_t v = 0; v < 64; ++v) {
    double s = 0.0;
    for (int64_t c = 0; c < 6; ++c) s += probs.data()[c * 64 + v];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  SegmentationHead<float> up(params, "hu", 3, 2, true);
  CHECK(up(random_tensor<float>({1, 3, 4, 4, 4}, rng)).shape() == Shape{1, 2, 8, 8, 8});
}

TEST_CASE("argmax of uniform scores is the lowest class") {
  auto probs = ops::softmax(BasicTensor<float>::zeros({1, 6, 2, 2, 2}), 1);
  for (int32_t label : ops::argmax_channels(probs)) CHECK(label == 0);
  BasicTensor<float> tie({1, 3, 1, 1, 1}, {0.2f, 0.4f, 0.4f});
  CHECK(ops::argmax_channels(tie)[0] == 1);
}

TEST_CASE("residual unit") {
  std::mt19937_64 rng(10);
  ParameterSet<float> params(31);
  ResidualUnit<float> down(params, "r", 2, 4, 2, 2);
  CHECK(down.shortcut.has_value());
  CHECK(down(random_tensor<float>({1, 2, 8, 8, 8}, rng)).shape() == Shape{1, 4, 4, 4, 4});

  ResidualUnit<float> same(params, "i", 4, 4, 1, 2);
  CHECK_FALSE(same.shortcut.has_value());
  fill(same.stages.back().conv.weight, 0.0);
  fill(same.stages.back().conv.bias, 0.0);
  // final stage: prelu(norm(0)) with beta = 0 is zero, so the unit is identity
  auto x = random_tensor<float>({1, 4, 4, 4, 4}, rng);
  CHECK(max_abs_diff(same(x), x) == 0.0);
  CHECK(same.stages[0].alpha.data()[0] == 0.25f);

  ResidualUnit<float> top(params, "t", 4, 2, 1, 1, true);
  CHECK(top.stages[0].conv_only);
  CHECK_FALSE(top.stages[0].norm.gamma.defined());
}

TEST_CASE("composite blocks pass double-precision gradient checks") {
  std::mt19937_64 rng(2025);

  SUBCASE("bottleneck") {
    ParameterSet<double> params(41);
    Bottleneck<double> unit(params, "b", {4, 2, 8, 2});
    auto x = random_tensor<double>({1, 4, 4, 4, 4}, rng);
    auto w = random_tensor<double>({1, 8, 2, 2, 2}, rng);
    std::vector<TensorD> leaves{x};
    for (auto& t : params.tensors()) leaves.push_back(t);
    auto r = check([&] { return weighted_sum(unit(x), w); }, leaves);
    INFO("max_rel_err=" << r.max_rel_err);
    CHECK(r.pass);
  }
  SUBCASE("identity bottleneck") {
    ParameterSet<double> params(42);
    Bottleneck<double> unit(params, "b", {8, 2, 8, 1});
    auto x = random_tensor<double>({1, 8, 3, 3, 3}, rng);
    auto w = random_tensor<double>({1, 8, 3, 3, 3}, rng);
    auto r = check([&] { return weighted_sum(unit(x), w); }, {x, unit.conv1.weight, unit.conv3.weight});
    INFO("max_rel_err=" << r.max_rel_err);
    CHECK(r.pass);
  }
  SUBCASE("attention") {
    ParameterSet<double> params(43);
    MultiHeadAttention<double> attn(params, "a", 8, 2);
    auto x = random_tensor<double>({1, 4, 8}, rng);
    auto w = random_tensor<double>({1, 4, 8}, rng);
    auto r = check([&] { return weighted_sum(attn(x), w); }, trainable_except_key_bias(params, x));
    INFO("max_rel_err=" << r.max_rel_err);
    CHECK(r.pass);
  }
  SUBCASE("vit layer E=8 T=4") {
    ParameterSet<double> params(44);
    VitLayer<double> layer(params, "l", ViTSpec{8, 16, 2, 1, 4});
    auto x = random_tensor<double>({1, 4, 8}, rng);
    auto w = random_tensor<double>({1, 4, 8}, rng);
    auto r = check([&] { return weighted_sum(layer(x), w); }, trainable_except_key_bias(params, x));
    INFO("max_rel_err=" << r.max_rel_err);
    CHECK(r.pass);
  }
  SUBCASE("decoder stage") {
    ParameterSet<double> params(45);
    DecoderStage<double> stage(params, "d", 3, 2, 4);
    auto x = random_tensor<double>({1, 3, 2, 2, 2}, rng);
    auto skip = random_tensor<double>({1, 2, 4, 4, 4}, rng);
    auto w = random_tensor<double>({1, 4, 4, 4, 4}, rng);
    // The conv bias is cancelled exactly by the following norm, so its true
    // gradient is zero and a relative comparison is meaningless.
    auto r = check([&] { return weighted_sum(stage(x, skip), w); },
                   {x, skip, stage.conv.weight, stage.norm.gamma, stage.norm.beta});
    INFO("max_rel_err=" << r.max_rel_err);
    CHECK(r.pass);
  }
  SUBCASE("segmentation head") {
    ParameterSet<double> params(46);
    SegmentationHead<double> head(params, "h", 3, 3, true);
    auto x = random_tensor<double>({1, 3, 2, 2, 2}, rng);
    auto w = random_tensor<double>({1, 3, 4, 4, 4}, rng);
    auto r = check([&] { return weighted_sum(head(x), w); }, {x, head.conv.weight, head.conv.bias});
    INFO("max_rel_err=" << r.max_rel_err);
    CHECK(r.pass);
  }
  SUBCASE("residual unit") {
    ParameterSet<double> params(47);
    ResidualUnit<double> unit(params, "r", 2, 3, 2, 2);
    auto x = random_tensor<double>({1, 2, 4, 4, 4}, rng);
    auto w = random_tensor<double>({1, 3, 2, 2, 2}, rng);
    std::vector<TensorD> leaves{x, unit.stages[1].conv.weight, unit.stages[1].alpha, unit.shortcut->weight,
                                unit.shortcut->bias};
    auto r = check([&] { return weighted_sum(unit(x), w); }, leaves);
    INFO("max_rel_err=" << r.max_rel_err);
    CHECK(r.pass);
  }
}
