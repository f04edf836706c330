#include "trunet/gradcheck_suite.hpp"

#include <chrono>
#include <functional>
#include <random>

#include "trunet/error.hpp"
#include "trunet/layers.hpp"
#include "trunet/ops.hpp"
#include "trunet/training.hpp"

namespace trunet {

namespace {

constexpr double kEps = 1e-6;
constexpr double kTol = 1e-4;

struct Case {
  const char* name;
  const char* kind;
  std::function<GradCheckReport(std::mt19937_64&)> run;
};

TensorD random(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return TensorD(std::move(shape), std::move(v));
}

// A fixed random weighting turns a tensor output into a scalar.
TensorD weighted(const TensorD& y, const TensorD& w) { return ops::sum(ops::mul(y, w)); }

GradCheckReport check_output(std::mt19937_64& rng, std::vector<TensorD> leaves, const std::function<TensorD()>& f) {
  TensorD probe;
  {
    NoGradGuard g;
    probe = f();
  }
  auto w = random(probe.shape(), rng);
  return finite_diff_check([&] { return weighted(f(), w); }, std::move(leaves), kEps, kTol);
}

int64_t extent(std::mt19937_64& rng, int64_t lo, int64_t hi) { return std::uniform_int_distribution<int64_t>(lo, hi)(rng); }

// Parameters minus the ones whose exact gradient is zero: conv biases that
// feed a normalization and the attention key bias (softmax over keys
// cancels a per-query shift).
std::vector<TensorD> trainable(const ParameterSet<double>& params, const std::vector<std::string>& zero_gradient) {
  std::vector<TensorD> out;
  for (const auto& e : params.entries()) {
    bool skip = false;
    for (const auto& z : zero_gradient) skip = skip || e.name.find(z) != std::string::npos;
    if (!skip) out.push_back(e.tensor);
  }
  return out;
}

const std::vector<Case>& registry() {
  static const std::vector<Case> cases = {
      {"conv3d", "primitive",
       [](std::mt19937_64& rng) {
         const Shape s{1, 2, extent(rng, 2, 4), extent(rng, 2, 4), extent(rng, 2, 4)};
         auto x = random(s, rng), k = random({3, 2, 3, 3, 3}, rng), b = random({3}, rng);
         return check_output(rng, {x, k, b}, [=] { return ops::conv3d(x, k, b, 1, 1); });
       }},
      {"conv3d_stride2", "primitive",
       [](std::mt19937_64& rng) {
         const Shape s{1, 2, extent(rng, 3, 5), extent(rng, 3, 5), extent(rng, 3, 5)};
         auto x = random(s, rng), k = random({2, 2, 3, 3, 3}, rng), b = random({2}, rng);
         return check_output(rng, {x, k, b}, [=] { return ops::conv3d(x, k, b, 2, 1); });
       }},
      {"trilinear_upsample", "primitive",
       [](std::mt19937_64& rng) {
         auto x = random({1, 2, extent(rng, 1, 3), extent(rng, 1, 3), extent(rng, 1, 3)}, rng);
         return check_output(rng, {x}, [=] { return ops::trilinear_upsample(x, 2); });
       }},
      {"matmul", "primitive",
       [](std::mt19937_64& rng) {
         const int64_t m = extent(rng, 1, 4), k = extent(rng, 1, 4), n = extent(rng, 1, 4);
         auto a = random({2, m, k}, rng), b = random({2, k, n}, rng);
         return check_output(rng, {a, b}, [=] { return ops::matmul(a, b); });
       }},
      {"linear", "primitive",
       [](std::mt19937_64& rng) {
         auto x = random({2, extent(rng, 1, 4), 3}, rng), w = random({3, 4}, rng), b = random({4}, rng);
         return check_output(rng, {x, w, b}, [=] { return ops::linear(x, w, b); });
       }},
      {"softmax", "primitive",
       [](std::mt19937_64& rng) {
         auto x = random({2, extent(rng, 2, 5), 3}, rng, -2, 2);
         return check_output(rng, {x}, [=] { return ops::softmax(x, 1); });
       }},
      {"group_norm", "primitive",
       [](std::mt19937_64& rng) {
         auto x = random({1, 4, extent(rng, 2, 3), 2, 2}, rng);
         auto g = random({4}, rng, 0.5, 1.5), b = random({4}, rng);
         return check_output(rng, {x, g, b}, [=] { return ops::group_norm(x, 2, g, b); });
       }},
      {"layer_norm", "primitive",
       [](std::mt19937_64& rng) {
         auto x = random({extent(rng, 2, 5), 6}, rng);
         auto g = random({6}, rng, 0.5, 1.5), b = random({6}, rng);
         return check_output(rng, {x, g, b}, [=] { return ops::layer_norm(x, g, b); });
       }},
      {"relu", "primitive",
       [](std::mt19937_64& rng) {
         auto x = random({2, 3, 4}, rng);
         return check_output(rng, {x}, [=] { return ops::relu(x); });
       }},
      {"prelu", "primitive",
       [](std::mt19937_64& rng) {
         auto x = random({1, 3, 2, 2, 2}, rng), a = random({3}, rng, 0.1, 0.4);
         return check_output(rng, {x, a}, [=] { return ops::prelu(x, a); });
       }},
      {"gelu", "primitive",
       [](std::mt19937_64& rng) {
         auto x = random({2, 3, 4}, rng, -3, 3);
         return check_output(rng, {x}, [=] { return ops::gelu(x); });
       }},
      {"add", "primitive",
       [](std::mt19937_64& rng) {
         auto a = random({2, 3, 4}, rng), b = random({2, 3, 4}, rng);
         return check_output(rng, {a, b}, [=] { return ops::add(a, b); });
       }},
      {"mul", "primitive",
       [](std::mt19937_64& rng) {
         auto a = random({2, 3, 4}, rng), b = random({2, 3, 4}, rng);
         return check_output(rng, {a, b}, [=] { return ops::mul(a, b); });
       }},
      {"scale", "primitive",
       [](std::mt19937_64& rng) {
         auto a = random({3, 4}, rng);
         return check_output(rng, {a}, [=] { return ops::scale(a, -1.7); });
       }},
      {"concat", "primitive",
       [](std::mt19937_64& rng) {
         auto a = random({1, 2, 2, 3}, rng), b = random({1, 3, 2, 3}, rng);
         return check_output(rng, {a, b}, [=] { return ops::concat<double>({a, b}, 1); });
       }},
      {"maxpool3d", "primitive",
       [](std::mt19937_64& rng) {
         auto x = random({1, 2, 4, 4, 4}, rng);
         return check_output(rng, {x}, [=] { return ops::maxpool3d(x, 3, 2, 1); });
       }},
      {"reshape", "primitive",
       [](std::mt19937_64& rng) {
         auto x = random({2, 3, 4}, rng);
         return check_output(rng, {x}, [=] { return ops::reshape(x, {4, 6}); });
       }},
      {"permute", "primitive",
       [](std::mt19937_64& rng) {
         auto x = random({2, 3, 4}, rng);
         return check_output(rng, {x}, [=] { return ops::permute(x, {2, 0, 1}); });
       }},
      {"sum", "primitive",
       [](std::mt19937_64& rng) {
         auto x = random({3, 5}, rng);
         return finite_diff_check([=] { return ops::sum(x); }, {x}, kEps, kTol);
       }},
      {"mean", "primitive",
       [](std::mt19937_64& rng) {
         auto x = random({3, 5}, rng);
         return finite_diff_check([=] { return ops::mean(x); }, {x}, kEps, kTol);
       }},
      {"bottleneck", "block",
       [](std::mt19937_64& rng) {
         ParameterSet<double> params(rng());
         Bottleneck<double> unit(params, "b", {4, 2, 8, 2});
         auto x = random({1, 4, 4, 4, 4}, rng);
         auto leaves = trainable(params, {});
         leaves.push_back(x);
         return check_output(rng, leaves, [&] { return unit(x); });
       }},
      {"patch_embed", "block",
       [](std::mt19937_64& rng) {
         ParameterSet<double> params(rng());
         ViTSpec spec{8, 16, 2, 1, 8, PosEmbedding::random_init_learnable_1d};
         PatchEmbed<double> embed(params, "e", 3, spec);
         auto grid = random({1, 3, 2, 2, 2}, rng);
         auto leaves = trainable(params, {});
         leaves.push_back(grid);
         return check_output(rng, leaves, [&] { return embed.add_position(embed.embed(grid)); });
       }},
      {"attention", "block",
       [](std::mt19937_64& rng) {
         ParameterSet<double> params(rng());
         MultiHeadAttention<double> attn(params, "a", 8, 2);
         auto x = random({1, extent(rng, 2, 5), 8}, rng);
         auto leaves = trainable(params, {".key.bias"});
         leaves.push_back(x);
         return check_output(rng, leaves, [&] { return attn(x); });
       }},
      {"vit_layer", "block",
       [](std::mt19937_64& rng) {
         ParameterSet<double> params(rng());
         VitLayer<double> layer(params, "l", ViTSpec{8, 16, 2, 1, 4});
         auto x = random({1, 4, 8}, rng);
         auto leaves = trainable(params, {".key.bias"});
         leaves.push_back(x);
         return check_output(rng, leaves, [&] { return layer(x); });
       }},
      {"decoder_stage", "block",
       [](std::mt19937_64& rng) {
         ParameterSet<double> params(rng());
         DecoderStage<double> stage(params, "d", 3, 2, 4);
         auto x = random({1, 3, 2, 2, 2}, rng), skip = random({1, 2, 4, 4, 4}, rng);
         auto leaves = trainable(params, {".conv.bias"});
         leaves.push_back(x);
         leaves.push_back(skip);
         return check_output(rng, leaves, [&] { return stage(x, skip); });
       }},
      {"segmentation_head", "block",
       [](std::mt19937_64& rng) {
         ParameterSet<double> params(rng());
         SegmentationHead<double> head(params, "h", 3, 3, true);
         auto x = random({1, 3, 2, 2, 2}, rng);
         auto leaves = trainable(params, {});
         leaves.push_back(x);
         return check_output(rng, leaves, [&] { return head(x); });
       }},
      {"residual_unit", "block",
       [](std::mt19937_64& rng) {
         ParameterSet<double> params(rng());
         ResidualUnit<double> unit(params, "r", 2, 3, 2, 2);
         auto x = random({1, 2, 4, 4, 4}, rng);
         auto leaves = trainable(params, {".sub0.conv.bias", ".sub1.conv.bias"});
         leaves.push_back(x);
         return check_output(rng, leaves, [&] { return unit(x); });
       }},
      {"dice_ce_loss", "block",
       [](std::mt19937_64& rng) {
         auto logits = random({1, 3, 4, 4, 4}, rng);
         std::vector<uint8_t> labels(64);
         for (auto& l : labels) l = static_cast<uint8_t>(rng() % 3);
         return finite_diff_check([&] { return dice_ce_loss(ops::softmax(logits, 1), labels); }, {logits}, kEps, kTol);
       }},
  };
  return cases;
}

}  // namespace

std::vector<std::string> gradcheck_names() {
  std::vector<std::string> out;
  for (const auto& c : registry()) out.emplace_back(c.name);
  return out;
}

std::vector<GradCheckRow> run_gradcheck_suite(const std::string& only, uint64_t seed) {
  bool found = only.empty();
  for (const auto& c : registry()) found = found || only == c.name;
  if (!found) {
    std::string names;
    for (const auto& n : gradcheck_names()) names += (names.empty() ? "" : ", ") + n;
    throw UsageError("unknown gradcheck op '" + only + "' (known: " + names + ")");
  }
  std::vector<GradCheckRow> rows;
  for (size_t i = 0; i < registry().size(); ++i) {
    const auto& c = registry()[i];
    if (!only.empty() && only != c.name) continue;
    // Each check gets its own stream so --op reproduces the full-suite numbers.
    std::seed_seq seq{seed, static_cast<uint64_t>(i)};
    std::mt19937_64 rng(seq);
    const auto start = std::chrono::steady_clock::now();
    GradCheckRow row{c.name, c.kind, c.run(rng), 0.0};
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rows.push_back(row);
  }
  return rows;
}

}  // namespace trunet
