#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "sfformer/error.hpp"
#include "sfformer/model.hpp"

using namespace sff;
using ad::Tensor;

namespace {

ModelConfig small_config(std::size_t C = 8, std::size_t d = 16, std::size_t layers = 1) {
  ModelConfig c;
  c.cluster_count = C;
  c.token_dim = d;
  c.n_layers = layers;
  c.seed = 42;
  return c;
}

Tensor random_input(ad::Rng& rng, std::size_t B, std::size_t C) {
  std::vector<double> v(B * C);
  for (auto& x : v) x = rng.normal();
  return Tensor::constant({B, C}, v);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<std::vector<double>> param_bytes(const ModelParams& p) {
  std::vector<std::vector<double>> out;
  for (const auto& n : p.named()) out.push_back(values(n.tensor));
  return out;
}

// Shares the primary tokenizer and attention norms with the helper path.
void share_helper(ModelParams& p) {
  p.helper = p.primary;
  for (auto& l : p.layers) {
    l.norm_kv = l.norm_attn;
  }
}

}  // namespace

TEST(InitParams, DeterministicAndSeedDependent) {
  auto cfg = small_config();
  EXPECT_EQ(param_bytes(init_params(cfg)), param_bytes(init_params(cfg)));
  auto other = cfg;
  other.seed = 43;
  EXPECT_NE(param_bytes(init_params(cfg)), param_bytes(init_params(other)));
}

TEST(InitParams, HeVarianceOnLargeWeight) {
  auto cfg = small_config(4, 512, 1);
  const auto p = init_params(cfg);
  const auto w = p.layers[0].query.weight.data();
  ASSERT_EQ(w.size(), 512u * 512u);
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / double(w.size());
  double var = 0.0;
  for (double x : w) var += (x - mean) * (x - mean);
  var /= double(w.size());
  EXPECT_NEAR(var, 2.0 / 512.0, 0.2 * 2.0 / 512.0);
  for (double b : p.layers[0].query.bias.data()) EXPECT_EQ(b, 0.0);
  const double bound = 1.0 / std::sqrt(512.0);
  for (double b : p.primary.bias.data()) EXPECT_LE(std::abs(b), bound);
}

TEST(Config, ValidationAndSerialization) {
  auto cfg = small_config();
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.head_dim(), 2u);
  auto bad = cfg;
  bad.token_dim = 12;
  EXPECT_THROW(bad.validate(), Error);
  bad = cfg;
  bad.dropout_residual = 0.3;
  EXPECT_THROW(bad.validate(), Error);
  cfg.fusion = FusionMode::kCrossFusion;
  cfg.dropout_attn = 0.125;
  const auto back = parse_model_config(write_model_config(cfg));
  EXPECT_EQ(write_model_config(back), write_model_config(cfg));
  EXPECT_EQ(back.fusion, FusionMode::kCrossFusion);
  EXPECT_EQ(back.dropout_attn, 0.125);
}

TEST(Tokenize, ZeroInputGivesBiasAndIsAffine) {
  auto cfg = small_config(5, 16);
  const auto p = init_params(cfg);
  const auto zero = tokenize_stream(Tensor::constant({1, 5}, std::vector<double>(5, 0.0)), p.primary, p.cls);
  ASSERT_EQ(zero.shape(), (ad::Shape{1, 6, 16}));
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(zero.data()[k], p.cls.data()[k]);
  for (std::size_t j = 0; j < 5; ++j) {
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(zero.data()[(j + 1) * 16 + k], p.primary.bias.data()[j * 16 + k]);
  }
  ad::Rng rng(1);
  const auto x = random_input(rng, 3, 5);
  const auto t = tokenize_stream(x, p.primary, p.cls);
  std::vector<double> doubled(values(x));
  for (auto& v : doubled) v *= 2.0;
  const auto t2 = tokenize_stream(Tensor::constant({3, 5}, doubled), p.primary, p.cls);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t j = 0; j < 5; ++j) {
      for (std::size_t k = 0; k < 16; ++k) {
        const double w = p.primary.weight.data()[j * 16 + k], bias = p.primary.bias.data()[j * 16 + k];
        const double xj = x.data()[b * 5 + j];
        const std::size_t at = (b * 6 + j + 1) * 16 + k;
        EXPECT_EQ(t.data()[at], xj * w + bias);
        EXPECT_EQ(t2.data()[at], 2.0 * xj * w + bias);
      }
    }
  }
  EXPECT_THROW((void)tokenize_stream(random_input(rng, 1, 4), p.primary, p.cls), Error);
}

TEST(Attention, RowsSumToOneAndCrossWithSameInputIsSelf) {
  auto cfg = small_config(8, 16);
  const auto p = init_params(cfg);
  ad::Rng rng(2);
  const auto tokens = tokenize_stream(random_input(rng, 4, 8), p.primary, p.cls);
  std::vector<Tensor> probs;
  const auto out = multi_head_attention(tokens, tokens, p.layers[0], cfg, false, rng, &probs);
  ASSERT_EQ(probs.size(), cfg.n_heads);
  for (const auto& pr : probs) {
    const std::size_t n = pr.dim(-1);
    for (std::size_t r = 0; r < pr.size() / n; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < n; ++c) s += pr.data()[r * n + c];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
  const auto copy = Tensor::constant(tokens.shape(), values(tokens));
  EXPECT_EQ(values(multi_head_attention(tokens, copy, p.layers[0], cfg, false, rng)), values(out));
}

TEST(EncoderLayer, ZeroOutputProjectionIsResidualIdentityForAttention) {
  auto cfg = small_config(6, 16);
  auto p = init_params(cfg);
  auto& layer = p.layers[0];
  for (auto& w : layer.output.weight.mutable_data()) w = 0.0;
  for (auto& w : layer.ffn_out.weight.mutable_data()) w = 0.0;
  ad::Rng rng(3);
  const auto q = tokenize_stream(random_input(rng, 2, 6), p.primary, p.cls);
  EXPECT_EQ(values(encoder_layer(q, Tensor(), layer, cfg, false, rng)), values(q));
}

TEST(EncoderLayer, EvalIsDeterministicAndZeroDropoutTrainEqualsEval) {
  auto cfg = small_config(6, 16);
  cfg.dropout_attn = 0.3;
  cfg.dropout_ffn = 0.3;
  cfg.dropout_residual = 0.1;
  const auto p = init_params(cfg);
  ad::Rng rng(4);
  const auto x = random_input(rng, 3, 6);
  EXPECT_EQ(values(forward(p, cfg, x, nullptr, false, rng)), values(forward(p, cfg, x, nullptr, false, rng)));
  auto cfg0 = small_config(6, 16);
  const auto p0 = init_params(cfg0);
  EXPECT_EQ(values(forward(p0, cfg0, x, nullptr, true, rng)), values(forward(p0, cfg0, x, nullptr, false, rng)));
}

TEST(Forward, CrossFusionDegeneratesToBaselineBitForBit) {
  for (std::size_t layers : {1u, 3u}) {
    auto base_cfg = small_config(8, 16, layers);
    auto cross_cfg = base_cfg;
    cross_cfg.fusion = FusionMode::kCrossFusion;
    cross_cfg.helper_evolves = layers > 1;
    auto cross = init_params(cross_cfg);
    share_helper(cross);
    ModelParams base = cross;
    base.helper = {};
    ad::Rng rng(5);
    const auto x = random_input(rng, 5, 8);
    const auto y_base = forward(base, base_cfg, x, nullptr, false, rng);
    const auto y_cross = forward(cross, cross_cfg, x, &x, false, rng);
    EXPECT_EQ(values(y_base), values(y_cross)) << layers << " layers";
  }
}

TEST(Forward, ClsOutputInvariantToClusterPermutation) {
  auto cfg = small_config(8, 16, 2);
  const auto p = init_params(cfg);
  ad::Rng rng(6);
  const auto x = random_input(rng, 3, 8);
  const auto y = values(forward(p, cfg, x, nullptr, false, rng));
  std::vector<std::size_t> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    ModelParams q = init_params(cfg);
    std::vector<double> xp(24);
    for (std::size_t j = 0; j < 8; ++j) {
      for (std::size_t b = 0; b < 3; ++b) xp[b * 8 + j] = x.data()[b * 8 + perm[j]];
      for (std::size_t k = 0; k < 16; ++k) {
        q.primary.weight.mutable_data()[j * 16 + k] = p.primary.weight.data()[perm[j] * 16 + k];
        q.primary.bias.mutable_data()[j * 16 + k] = p.primary.bias.data()[perm[j] * 16 + k];
      }
    }
    const auto yp = values(forward(q, cfg, Tensor::constant({3, 8}, xp), nullptr, false, rng));
    for (std::size_t b = 0; b < 3; ++b) EXPECT_NEAR(yp[b], y[b], 1e-12 * std::max(1.0, std::abs(y[b])));
  }
}

TEST(Forward, HelperRequirementIsEnforced) {
  auto cfg = small_config();
  const auto p = init_params(cfg);
  ad::Rng rng(7);
  const auto x = random_input(rng, 2, 8);
  EXPECT_THROW((void)forward(p, cfg, x, &x, false, rng), Error);
  cfg.fusion = FusionMode::kCrossFusion;
  const auto pc = init_params(cfg);
  EXPECT_THROW((void)forward(pc, cfg, x, nullptr, false, rng), Error);
}

TEST(Forward, FiniteAcrossManySeeds) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    auto cfg = small_config(6, 16, 1 + seed % 2);
    cfg.seed = seed;
    cfg.fusion = seed % 3 == 0 ? FusionMode::kCrossFusion : FusionMode::kSelfBaseline;
    const auto p = init_params(cfg);
    ad::Rng rng(seed);
    const auto x = random_input(rng, 2, 6);
    const auto h = random_input(rng, 2, 6);
    const auto y = forward(p, cfg, x, cfg.fusion == FusionMode::kCrossFusion ? &h : nullptr, false, rng);
    for (double v : y.data()) ASSERT_TRUE(std::isfinite(v)) << "seed " << seed;
  }
}

TEST(Forward, SensitiveToInputs) {
  auto cfg = small_config();
  const auto p = init_params(cfg);
  ad::Rng rng(8);
  auto x = Tensor::parameter({1, 8}, values(random_input(rng, 1, 8)));
  ad::backward(ad::sum(forward(p, cfg, x, nullptr, false, rng)));
  double norm = 0.0;
  for (double g : x.grad()) norm += std::abs(g);
  EXPECT_GT(norm, 0.0);
  std::vector<double> v = values(x);
  const double before = forward(p, cfg, Tensor::constant({1, 8}, v), nullptr, false, rng).item();
  v[3] *= 2.0;
  const double after = forward(p, cfg, Tensor::constant({1, 8}, v), nullptr, false, rng).item();
  EXPECT_NE(before, after);
}
