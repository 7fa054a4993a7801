#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "sfformer/error.hpp"
#include "sfformer/training.hpp"

using namespace sff;

namespace {

FeatureMatrix matrix_of(FeatureKind kind, std::size_t rows, std::size_t cols, std::vector<double> v,
                        std::vector<double> target) {
  FeatureMatrix m;
  m.kind = kind;
  m.rows = rows;
  m.cols = cols;
  m.values = std::move(v);
  m.target = std::move(target);
  for (std::size_t r = 0; r < rows; ++r) m.subject_ids.push_back("sub-" + std::to_string(1000 + r));
  return m;
}

// Rows of N(0,1) features; target = 3 * column `signal` + 2 unless overridden.
Dataset linear_dataset(std::size_t rows, std::size_t cols, std::uint64_t seed, std::size_t signal = 1) {
  ad::Rng rng(seed);
  std::vector<double> v(rows * cols), t(rows), other(rows * cols);
  for (auto& x : v) x = rng.normal();
  for (auto& x : other) x = rng.normal();
  for (std::size_t r = 0; r < rows; ++r) t[r] = 3.0 * v[r * cols + signal] + 2.0;
  const std::vector<FeatureMatrix> ms{matrix_of(FeatureKind::kVolume, rows, cols, v, t),
                                      matrix_of(FeatureKind::kDiameter, rows, cols, other, t)};
  return make_dataset(ms);
}

HyperParams small_hp(std::size_t d = 16) {
  HyperParams hp;
  hp.learning_rate = 1e-3;
  hp.weight_decay = 1e-6;
  hp.token_dim = d;
  return hp;
}

FoldData fold_of(std::size_t rows, std::size_t cols, std::uint64_t seed, bool zero_target) {
  ad::Rng rng(seed);
  FoldData f;
  f.clusters = cols;
  for (std::size_t i = 0; i < rows * cols; ++i) f.train_primary.push_back(rng.normal());
  for (std::size_t r = 0; r < rows; ++r) f.train_target.push_back(zero_target ? 0.0 : rng.normal());
  f.val_primary = f.train_primary;
  f.val_target = f.train_target;
  return f;
}

}  // namespace

TEST(Pearson, Examples) {
  const std::vector<double> actual{1, 2, 3, 4};
  EXPECT_NEAR(pearson_r(std::vector<double>{1, 3, 2, 4}, actual), 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(pearson_r(std::vector<double>{2, 4, 6, 8}, actual), 1.0);
  EXPECT_DOUBLE_EQ(pearson_r(std::vector<double>{6, 5, 4, 3}, actual), -1.0);
  try {
    (void)pearson_r(std::vector<double>{1, 1, 1, 1}, actual);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumeric);
  }
}

TEST(Pearson, DirectDeviationFormula) {
  ad::Rng rng(1);
  std::vector<double> a(50), b(50);
  for (std::size_t i = 0; i < 50; ++i) {
    a[i] = rng.normal();
    b[i] = 0.5 * a[i] + rng.normal();
  }
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < 50; ++i) ma += a[i] / 50, mb += b[i] / 50;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  EXPECT_NEAR(pearson_r(a, b), sab / std::sqrt(saa * sbb), 1e-12);
}

TEST(Pearson, AffineInvarianceAndAntisymmetry) {
  ad::Rng rng(2);
  std::vector<double> a(40), b(40);
  for (std::size_t i = 0; i < 40; ++i) {
    a[i] = rng.normal();
    b[i] = a[i] + rng.normal();
  }
  const double r = pearson_r(a, b);
  auto affine = a;
  for (auto& x : affine) x = 3.5 * x - 20.0;
  EXPECT_NEAR(pearson_r(affine, b), r, 1e-12);
  auto neg = a;
  for (auto& x : neg) x = -x;
  EXPECT_NEAR(pearson_r(neg, b), -r, 1e-12);
}

TEST(Format, MeanStd) {
  EXPECT_EQ(format_mean_std(0.4181, 0.0772), "0.418±0.077");
  EXPECT_EQ(format_mean_std(-0.05, 0.1), "-0.050±0.100");
}

TEST(Folds, PartitionIsCompleteDisjointAndSeeded) {
  const auto f = make_folds(10, 3);
  std::set<std::size_t> seen;
  std::size_t total = 0;
  for (const auto& fold : f) {
    EXPECT_TRUE(std::is_sorted(fold.begin(), fold.end()));
    EXPECT_GE(fold.size(), 3u);
    for (auto i : fold) seen.insert(i);
    total += fold.size();
  }
  EXPECT_EQ(total, 10u);
  EXPECT_EQ(seen.size(), 10u);
  EXPECT_EQ(make_folds(10, 3), f);
  EXPECT_NE(make_folds(10, 4), f);
}

TEST(Train, ConstantTargetIsFitExactly) {
  const auto data = fold_of(12, 4, 2, true);
  ModelConfig base;
  auto hp = small_hp();
  TrainSettings s;
  s.max_epochs = 400;
  s.patience = 400;
  s.batch_size = 12;
  const auto result = train(data, base, hp, s, 5);
  EXPECT_LT(result.history.best_val_loss, 1e-6);
  // The head norm shift can carry part of the intercept, so the bias is only near zero.
  EXPECT_NEAR(result.params.head.bias.data()[0], 0.0, 5e-2);
}

TEST(Train, EightSubjectsAreMemorized) {
  const auto data = fold_of(8, 6, 3, false);
  ModelConfig base;
  TrainSettings s;
  s.max_epochs = 500;
  s.patience = 50;
  s.batch_size = 8;
  const auto result = train(data, base, small_hp(64), s, 9);
  const double best_train =
      *std::min_element(result.history.train_loss.begin(), result.history.train_loss.end());
  EXPECT_LT(best_train, 1e-3);
  EXPECT_LE(result.history.train_loss.size(), 500u);
  const auto pred = predict(result.params, result.config, data.train_primary, {}, 8);
  double mse = 0.0;
  for (std::size_t i = 0; i < 8; ++i) mse += (pred[i] - data.train_target[i]) * (pred[i] - data.train_target[i]) / 8;
  EXPECT_LT(mse, 1e-3);
}

TEST(Train, SameSeedSameHistory) {
  const auto data = fold_of(10, 4, 4, false);
  ModelConfig base;
  auto hp = small_hp();
  hp.dropout_attn = 0.2;
  hp.dropout_ffn = 0.2;
  hp.dropout_residual = 0.1;
  TrainSettings s;
  s.max_epochs = 20;
  s.batch_size = 4;
  const auto a = train(data, base, hp, s, 11);
  const auto b = train(data, base, hp, s, 11);
  EXPECT_EQ(a.history.train_loss, b.history.train_loss);
  EXPECT_EQ(a.history.val_loss, b.history.val_loss);
  const auto c = train(data, base, hp, s, 12);
  EXPECT_NE(a.history.train_loss, c.history.train_loss);
}

TEST(Train, RestoresBestValidationEpoch) {
  auto data = fold_of(16, 4, 5, false);
  ad::Rng rng(6);
  for (auto& v : data.val_target) v = rng.normal();
  TrainSettings s;
  s.max_epochs = 60;
  s.patience = 10;
  const auto result = train(data, {}, small_hp(), s, 13);
  const auto& h = result.history;
  EXPECT_EQ(h.best_val_loss, *std::min_element(h.val_loss.begin(), h.val_loss.end()));
  EXPECT_EQ(h.val_loss[h.best_epoch - 1], h.best_val_loss);
  const auto pred = predict(result.params, result.config, data.val_primary, {}, data.val_rows());
  double mse = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mse += (pred[i] - data.val_target[i]) * (pred[i] - data.val_target[i]) / double(pred.size());
  }
  EXPECT_NEAR(mse, h.best_val_loss, 1e-12 * std::max(1.0, mse));
}

TEST(Train, InvalidSettingsRejected) {
  const auto data = fold_of(10, 4, 4, false);
  TrainSettings s;
  s.batch_size = 0;
  EXPECT_THROW((void)train(data, {}, small_hp(), s, 1), Error);
  auto hp = small_hp();
  hp.token_dim = 10;
  EXPECT_THROW((void)train(data, {}, hp, {}, 1), Error);
}

TEST(CrossValidate, NoiselessLinearTargetIsRecovered) {
  const auto data = linear_dataset(300, 4, 21);
  TrainSettings s;
  s.max_epochs = 300;
  s.patience = 30;
  const auto report = cross_validate(data, {FeatureKind::kVolume, std::nullopt}, {}, small_hp(), s, 3);
  ASSERT_EQ(report.folds.size(), 3u);
  for (const auto& f : report.folds) EXPECT_GT(f.r, 0.99) << "fold " << f.index;
  std::set<std::string> test_ids;
  for (const auto& f : report.folds) {
    test_ids.insert(f.test_ids.begin(), f.test_ids.end());
    EXPECT_EQ(f.train_count + f.val_count + f.test_ids.size(), 300u);
  }
  EXPECT_EQ(test_ids.size(), 300u);
}

TEST(CrossValidate, ReportIsDeterministic) {
  const auto data = linear_dataset(24, 3, 22);
  TrainSettings s;
  s.max_epochs = 15;
  auto hp = small_hp(8);
  hp.dropout_attn = 0.1;
  const Task task{FeatureKind::kVolume, FeatureKind::kDiameter};
  const auto a = to_json(cross_validate(data, task, {}, hp, s, 5)).dump(2);
  const auto b = to_json(cross_validate(data, task, {}, hp, s, 5)).dump(2);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.find("\"r_formatted\""), std::string::npos);
}

TEST(CrossValidate, MissingMatrixIsUsageError) {
  const auto data = linear_dataset(24, 3, 23);
  try {
    (void)cross_validate(data, {FeatureKind::kCurl, std::nullopt}, {}, small_hp(8), {}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kUsage);
  }
}

TEST(Search, CollapsedRangesGiveIdenticalTrials) {
  const auto data = linear_dataset(15, 3, 24);
  HyperRanges r;
  r.lr_min = r.lr_max = 5e-4;
  r.wd_min = r.wd_max = 1e-5;
  r.token_min = r.token_max = 8;
  r.layers_min = r.layers_max = 1;
  r.attn_min = r.attn_max = 0.1;
  r.ffn_min = r.ffn_max = 0.2;
  r.residual_min = r.residual_max = 0.05;
  TrainSettings s;
  s.max_epochs = 2;
  const auto report = hyperparam_search(data, {FeatureKind::kVolume, std::nullopt}, {}, r, s, 3);
  ASSERT_EQ(report.trials.size(), 20u);
  ASSERT_TRUE(report.best.has_value());
  for (const auto& t : report.trials) {
    EXPECT_EQ(t.hyperparams, report.trials[0].hyperparams);
    EXPECT_EQ(t.hyperparams.learning_rate, 5e-4);
    EXPECT_EQ(to_json(*t.report).dump(), to_json(*report.trials[0].report).dump());
  }
  EXPECT_EQ(report.trials[*report.best].hyperparams.token_dim, 8u);
}

TEST(Search, SamplingIsSeededAndLogUniform) {
  HyperRanges r;
  ad::Rng a(7), b(7);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_hyperparams(r, a), sample_hyperparams(r, b));
  ad::Rng rng(8);
  int below = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto hp = sample_hyperparams(r, rng);
    below += hp.learning_rate < 1e-4;
    EXPECT_GE(hp.learning_rate, 1e-5);
    EXPECT_LE(hp.learning_rate, 1e-3);
    EXPECT_GE(hp.weight_decay, 1e-6);
    EXPECT_LE(hp.weight_decay, 1e-3);
    EXPECT_EQ(hp.token_dim % 8, 0u);
    EXPECT_GE(hp.token_dim, 64u);
    EXPECT_LE(hp.token_dim, 512u);
    EXPECT_GE(hp.n_layers, 1u);
    EXPECT_LE(hp.n_layers, 4u);
    EXPECT_LE(hp.dropout_residual, 0.2);
  }
  EXPECT_GT(below, 400);
  HyperRanges bad;
  bad.lr_min = 0.0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(HelperSelection, ReturnsSomeFeatureOnNoise) {
  ad::Rng rng(30);
  std::vector<FeatureMatrix> ms;
  std::vector<double> t(12);
  for (auto& x : t) x = rng.normal();
  for (std::size_t k = 0; k < kShapeKindCount; ++k) {
    std::vector<double> v(12 * 2);
    for (auto& x : v) x = rng.normal();
    ms.push_back(matrix_of(static_cast<FeatureKind>(k), 12, 2, v, t));
  }
  TrainSettings s;
  s.max_epochs = 2;
  const auto sel = select_helper_feature(make_dataset(ms), {}, small_hp(8), s, 4);
  EXPECT_EQ(sel.reports.size(), kShapeKindCount);
  const auto best = static_cast<std::size_t>(sel.best);
  for (std::size_t k = 0; k < kShapeKindCount; ++k) {
    EXPECT_LE(sel.r_mean[k], sel.r_mean[best]);
    if (sel.r_mean[k] == sel.r_mean[best]) {
      EXPECT_GE(k, best);
    }
  }
  const auto j = to_json(sel);
  EXPECT_EQ(j.at("shape_scores").size(), kShapeKindCount);
}

TEST(ParallelFor, CoversRangeAndPropagatesErrors) {
  std::vector<int> hit(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hit[i] += 1; });
  for (int h : hit) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 2, [](std::size_t i) {
                 if (i == 7) throw Error(ErrorKind::kData, "boom");
               }),
               Error);
}
