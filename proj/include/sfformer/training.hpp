#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfformer/feature_matrix.hpp"
#include "sfformer/model.hpp"

namespace sff {

// Pearson's r from deviations about the means. Throws ErrorKind::kNumeric
// when either vector is constant.
double pearson_r(std::span<const double> prediction, std::span<const double> actual);

// "0.418±0.077"
std::string format_mean_std(double mean, double std);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct HyperParams {
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  std::size_t token_dim = 64;
  std::size_t n_layers = 1;
  double dropout_attn = 0.0;
  double dropout_ffn = 0.0;
  double dropout_residual = 0.0;

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

struct HyperRanges {
  double lr_min = 1e-5, lr_max = 1e-3;          // log-uniform
  double wd_min = 1e-6, wd_max = 1e-3;          // log-uniform
  std::size_t token_min = 64, token_max = 512;  // uniform, rounded to a multiple of 8
  std::size_t layers_min = 1, layers_max = 4;
  double attn_min = 0.0, attn_max = 0.5;
  double ffn_min = 0.0, ffn_max = 0.5;
  double residual_min = 0.0, residual_max = 0.2;
  std::size_t trials = 20;

  void validate() const;
};

HyperParams sample_hyperparams(const HyperRanges& ranges, ad::Rng& rng);

struct TrainSettings {
  std::size_t max_epochs = 1000;
  std::size_t patience = 50;
  std::size_t batch_size = 8;
  double validation_fraction = 0.2;  // inner early-stopping split inside each CV training fold
};

// Normalized, row-major inputs for one train/validation split.
struct FoldData {
  std::size_t clusters = 0;
  std::vector<double> train_primary, train_helper, train_target;
  std::vector<double> val_primary, val_helper, val_target;

  std::size_t train_rows() const { return train_target.size(); }
  std::size_t val_rows() const { return val_target.size(); }
  bool has_helper() const { return !train_helper.empty(); }
};

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::size_t best_epoch = 0;  // 1-based
  double best_val_loss = 0.0;
};

struct TrainResult {
  ModelParams params;
  ModelConfig config;
  TrainHistory history;
};

ModelConfig make_model_config(const ModelConfig& base, const HyperParams& hp, std::size_t clusters);

TrainResult train(const FoldData& data, const ModelConfig& base, const HyperParams& hp,
                  const TrainSettings& settings, std::uint64_t seed);

// Eval-mode predictions for `rows` consecutive rows of normalized input.
std::vector<double> predict(const ModelParams& params, const ModelConfig& config, std::span<const double> primary,
                            std::span<const double> helper, std::size_t rows, std::size_t batch_size = 64);

// A target vector plus every available feature matrix, rows aligned by subject.
struct Dataset {
  std::vector<std::string> subject_ids;
  std::vector<double> target;
  std::map<FeatureKind, FeatureMatrix> matrices;

  std::size_t size() const { return subject_ids.size(); }
  const FeatureMatrix& matrix(FeatureKind kind) const;
};

Dataset make_dataset(std::span<const FeatureMatrix> matrices);

// Reads every <feature>.csv present in dir and attaches `assessment` from scores.csv.
Dataset load_dataset(const std::filesystem::path& dir, std::string_view assessment);

struct Task {
  FeatureKind primary = FeatureKind::kVolume;
  std::optional<FeatureKind> helper;  // set -> cross fusion
};

struct FoldReport {
  std::size_t index = 0;
  std::vector<std::string> test_ids;
  std::size_t train_count = 0;
  std::size_t val_count = 0;
  double r = 0.0;
  bool r_defined = true;
  TrainHistory history;
};

struct CvReport {
  Task task;
  HyperParams hyperparams;
  std::uint64_t seed = 0;
  std::vector<FoldReport> folds;
  double r_mean = 0.0;
  double r_std = 0.0;  // population std over the fold values

  std::string formatted() const { return format_mean_std(r_mean, r_std); }
};

inline constexpr std::size_t kFoldCount = 3;

// Seeded 3-way partition of row indices.
std::array<std::vector<std::size_t>, kFoldCount> make_folds(std::size_t rows, std::uint64_t seed);

CvReport cross_validate(const Dataset& data, const Task& task, const ModelConfig& base, const HyperParams& hp,
                        const TrainSettings& settings, std::uint64_t seed);

struct TrialRecord {
  std::size_t index = 0;
  HyperParams hyperparams;
  bool ok = false;
  std::string error;
  std::optional<CvReport> report;
};

struct SearchReport {
  std::vector<TrialRecord> trials;
  std::optional<std::size_t> best;  // index into trials
};

SearchReport hyperparam_search(const Dataset& data, const Task& task, const ModelConfig& base,
                               const HyperRanges& ranges, const TrainSettings& settings, std::uint64_t seed,
                               std::size_t threads = 1);

struct HelperSelection {
  ShapeKind best = ShapeKind::kLength;
  std::array<double, kShapeKindCount> r_mean{};
  std::vector<CvReport> reports;  // listing order
};

HelperSelection select_helper_feature(const Dataset& data, const ModelConfig& base, const HyperParams& hp,
                                      const TrainSettings& settings, std::uint64_t seed, std::size_t threads = 1);

nlohmann::json to_json(const HyperParams& hp);
nlohmann::json to_json(const CvReport& report);
nlohmann::json to_json(const SearchReport& report);
nlohmann::json to_json(const HelperSelection& selection);

// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace sff
