#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sfformer/bundle_io.hpp"
#include "sfformer/shape_features.hpp"

namespace sff {

// Shape kinds share their ShapeKind ordinal; FA, MD and NoS follow.
enum class FeatureKind : int {
  kLength = 0,
  kDiameter,
  kElongation,
  kSpan,
  kCurl,
  kVolume,
  kTrunkVolume,
  kBranchVolume,
  kTotalSurfaceArea,
  kTotalEndRegionRadius,
  kTotalEndRegionArea,
  kIrregularity,
  kFA,
  kMD,
  kNoS,
};
inline constexpr std::size_t kFeatureKindCount = 15;

std::string_view feature_kind_name(FeatureKind kind) noexcept;
std::optional<FeatureKind> parse_feature_kind(std::string_view name) noexcept;
constexpr FeatureKind to_feature_kind(ShapeKind k) noexcept { return static_cast<FeatureKind>(k); }
constexpr bool is_shape_kind(FeatureKind k) noexcept { return static_cast<int>(k) < 12; }

// Value used in matrices: zero when the underlying measure is invalid.
double feature_value(const ClusterFeatures& features, FeatureKind kind);

struct SubjectFeatures {
  std::string subject_id;
  std::vector<ClusterFeatures> clusters;
  std::map<std::string, double> scores;
  bool has_fa = false;
  bool has_md = false;
};

SubjectFeatures extract_features(const SubjectData& subject, const FeatureOptions& options);

// S x C, row-major; row s belongs to subject_ids[s].
struct FeatureMatrix {
  FeatureKind kind = FeatureKind::kLength;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  std::vector<std::string> subject_ids;
  std::vector<double> target;  // empty until scores are attached

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

// An empty assessment leaves target empty.
FeatureMatrix assemble(std::span<const SubjectFeatures> subjects, FeatureKind kind, std::string_view assessment);
FeatureMatrix assemble(std::span<const SubjectData> subjects, FeatureKind kind, std::string_view assessment,
                       const FeatureOptions& options = {});

struct ColumnStats {
  std::vector<double> mean;
  std::vector<double> std;  // population; 1 where the column is constant
};

ColumnStats zscore_fit(const FeatureMatrix& matrix, std::span<const std::size_t> train_rows);
FeatureMatrix zscore_apply(const FeatureMatrix& matrix, const ColumnStats& stats);

struct ScalarStats {
  double mean = 0.0;
  double std = 1.0;
};
ScalarStats fit_scalar_stats(std::span<const double> values, std::span<const std::size_t> rows);

// Wide format: header "subject_id,cluster_0001,...", one row per subject.
std::string write_wide_csv(const FeatureMatrix& matrix);
FeatureMatrix parse_wide_csv(std::string_view text, FeatureKind kind);

// Long format: "subject_id,cluster_id,<feature>..." with one row per cluster.
std::string write_long_csv(std::span<const SubjectFeatures> subjects, std::span<const FeatureKind> kinds);

// "subject_id,<assessment>..." per subject.
std::string write_scores_csv(std::span<const SubjectFeatures> subjects);
std::map<std::string, std::map<std::string, double>> parse_scores_csv(std::string_view text);

// Fills matrix.target from a scores table; every subject must carry the assessment.
void attach_target(FeatureMatrix& matrix, const std::map<std::string, std::map<std::string, double>>& scores,
                   std::string_view assessment);

std::string write_id_list(std::span<const std::string> ids);
std::vector<std::string> parse_id_list(std::string_view text);

// Every shape kind and NoS; FA and MD only when every subject carries the maps.
std::vector<FeatureKind> available_kinds(std::span<const SubjectFeatures> subjects);

// <dir>/<feature>.csv per available kind, features_long.csv and scores.csv.
std::vector<FeatureKind> write_feature_dir(const std::filesystem::path& dir,
                                           std::span<const SubjectFeatures> subjects);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace sff
