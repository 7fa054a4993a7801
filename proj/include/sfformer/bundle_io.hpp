#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sff {

using Point3 = std::array<double, 3>;

// Ordered polyline in millimetres. At least two finite points.
struct Streamline {
  std::vector<Point3> points;

  friend bool operator==(const Streamline&, const Streamline&) = default;
};

// One brain connection. An empty streamline list marks a cluster that is
// missing for this subject.
struct FiberCluster {
  int id = 0;  // 1-based atlas index
  std::vector<Streamline> streamlines;

  std::size_t size() const noexcept { return streamlines.size(); }
  bool empty() const noexcept { return streamlines.empty(); }

  friend bool operator==(const FiberCluster&, const FiberCluster&) = default;
};

enum class ScalarKind { kFA, kMD };

// Per-point scalars shape-locked to a FiberCluster.
struct ScalarMap {
  ScalarKind kind = ScalarKind::kFA;
  std::vector<std::vector<double>> values;

  friend bool operator==(const ScalarMap&, const ScalarMap&) = default;
};

struct SubjectData {
  std::string subject_id;
  std::vector<FiberCluster> clusters;            // length == atlas size
  std::vector<std::optional<ScalarMap>> fa;      // parallel to clusters
  std::vector<std::optional<ScalarMap>> md;
  std::map<std::string, double> scores;
};

struct LoadOptions {
  std::size_t cluster_count = 953;
  std::vector<std::string> assessments;  // each must be present in scores.tsv
};

// SLB binary ("SLB1") or its whitespace text twin, detected from the leading bytes.
FiberCluster parse_bundle(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> write_bundle(const FiberCluster& cluster);
std::string write_bundle_text(const FiberCluster& cluster);

// Throws FormatError(kShortStreamline/kNonFinite) if the cluster breaks the type invariants.
void validate_cluster(const FiberCluster& cluster);

ScalarMap parse_scalar_map(std::span<const std::uint8_t> bytes, const FiberCluster& cluster,
                           ScalarKind kind);
std::vector<std::uint8_t> write_scalar_map(const ScalarMap& map);

std::map<std::string, double> parse_scores(std::string_view text);
std::string write_scores(const std::map<std::string, double>& scores);

// Layout: <dir>/cluster_%04d.slb (or .txt), fa_%04d.sls, md_%04d.sls, scores.tsv.
SubjectData load_subject(const std::filesystem::path& dir, const LoadOptions& options);
// Subdirectories of root, sorted by name.
std::vector<std::filesystem::path> list_subject_dirs(const std::filesystem::path& root);

// Highest cluster file index found under any subject directory (0 if none).
std::size_t infer_cluster_count(const std::filesystem::path& root);

// Every subdirectory of root, sorted by name.
std::vector<SubjectData> load_root(const std::filesystem::path& root, const LoadOptions& options);
void save_subject(const std::filesystem::path& root, const SubjectData& subject);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_file(const std::filesystem::path& path, std::string_view text);

std::string cluster_file_name(int id);
std::string scalar_file_name(ScalarKind kind, int id);

// Shortest decimal rendering that round-trips the double exactly.
std::string format_double(double value);

}  // namespace sff
