#pragma once

#include <array>
#include <optional>
#include <string_view>
#include <vector>

#include "sfformer/bundle_io.hpp"
#include "sfformer/voxelizer.hpp"

namespace sff {

// A descriptor value with its validity flag. Invalid descriptors carry 0.
struct Measure {
  double value = 0.0;
  bool valid = false;

  static Measure of(double v) { return {v, true}; }
  static Measure invalid() { return {}; }
  friend bool operator==(const Measure&, const Measure&) = default;
};

// The twelve shape descriptors, in the order they are listed by the
// shape-analysis literature this library follows. Ties during helper
// selection resolve to the lower index of this enumeration.
enum class ShapeKind : int {
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
};
inline constexpr std::size_t kShapeKindCount = 12;

std::string_view shape_kind_name(ShapeKind kind) noexcept;
std::optional<ShapeKind> parse_shape_kind(std::string_view name) noexcept;

struct ShapeDescriptorVector {
  std::array<Measure, kShapeKindCount> values{};

  Measure& operator[](ShapeKind k) { return values[static_cast<std::size_t>(k)]; }
  const Measure& operator[](ShapeKind k) const { return values[static_cast<std::size_t>(k)]; }
  friend bool operator==(const ShapeDescriptorVector&, const ShapeDescriptorVector&) = default;
};

struct EndRegion {
  Point3 centroid{};
  double radius = 0.0;
  double area = 0.0;
};

struct EndRegionSummary {
  std::vector<bool> flipped;         // per streamline
  std::array<EndRegion, 2> ends{};   // oriented start points, oriented end points
  double total_radius = 0.0;
  double total_area = 0.0;
};

struct TraditionalFeatures {
  Measure fa_mean;
  Measure md_mean;
  std::size_t nos = 0;
};

struct FeatureOptions {
  double spacing = 1.0;
  bool cylinder_diameter = false;  // 2*sqrt(V/(pi L)) instead of sqrt(V/(pi L))
  RasterMode raster = RasterMode::kSegmentWalk;
  SurfaceMode surface = SurfaceMode::kVoxels;
};

struct ClusterFeatures {
  ShapeDescriptorVector shape;
  TraditionalFeatures traditional;
};

double polyline_length(const Streamline& s);
double endpoint_distance(const Streamline& s);

Measure length(const FiberCluster& cluster);
Measure span(const FiberCluster& cluster);
Measure curl(const FiberCluster& cluster);
Measure diameter(const FiberCluster& cluster, const VoxelMask& mask, bool cylinder = false);
Measure elongation(const FiberCluster& cluster, const VoxelMask& mask, bool cylinder = false);
double surface_area(const VoxelMask& mask, SurfaceMode mode = SurfaceMode::kVoxels);
Measure irregularity(const FiberCluster& cluster, const VoxelMask& mask,
                     const FeatureOptions& options = {});

// Flip flags against streamline 0 as the reference. Requires n >= 1.
std::vector<bool> orient_streamlines(const FiberCluster& cluster);
// Start/end point of streamline i after applying its flip flag.
Point3 oriented_start(const Streamline& s, bool flipped);
Point3 oriented_end(const Streamline& s, bool flipped);

std::optional<EndRegionSummary> end_regions(const FiberCluster& cluster);

struct TrunkBranch {
  Measure trunk;
  Measure branch;
  std::vector<std::size_t> trunk_streamlines;
};
TrunkBranch trunk_branch_volume(const FiberCluster& cluster, const VoxelMask& mask,
                                const FeatureOptions& options = {});

TraditionalFeatures traditional(const FiberCluster& cluster, const ScalarMap* fa, const ScalarMap* md);

// All descriptors from a single shared voxelization.
ClusterFeatures compute_all(const FiberCluster& cluster, const FeatureOptions& options,
                            const ScalarMap* fa = nullptr, const ScalarMap* md = nullptr);

}  // namespace sff
