#include "sfformer/shape_features.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace sff {
namespace {

constexpr std::array<std::string_view, kShapeKindCount> kShapeNames = {
    "length",        "diameter",      "elongation",         "span",
    "curl",          "volume",        "trunk_volume",       "branch_volume",
    "total_surface_area", "total_end_region_radius", "total_end_region_area", "irregularity"};

double distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

EndRegion summarize_end(const std::vector<Point3>& points) {
  EndRegion region;
  for (const auto& p : points) {
    for (int a = 0; a < 3; ++a) region.centroid[a] += p[a];
  }
  const double n = static_cast<double>(points.size());
  for (auto& c : region.centroid) c /= n;
  double mean_distance = 0.0;
  for (const auto& p : points) mean_distance += distance(p, region.centroid);
  mean_distance /= n;
  region.radius = 1.5 * mean_distance;
  region.area = std::numbers::pi * region.radius * region.radius;
  return region;
}

}  // namespace

std::string_view shape_kind_name(ShapeKind kind) noexcept {
  return kShapeNames[static_cast<std::size_t>(kind)];
}

std::optional<ShapeKind> parse_shape_kind(std::string_view name) noexcept {
  for (std::size_t i = 0; i < kShapeKindCount; ++i) {
    if (kShapeNames[i] == name) return static_cast<ShapeKind>(i);
  }
  return std::nullopt;
}

double polyline_length(const Streamline& s) {
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < s.points.size(); ++t) total += distance(s.points[t], s.points[t + 1]);
  return total;
}

double endpoint_distance(const Streamline& s) {
  return distance(s.points.front(), s.points.back());
}

Measure length(const FiberCluster& cluster) {
  if (cluster.empty()) return Measure::invalid();
  double total = 0.0;
  for (const auto& s : cluster.streamlines) total += polyline_length(s);
  return Measure::of(total / static_cast<double>(cluster.size()));
}

Measure span(const FiberCluster& cluster) {
  if (cluster.empty()) return Measure::invalid();
  double total = 0.0;
  for (const auto& s : cluster.streamlines) total += endpoint_distance(s);
  return Measure::of(total / static_cast<double>(cluster.size()));
}

Measure curl(const FiberCluster& cluster) {
  const Measure l = length(cluster);
  const Measure s = span(cluster);
  if (!l.valid || !s.valid || !(s.value > 0.0)) return Measure::invalid();
  return Measure::of(l.value / s.value);
}

Measure diameter(const FiberCluster& cluster, const VoxelMask& mask, bool cylinder) {
  const Measure l = length(cluster);
  if (!l.valid || !(l.value > 0.0)) return Measure::invalid();
  const double radius_like = std::sqrt(mask_volume(mask) / (std::numbers::pi * l.value));
  return Measure::of(cylinder ? 2.0 * radius_like : radius_like);
}

Measure elongation(const FiberCluster& cluster, const VoxelMask& mask, bool cylinder) {
  const Measure d = diameter(cluster, mask, cylinder);
  if (!d.valid || !(d.value > 0.0)) return Measure::invalid();
  return Measure::of(length(cluster).value / d.value);
}

double surface_area(const VoxelMask& mask, SurfaceMode mode) {
  const double s = mask.spacing();
  const std::size_t count = mode == SurfaceMode::kVoxels ? surface_voxel_count(mask) : exposed_face_count(mask);
  return static_cast<double>(count) * s * s;
}

Measure irregularity(const FiberCluster& cluster, const VoxelMask& mask, const FeatureOptions& options) {
  const Measure l = length(cluster);
  const Measure d = diameter(cluster, mask, options.cylinder_diameter);
  if (!l.valid || !d.valid || !(l.value > 0.0) || !(d.value > 0.0)) return Measure::invalid();
  return Measure::of(surface_area(mask, options.surface) / (std::numbers::pi * d.value * l.value));
}

Point3 oriented_start(const Streamline& s, bool flipped) {
  return flipped ? s.points.back() : s.points.front();
}

Point3 oriented_end(const Streamline& s, bool flipped) {
  return flipped ? s.points.front() : s.points.back();
}

std::vector<bool> orient_streamlines(const FiberCluster& cluster) {
  std::vector<bool> flipped(cluster.size(), false);
  if (cluster.empty()) return flipped;
  const Point3 ref_start = cluster.streamlines.front().points.front();
  const Point3 ref_end = cluster.streamlines.front().points.back();
  for (std::size_t i = 1; i < cluster.size(); ++i) {
    const auto& pts = cluster.streamlines[i].points;
    const double keep = distance(pts.front(), ref_start) + distance(pts.back(), ref_end);
    const double flip = distance(pts.back(), ref_start) + distance(pts.front(), ref_end);
    flipped[i] = flip < keep;
  }
  return flipped;
}

std::optional<EndRegionSummary> end_regions(const FiberCluster& cluster) {
  if (cluster.empty()) return std::nullopt;
  EndRegionSummary summary;
  summary.flipped = orient_streamlines(cluster);
  std::vector<Point3> starts, ends;
  starts.reserve(cluster.size());
  ends.reserve(cluster.size());
  for (std::size_t i = 0; i < cluster.size(); ++i) {
    starts.push_back(oriented_start(cluster.streamlines[i], summary.flipped[i]));
    ends.push_back(oriented_end(cluster.streamlines[i], summary.flipped[i]));
  }
  summary.ends[0] = summarize_end(starts);
  summary.ends[1] = summarize_end(ends);
  summary.total_radius = summary.ends[0].radius + summary.ends[1].radius;
  summary.total_area = summary.ends[0].area + summary.ends[1].area;
  return summary;
}

TrunkBranch trunk_branch_volume(const FiberCluster& cluster, const VoxelMask& mask,
                                const FeatureOptions& options) {
  TrunkBranch result;
  const auto regions = end_regions(cluster);
  if (!regions) return result;
  for (std::size_t i = 0; i < cluster.size(); ++i) {
    const auto& s = cluster.streamlines[i];
    const bool f = regions->flipped[i];
    if (distance(oriented_start(s, f), regions->ends[0].centroid) <= regions->ends[0].radius &&
        distance(oriented_end(s, f), regions->ends[1].centroid) <= regions->ends[1].radius) {
      result.trunk_streamlines.push_back(i);
    }
  }
  const double volume = mask_volume(mask);
  const double trunk = mask_volume(voxelize(cluster, result.trunk_streamlines, mask.spacing(), options.raster));
  double branch = volume - trunk;
  // A round-half-even tie in the subtraction can leave the sum one ulp off.
  for (int i = 0; i < 4 && trunk + branch != volume; ++i) {
    branch = std::nextafter(branch, trunk + branch < volume ? std::numeric_limits<double>::infinity()
                                                            : -std::numeric_limits<double>::infinity());
  }
  result.trunk = Measure::of(trunk);
  result.branch = Measure::of(branch);
  return result;
}

TraditionalFeatures traditional(const FiberCluster& cluster, const ScalarMap* fa, const ScalarMap* md) {
  TraditionalFeatures out;
  out.nos = cluster.size();
  auto point_mean = [&](const ScalarMap* map) {
    if (map == nullptr || cluster.empty()) return Measure::invalid();
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& row : map->values) {
      for (double v : row) total += v;
      count += row.size();
    }
    return count == 0 ? Measure::invalid() : Measure::of(total / static_cast<double>(count));
  };
  out.fa_mean = point_mean(fa);
  out.md_mean = point_mean(md);
  return out;
}

ClusterFeatures compute_all(const FiberCluster& cluster, const FeatureOptions& options,
                            const ScalarMap* fa, const ScalarMap* md) {
  ClusterFeatures out;
  out.traditional = traditional(cluster, fa, md);
  if (cluster.empty()) return out;

  const VoxelMask mask = voxelize(cluster, options.spacing, options.raster);
  auto& v = out.shape;
  v[ShapeKind::kLength] = length(cluster);
  v[ShapeKind::kSpan] = span(cluster);
  v[ShapeKind::kCurl] = curl(cluster);
  v[ShapeKind::kVolume] = Measure::of(mask_volume(mask));
  v[ShapeKind::kDiameter] = diameter(cluster, mask, options.cylinder_diameter);
  v[ShapeKind::kElongation] = elongation(cluster, mask, options.cylinder_diameter);
  v[ShapeKind::kTotalSurfaceArea] = Measure::of(surface_area(mask, options.surface));
  v[ShapeKind::kIrregularity] = irregularity(cluster, mask, options);
  const auto tb = trunk_branch_volume(cluster, mask, options);
  v[ShapeKind::kTrunkVolume] = tb.trunk;
  v[ShapeKind::kBranchVolume] = tb.branch;
  if (const auto regions = end_regions(cluster)) {
    v[ShapeKind::kTotalEndRegionRadius] = Measure::of(regions->total_radius);
    v[ShapeKind::kTotalEndRegionArea] = Measure::of(regions->total_area);
  }
  return out;
}

}  // namespace sff
