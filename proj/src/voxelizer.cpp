#include "sfformer/voxelizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "sfformer/error.hpp"

namespace sff {
namespace {

struct VoxelHash {
  std::size_t operator()(const VoxelIndex& v) const noexcept {
    std::uint64_t h = 1469598103934665603ull;
    for (auto c : v) {
      h ^= static_cast<std::uint64_t>(c) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return static_cast<std::size_t>(h);
  }
};

constexpr std::array<VoxelIndex, 6> kFaceNeighbours = {{
    {1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};

VoxelMask finish(double spacing, std::vector<VoxelIndex> voxels) {
  return VoxelMask(spacing, std::move(voxels));
}

void check_spacing(double spacing) {
  if (!(spacing > 0.0) || !std::isfinite(spacing)) {
    throw Error(ErrorKind::kUsage, "voxel spacing must be positive and finite");
  }
}

}  // namespace

VoxelMask::VoxelMask(double spacing, std::vector<VoxelIndex> voxels)
    : spacing_(spacing), voxels_(std::move(voxels)) {
  check_spacing(spacing);
  std::sort(voxels_.begin(), voxels_.end());
  voxels_.erase(std::unique(voxels_.begin(), voxels_.end()), voxels_.end());
}

bool VoxelMask::contains(const VoxelIndex& v) const {
  return std::binary_search(voxels_.begin(), voxels_.end(), v);
}

VoxelIndex voxel_of(const Point3& p, double spacing) {
  VoxelIndex v{};
  for (int a = 0; a < 3; ++a) {
    if (!std::isfinite(p[a])) throw Error(ErrorKind::kData, "non-finite streamline point");
    v[a] = static_cast<std::int64_t>(std::floor(p[a] / spacing));
  }
  return v;
}

// Amanatides-Woo walk. The number of boundary crossings per axis is fixed
// by the end voxels, so the walk always terminates in voxel_of(b) even when
// the incremental tMax values drift.
void traverse_segment(const Point3& a, const Point3& b, double spacing, std::vector<VoxelIndex>& out) {
  VoxelIndex cur = voxel_of(a, spacing);
  const VoxelIndex last = voxel_of(b, spacing);
  out.push_back(cur);

  std::array<std::int64_t, 3> step{};
  std::array<std::int64_t, 3> remaining{};
  std::array<double, 3> t_max{};
  std::array<double, 3> t_delta{};
  constexpr double kInf = std::numeric_limits<double>::infinity();
  for (int ax = 0; ax < 3; ++ax) {
    const double d = b[ax] - a[ax];
    remaining[ax] = std::abs(last[ax] - cur[ax]);
    if (remaining[ax] == 0) {
      step[ax] = 0;
      t_max[ax] = kInf;
      t_delta[ax] = kInf;
      continue;
    }
    step[ax] = d > 0 ? 1 : -1;
    // Leaving through the upper face happens at (cur+1)*s; through the lower
    // face at cur*s, which is t = 0 when a sits exactly on it.
    const double boundary = static_cast<double>(step[ax] > 0 ? cur[ax] + 1 : cur[ax]) * spacing;
    t_max[ax] = (boundary - a[ax]) / d;
    t_delta[ax] = spacing / std::abs(d);
  }

  while (remaining[0] + remaining[1] + remaining[2] > 0) {
    int ax = -1;
    for (int k = 0; k < 3; ++k) {
      if (remaining[k] > 0 && (ax < 0 || t_max[k] < t_max[ax])) ax = k;
    }
    cur[ax] += step[ax];
    --remaining[ax];
    t_max[ax] += t_delta[ax];
    out.push_back(cur);
  }
}

VoxelMask voxelize(const FiberCluster& cluster, double spacing, RasterMode mode) {
  std::vector<std::size_t> all(cluster.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return voxelize(cluster, all, spacing, mode);
}

VoxelMask voxelize(const FiberCluster& cluster, std::span<const std::size_t> streamline_indices,
                   double spacing, RasterMode mode) {
  check_spacing(spacing);
  std::vector<VoxelIndex> voxels;
  for (std::size_t i : streamline_indices) {
    const auto& pts = cluster.streamlines.at(i).points;
    if (mode == RasterMode::kPointsOnly || pts.size() == 1) {
      for (const auto& p : pts) voxels.push_back(voxel_of(p, spacing));
      continue;
    }
    for (std::size_t t = 0; t + 1 < pts.size(); ++t) traverse_segment(pts[t], pts[t + 1], spacing, voxels);
  }
  return finish(spacing, std::move(voxels));
}

double mask_volume(const VoxelMask& mask) {
  const double s = mask.spacing();
  return static_cast<double>(mask.size()) * s * s * s;
}

std::size_t surface_voxel_count(const VoxelMask& mask) {
  const std::unordered_set<VoxelIndex, VoxelHash> occupied(mask.voxels().begin(), mask.voxels().end());
  std::size_t count = 0;
  for (const auto& v : mask.voxels()) {
    for (const auto& d : kFaceNeighbours) {
      if (!occupied.contains({v[0] + d[0], v[1] + d[1], v[2] + d[2]})) {
        ++count;
        break;
      }
    }
  }
  return count;
}

std::size_t exposed_face_count(const VoxelMask& mask) {
  const std::unordered_set<VoxelIndex, VoxelHash> occupied(mask.voxels().begin(), mask.voxels().end());
  std::size_t count = 0;
  for (const auto& v : mask.voxels()) {
    for (const auto& d : kFaceNeighbours) {
      if (!occupied.contains({v[0] + d[0], v[1] + d[1], v[2] + d[2]})) ++count;
    }
  }
  return count;
}

}  // namespace sff
