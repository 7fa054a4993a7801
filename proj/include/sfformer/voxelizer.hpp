#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "sfformer/bundle_io.hpp"

namespace sff {

using VoxelIndex = std::array<std::int64_t, 3>;

// Sorted, duplicate-free set of occupied voxels on an axis-aligned grid with
// cubic cells of edge `spacing`. Point p lives in voxel floor(p / spacing).
class VoxelMask {
 public:
  VoxelMask() = default;
  VoxelMask(double spacing, std::vector<VoxelIndex> voxels);

  double spacing() const noexcept { return spacing_; }
  std::size_t size() const noexcept { return voxels_.size(); }
  bool empty() const noexcept { return voxels_.empty(); }
  std::span<const VoxelIndex> voxels() const noexcept { return voxels_; }
  bool contains(const VoxelIndex& v) const;

  friend bool operator==(const VoxelMask&, const VoxelMask&) = default;

 private:
  double spacing_ = 1.0;
  std::vector<VoxelIndex> voxels_;
};

enum class RasterMode {
  kSegmentWalk,  // every voxel crossed by a segment
  kPointsOnly,   // only voxels containing a streamline point
};

enum class SurfaceMode {
  kVoxels,  // occupied voxels with at least one exposed face
  kFaces,   // number of exposed faces
};

VoxelIndex voxel_of(const Point3& p, double spacing);

// Appends the voxels traversed by segment [a, b] in walk order.
void traverse_segment(const Point3& a, const Point3& b, double spacing, std::vector<VoxelIndex>& out);

VoxelMask voxelize(const FiberCluster& cluster, double spacing, RasterMode mode = RasterMode::kSegmentWalk);
// Restricted to the listed streamlines.
VoxelMask voxelize(const FiberCluster& cluster, std::span<const std::size_t> streamline_indices,
                   double spacing, RasterMode mode = RasterMode::kSegmentWalk);

double mask_volume(const VoxelMask& mask);
std::size_t surface_voxel_count(const VoxelMask& mask);
std::size_t exposed_face_count(const VoxelMask& mask);

}  // namespace sff
