#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sfformer/bundle_io.hpp"
#include "sfformer/shape_features.hpp"

namespace sff {

enum class GeometryFamily { kRods, kArcs, kHelices, kMixed };

std::string_view geometry_family_name(GeometryFamily family) noexcept;
std::optional<GeometryFamily> parse_geometry_family(std::string_view name) noexcept;

struct TargetTerm {
  ShapeKind kind = ShapeKind::kVolume;
  double weight = 1.0;
};

// Synthetic cohort description. Each subject draws latent length, thickness,
// fan-out and bend factors; every cluster perturbs them independently, so
// per-cluster descriptors carry both subject-level and cluster-level signal.
struct SynthSpec {
  std::size_t subjects = 200;
  std::size_t clusters = 64;
  std::size_t streamlines = 60;  // mean per cluster; scaled by a subject density factor in [0.9, 1.1]
  std::size_t points = 10;       // per streamline
  GeometryFamily family = GeometryFamily::kMixed;
  std::vector<TargetTerm> target{{ShapeKind::kVolume, 1.0}};
  double sigma = 0.3;
  std::uint64_t seed = 1;
  double spacing = 1.0;  // voxel size used to measure the planted descriptors
  bool scalar_maps = false;
  bool permute_targets = false;
  std::string assessment = "SYNTH";

  void validate() const;
};

struct SynthTermRecord {
  ShapeKind kind;
  std::vector<double> aggregate;     // per subject: mean over clusters of the descriptor
  std::vector<double> standardized;  // population z-score of aggregate
};

struct SynthCohort {
  std::vector<SubjectData> subjects;
  std::vector<SynthTermRecord> terms;
  std::vector<double> noise;   // standard normal draws, scaled by sigma in the target
  std::vector<double> target;  // after optional permutation
};

SynthCohort generate_cohort(const SynthSpec& spec);

// One cluster for subject `subject` at atlas position `cluster` (0-based).
FiberCluster generate_cluster(const SynthSpec& spec, std::size_t subject, std::size_t cluster);

// "subject_id\t<kind>_aggregate\t<kind>_z...\tnoise\ttarget"
std::string write_manifest(const SynthSpec& spec, const SynthCohort& cohort);

// Writes <root>/<subject_id>/ per subject plus <root>/manifest.tsv.
void write_cohort(const std::filesystem::path& root, const SynthSpec& spec, const SynthCohort& cohort);

std::string synth_subject_id(std::size_t index);

}  // namespace sff
