#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>
#include <unistd.h>

#include "sfformer/bundle_io.hpp"
#include "sfformer/error.hpp"
#include "sfformer/feature_matrix.hpp"
#include "sfformer/synth.hpp"

namespace fs = std::filesystem;
using namespace sff;

namespace {

SynthSpec tiny(GeometryFamily family = GeometryFamily::kMixed) {
  SynthSpec s;
  s.subjects = 8;
  s.clusters = 4;
  s.streamlines = 12;
  s.points = 8;
  s.family = family;
  return s;
}

fs::path temp_dir(const std::string& tag) {
  const auto p = fs::temp_directory_path() / ("sff_synth_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::vector<std::vector<std::string>> parse_tsv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, '\t')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(Synth, RodsAreStraight) {
  const auto spec = tiny(GeometryFamily::kRods);
  for (std::size_t s = 0; s < spec.subjects; ++s) {
    for (std::size_t c = 0; c < spec.clusters; ++c) {
      const auto cl = generate_cluster(spec, s, c);
      ASSERT_FALSE(cl.empty());
      EXPECT_NEAR(curl(cl).value, 1.0, 1e-9);
      for (const auto& line : cl.streamlines) EXPECT_EQ(line.points.size(), spec.points);
    }
  }
}

TEST(Synth, FamiliesProduceValidClusters) {
  for (auto fam : {GeometryFamily::kArcs, GeometryFamily::kHelices, GeometryFamily::kMixed}) {
    const auto spec = tiny(fam);
    const auto cl = generate_cluster(spec, 0, 0);
    EXPECT_NO_THROW(validate_cluster(cl));
    if (fam != GeometryFamily::kMixed) {
      EXPECT_GT(curl(cl).value, 1.0);
    }
    EXPECT_EQ(parse_geometry_family(geometry_family_name(fam)), fam);
  }
}

TEST(Synth, NoiselessTargetReproducibleFromManifest) {
  auto spec = tiny();
  spec.sigma = 0.0;
  spec.target = {{ShapeKind::kVolume, 1.0}, {ShapeKind::kDiameter, 0.5}};
  const auto cohort = generate_cohort(spec);
  const auto root = temp_dir("manifest");
  write_cohort(root, spec, cohort);
  const auto rows = parse_tsv(read_text_file(root / "manifest.tsv"));
  ASSERT_EQ(rows.size(), spec.subjects + 1);
  const auto& header = rows[0];
  auto col = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    EXPECT_NE(it, header.end()) << name;
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t vz = col("volume_z"), dz = col("diameter_z"), va = col("volume_aggregate"),
                    tgt = col("target");

  LoadOptions opt;
  opt.cluster_count = spec.clusters;
  opt.assessments = {spec.assessment};
  const auto subjects = load_root(root, opt);
  ASSERT_EQ(subjects.size(), spec.subjects);
  for (std::size_t s = 0; s < spec.subjects; ++s) {
    const double z1 = std::stod(rows[s + 1][vz]), z2 = std::stod(rows[s + 1][dz]);
    const double target = std::stod(rows[s + 1][tgt]);
    EXPECT_EQ(target, 1.0 * z1 + 0.5 * z2);
    EXPECT_EQ(subjects[s].scores.at(spec.assessment), target);
    EXPECT_EQ(rows[s + 1][0], subjects[s].subject_id);
    // The aggregate is recomputable from the written bundles.
    double total = 0.0;
    std::size_t valid = 0;
    for (const auto& c : subjects[s].clusters) {
      const auto f = compute_all(c, {});
      if (f.shape[ShapeKind::kVolume].valid) {
        total += f.shape[ShapeKind::kVolume].value;
        ++valid;
      }
    }
    EXPECT_NEAR(std::stod(rows[s + 1][va]), total / double(valid), 1e-9 * total);
  }
  fs::remove_all(root);
}

TEST(Synth, SameSeedSameTree) {
  const auto spec = tiny();
  const auto a = temp_dir("a"), b = temp_dir("b");
  write_cohort(a, spec, generate_cohort(spec));
  write_cohort(b, spec, generate_cohort(spec));
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    const auto rel = fs::relative(e.path(), a);
    ASSERT_TRUE(fs::exists(b / rel)) << rel;
    if (e.is_regular_file()) {
      EXPECT_EQ(read_file_bytes(e.path()), read_file_bytes(b / rel)) << rel;
      ++files;
    }
  }
  std::size_t files_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) files_b += e.is_regular_file();
  EXPECT_EQ(files, files_b);
  EXPECT_GT(files, spec.subjects * spec.clusters);

  auto other = spec;
  other.seed = 2;
  EXPECT_NE(generate_cluster(spec, 0, 0), generate_cluster(other, 0, 0));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Synth, ScalarMapsAndPermutation) {
  auto spec = tiny();
  spec.scalar_maps = true;
  const auto cohort = generate_cohort(spec);
  for (const auto& s : cohort.subjects) {
    for (std::size_t k = 0; k < spec.clusters; ++k) {
      ASSERT_TRUE(s.fa[k].has_value());
      for (const auto& row : s.fa[k]->values)
        for (double v : row) {
          EXPECT_GE(v, 0.0);
          EXPECT_LE(v, 1.0);
        }
    }
  }
  auto perm = spec;
  perm.permute_targets = true;
  const auto shuffled = generate_cohort(perm);
  auto a = cohort.target, b = shuffled.target;
  EXPECT_NE(a, b);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}

TEST(Synth, SpecValidation) {
  auto spec = tiny();
  spec.subjects = 2;
  EXPECT_THROW(spec.validate(), Error);
  spec = tiny();
  spec.sigma = -1.0;
  EXPECT_THROW(spec.validate(), Error);
  EXPECT_EQ(synth_subject_id(0), "sub-0001");
}
