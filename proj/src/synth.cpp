#include "sfformer/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "sfformer/error.hpp"
#include "sfformer/tensor.hpp"
#include "sfformer/training.hpp"

namespace sff {
namespace {

using V3 = std::array<double, 3>;

V3 operator+(V3 a, const V3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
V3 operator*(double s, const V3& a) { return {s * a[0], s * a[1], s * a[2]}; }
double dot(const V3& a, const V3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
V3 cross(const V3& a, const V3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
V3 normalized(const V3& a) { return (1.0 / std::sqrt(dot(a, a))) * a; }

struct Template {
  GeometryFamily family;
  V3 origin, axis, e1, e2;
  double length;
  double radius;
  double bend;         // arc angle, radians
  double helix_radius;
  double helix_turns;
};

struct Latents {
  double length;
  double thickness;
  double fan;
  double bend;
  double aspect;  // cross-section ellipse axis ratio at constant area
  double density;
};

Template make_template(const SynthSpec& spec, std::size_t c) {
  ad::Rng rng(derive_seed(derive_seed(spec.seed, 1), c));
  Template t{};
  t.family = spec.family;
  if (t.family == GeometryFamily::kMixed) t.family = static_cast<GeometryFamily>(rng.below(3));
  for (auto& v : t.origin) v = rng.uniform(-40.0, 40.0);
  t.axis = normalized({rng.normal(), rng.normal(), rng.normal()});
  const V3 helper = std::abs(t.axis[0]) < 0.9 ? V3{1, 0, 0} : V3{0, 1, 0};
  t.e1 = normalized(cross(t.axis, helper));
  t.e2 = cross(t.axis, t.e1);
  t.length = rng.uniform(30.0, 60.0);
  t.radius = rng.uniform(2.5, 3.5);
  t.bend = rng.uniform(0.6, 1.4);
  t.helix_radius = rng.uniform(2.0, 4.0);
  t.helix_turns = rng.uniform(0.5, 1.2);
  return t;
}

Latents subject_latents(const SynthSpec& spec, std::size_t s) {
  ad::Rng rng(derive_seed(derive_seed(spec.seed, 2), s));
  Latents l{};
  l.length = std::exp(0.1 * rng.normal());
  l.thickness = std::exp(0.08 * rng.normal());
  l.fan = rng.uniform(0.05, 0.2);
  l.bend = std::exp(0.2 * rng.normal());
  l.aspect = rng.uniform(1.0, 8.0);
  l.density = rng.uniform(0.9, 1.1);
  return l;
}

// Centreline position and cross-section frame at parameter u in [0, 1].
void centreline(const Template& t, double length, double bend, double u, V3& p, V3& n1, V3& n2) {
  switch (t.family) {
    case GeometryFamily::kArcs: {
      const double theta = bend * u;
      const double rho = length / bend;
      p = t.origin + (rho * std::sin(theta)) * t.axis + (rho * (1.0 - std::cos(theta))) * t.e1;
      n1 = (-std::sin(theta)) * t.axis + std::cos(theta) * t.e1;
      n2 = t.e2;
      return;
    }
    case GeometryFamily::kHelices: {
      const double phi = 2.0 * std::numbers::pi * t.helix_turns * u;
      p = t.origin + (length * u) * t.axis + (t.helix_radius * (std::cos(phi) - 1.0)) * t.e1 +
          (t.helix_radius * std::sin(phi)) * t.e2;
      n1 = t.e1;
      n2 = t.e2;
      return;
    }
    default:
      p = t.origin + (length * u) * t.axis;
      n1 = t.e1;
      n2 = t.e2;
      return;
  }
}

}  // namespace

std::string_view geometry_family_name(GeometryFamily family) noexcept {
  switch (family) {
    case GeometryFamily::kRods: return "rods";
    case GeometryFamily::kArcs: return "arcs";
    case GeometryFamily::kHelices: return "helices";
    case GeometryFamily::kMixed: return "mixed";
  }
  return "mixed";
}

std::optional<GeometryFamily> parse_geometry_family(std::string_view name) noexcept {
  for (auto f : {GeometryFamily::kRods, GeometryFamily::kArcs, GeometryFamily::kHelices, GeometryFamily::kMixed}) {
    if (geometry_family_name(f) == name) return f;
  }
  return std::nullopt;
}

void SynthSpec::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kUsage, "synth: " + m); };
  if (subjects < 6) fail("subject count must be >= 6");
  if (clusters < 2) fail("cluster count must be >= 2");
  if (streamlines < 2) fail("streamlines per cluster must be >= 2");
  if (points < 2) fail("points per streamline must be >= 2");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) fail("sigma must be finite and >= 0");
  if (!(spacing > 0.0) || !std::isfinite(spacing)) fail("spacing must be positive");
  if (assessment.empty() || assessment.find_first_of("\t\n") != std::string::npos) fail("invalid assessment name");
}

std::string synth_subject_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sub-%04zu", index + 1);
  return buf;
}

FiberCluster generate_cluster(const SynthSpec& spec, std::size_t subject, std::size_t cluster) {
  const Template t = make_template(spec, cluster);
  const Latents lat = subject_latents(spec, subject);
  ad::Rng rng(derive_seed(derive_seed(derive_seed(spec.seed, 3), subject), cluster));

  const double length = t.length * lat.length * std::exp(0.1 * rng.normal());
  const double radius = t.radius * lat.thickness * std::exp(0.12 * rng.normal());
  const double fan = std::clamp(lat.fan + 0.04 * rng.normal(), 0.0, 0.8);
  const double bend = t.bend * lat.bend * std::exp(0.1 * rng.normal());
  const double expected = static_cast<double>(spec.streamlines) * lat.density * std::exp(0.1 * rng.normal());
  const auto n = static_cast<std::size_t>(std::max(2.0, std::round(expected)));
  const double jitter = t.family == GeometryFamily::kRods ? 0.0 : 0.04 * radius;
  const double stretch = std::sqrt(std::clamp(lat.aspect * std::exp(0.1 * rng.normal()), 1.0, 9.0));

  FiberCluster out;
  out.id = static_cast<int>(cluster + 1);
  out.streamlines.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double rs = radius * std::sqrt(rng.uniform());
    const double phi = 2.0 * std::numbers::pi * rng.uniform();
    const double a0 = rs * std::cos(phi) * stretch, b0 = rs * std::sin(phi) / stretch;
    double a1 = a0, b1 = b0;
    if (rng.uniform() < fan) {
      const double spread = radius * rng.uniform(1.0, 2.0);
      const double psi = phi + rng.uniform(-0.5, 0.5);
      a1 = a0 + spread * std::cos(psi);
      b1 = b0 + spread * std::sin(psi);
    }
    auto& pts = out.streamlines[i].points;
    pts.resize(spec.points);
    for (std::size_t k = 0; k < spec.points; ++k) {
      const double u = static_cast<double>(k) / static_cast<double>(spec.points - 1);
      V3 p, n1, n2;
      centreline(t, length, bend, u, p, n1, n2);
      const double a = a0 + (a1 - a0) * u;
      const double b = b0 + (b1 - b0) * u;
      pts[k] = p + a * n1 + b * n2;
      if (jitter > 0.0) {
        for (auto& v : pts[k]) v += jitter * rng.normal();
      }
    }
    if (rng.uniform() < 0.5) std::reverse(pts.begin(), pts.end());
  }
  return out;
}

SynthCohort generate_cohort(const SynthSpec& spec) {
  spec.validate();
  SynthCohort cohort;
  cohort.subjects.resize(spec.subjects);
  cohort.terms.resize(spec.target.size());
  for (std::size_t j = 0; j < spec.target.size(); ++j) {
    cohort.terms[j].kind = spec.target[j].kind;
    cohort.terms[j].aggregate.assign(spec.subjects, 0.0);
  }
  FeatureOptions options;
  options.spacing = spec.spacing;

  for (std::size_t s = 0; s < spec.subjects; ++s) {
    SubjectData& subj = cohort.subjects[s];
    subj.subject_id = synth_subject_id(s);
    subj.clusters.resize(spec.clusters);
    subj.fa.resize(spec.clusters);
    subj.md.resize(spec.clusters);
    ad::Rng scalar_rng(derive_seed(derive_seed(spec.seed, 5), s));
    const double fa_level = scalar_rng.uniform(0.35, 0.6);
    const double md_level = scalar_rng.uniform(6e-4, 9e-4);
    std::vector<double> sums(spec.target.size(), 0.0);
    std::vector<std::size_t> counts(spec.target.size(), 0);
    for (std::size_t c = 0; c < spec.clusters; ++c) {
      subj.clusters[c] = generate_cluster(spec, s, c);
      const auto& cl = subj.clusters[c];
      if (spec.scalar_maps) {
        ScalarMap fa{ScalarKind::kFA, {}}, md{ScalarKind::kMD, {}};
        for (const auto& sl : cl.streamlines) {
          auto& fv = fa.values.emplace_back();
          auto& mv = md.values.emplace_back();
          for (std::size_t k = 0; k < sl.points.size(); ++k) {
            fv.push_back(std::clamp(fa_level + 0.1 * scalar_rng.normal(), 0.0, 1.0));
            mv.push_back(std::max(0.0, md_level + 5e-5 * scalar_rng.normal()));
          }
        }
        subj.fa[c] = std::move(fa);
        subj.md[c] = std::move(md);
      }
      const ClusterFeatures f = compute_all(cl, options);
      for (std::size_t j = 0; j < spec.target.size(); ++j) {
        const Measure& m = f.shape[spec.target[j].kind];
        if (!m.valid) continue;
        sums[j] += m.value;
        ++counts[j];
      }
    }
    for (std::size_t j = 0; j < spec.target.size(); ++j) {
      cohort.terms[j].aggregate[s] = counts[j] ? sums[j] / static_cast<double>(counts[j]) : 0.0;
    }
  }

  const double n = static_cast<double>(spec.subjects);
  for (auto& term : cohort.terms) {
    double mean = 0.0;
    for (double v : term.aggregate) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : term.aggregate) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / n);
    term.standardized.resize(spec.subjects);
    for (std::size_t s = 0; s < spec.subjects; ++s) {
      term.standardized[s] = sd > 0.0 ? (term.aggregate[s] - mean) / sd : 0.0;
    }
  }

  ad::Rng noise_rng(derive_seed(spec.seed, 4));
  cohort.noise.resize(spec.subjects);
  cohort.target.assign(spec.subjects, 0.0);
  for (std::size_t s = 0; s < spec.subjects; ++s) {
    cohort.noise[s] = noise_rng.normal();
    double y = 0.0;
    for (std::size_t j = 0; j < spec.target.size(); ++j) y += spec.target[j].weight * cohort.terms[j].standardized[s];
    cohort.target[s] = y + spec.sigma * cohort.noise[s];
  }
  if (spec.permute_targets) {
    ad::Rng perm_rng(derive_seed(spec.seed, 6));
    for (std::size_t i = cohort.target.size(); i > 1; --i) std::swap(cohort.target[i - 1], cohort.target[perm_rng.below(i)]);
  }
  for (std::size_t s = 0; s < spec.subjects; ++s) cohort.subjects[s].scores[spec.assessment] = cohort.target[s];
  return cohort;
}

std::string write_manifest(const SynthSpec& spec, const SynthCohort& cohort) {
  std::string out = "subject_id";
  for (const auto& term : cohort.terms) {
    const std::string name(shape_kind_name(term.kind));
    out += "\t" + name + "_aggregate\t" + name + "_z";
  }
  out += "\tnoise\ttarget\n";
  for (std::size_t s = 0; s < cohort.subjects.size(); ++s) {
    out += cohort.subjects[s].subject_id;
    for (const auto& term : cohort.terms) {
      out += "\t" + format_double(term.aggregate[s]) + "\t" + format_double(term.standardized[s]);
    }
    out += "\t" + format_double(spec.sigma * cohort.noise[s]) + "\t" + format_double(cohort.target[s]) + "\n";
  }
  return out;
}

void write_cohort(const std::filesystem::path& root, const SynthSpec& spec, const SynthCohort& cohort) {
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create " + root.string() + ": " + ec.message());
  for (const auto& subject : cohort.subjects) save_subject(root, subject);
  write_text_file(root / "manifest.tsv", write_manifest(spec, cohort));
}

}  // namespace sff
