#include "sfformer/feature_matrix.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <set>

#include "sfformer/error.hpp"

namespace sff {
namespace {

constexpr std::array<std::string_view, 3> kTraditionalNames = {"fa", "md", "nos"};

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::vector<std::string_view> lines_of(std::string_view text) {
  std::vector<std::string_view> out;
  for (auto line : split(text, '\n')) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

double parse_cell(std::string_view cell, std::size_t line_no) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
    throw Error(ErrorKind::kData, "bad numeric cell '" + std::string(cell) + "' on line " + std::to_string(line_no));
  }
  return v;
}

std::string cluster_column(std::size_t c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "cluster_%04zu", c + 1);
  return buf;
}

}  // namespace

std::string_view feature_kind_name(FeatureKind kind) noexcept {
  const auto i = static_cast<std::size_t>(kind);
  return i < kShapeKindCount ? shape_kind_name(static_cast<ShapeKind>(i)) : kTraditionalNames[i - kShapeKindCount];
}

std::optional<FeatureKind> parse_feature_kind(std::string_view name) noexcept {
  for (std::size_t i = 0; i < kFeatureKindCount; ++i) {
    if (feature_kind_name(static_cast<FeatureKind>(i)) == name) return static_cast<FeatureKind>(i);
  }
  return std::nullopt;
}

double feature_value(const ClusterFeatures& features, FeatureKind kind) {
  switch (kind) {
    case FeatureKind::kFA: return features.traditional.fa_mean.value;
    case FeatureKind::kMD: return features.traditional.md_mean.value;
    case FeatureKind::kNoS: return static_cast<double>(features.traditional.nos);
    default: break;
  }
  const Measure& m = features.shape[static_cast<ShapeKind>(kind)];
  return m.valid ? m.value : 0.0;
}

SubjectFeatures extract_features(const SubjectData& subject, const FeatureOptions& options) {
  SubjectFeatures out;
  out.subject_id = subject.subject_id;
  out.scores = subject.scores;
  out.clusters.reserve(subject.clusters.size());
  for (std::size_t k = 0; k < subject.clusters.size(); ++k) {
    const ScalarMap* fa = k < subject.fa.size() && subject.fa[k] ? &*subject.fa[k] : nullptr;
    const ScalarMap* md = k < subject.md.size() && subject.md[k] ? &*subject.md[k] : nullptr;
    out.has_fa |= fa != nullptr;
    out.has_md |= md != nullptr;
    out.clusters.push_back(compute_all(subject.clusters[k], options, fa, md));
  }
  return out;
}

FeatureMatrix assemble(std::span<const SubjectFeatures> subjects, FeatureKind kind, std::string_view assessment) {
  FeatureMatrix m;
  m.kind = kind;
  m.rows = subjects.size();
  m.cols = subjects.empty() ? 0 : subjects.front().clusters.size();
  m.values.resize(m.rows * m.cols);
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    const auto& subj = subjects[s];
    if (subj.clusters.size() != m.cols) {
      throw Error(ErrorKind::kData, "subject " + subj.subject_id + " has " + std::to_string(subj.clusters.size()) +
                                        " clusters, expected " + std::to_string(m.cols));
    }
    if (!assessment.empty()) {
      const auto it = subj.scores.find(std::string(assessment));
      if (it == subj.scores.end()) {
        throw Error(ErrorKind::kData,
                    "subject " + subj.subject_id + " lacks assessment '" + std::string(assessment) + "'");
      }
      m.target.push_back(it->second);
    }
    m.subject_ids.push_back(subj.subject_id);
    for (std::size_t c = 0; c < m.cols; ++c) m.at(s, c) = feature_value(subj.clusters[c], kind);
  }
  return m;
}

FeatureMatrix assemble(std::span<const SubjectData> subjects, FeatureKind kind, std::string_view assessment,
                       const FeatureOptions& options) {
  std::vector<SubjectFeatures> features;
  features.reserve(subjects.size());
  for (const auto& s : subjects) features.push_back(extract_features(s, options));
  return assemble(features, kind, assessment);
}

ColumnStats zscore_fit(const FeatureMatrix& matrix, std::span<const std::size_t> train_rows) {
  if (train_rows.size() < 2) throw Error(ErrorKind::kData, "z-score fit needs at least 2 training rows");
  ColumnStats stats;
  stats.mean.assign(matrix.cols, 0.0);
  stats.std.assign(matrix.cols, 0.0);
  const double n = static_cast<double>(train_rows.size());
  for (std::size_t r : train_rows) {
    for (std::size_t c = 0; c < matrix.cols; ++c) stats.mean[c] += matrix.at(r, c);
  }
  for (auto& m : stats.mean) m /= n;
  for (std::size_t r : train_rows) {
    for (std::size_t c = 0; c < matrix.cols; ++c) {
      const double d = matrix.at(r, c) - stats.mean[c];
      stats.std[c] += d * d;
    }
  }
  for (std::size_t c = 0; c < matrix.cols; ++c) {
    const double sd = std::sqrt(stats.std[c] / n);
    stats.std[c] = sd > 1e-12 * std::max(1.0, std::abs(stats.mean[c])) ? sd : 1.0;
  }
  return stats;
}

FeatureMatrix zscore_apply(const FeatureMatrix& matrix, const ColumnStats& stats) {
  if (stats.mean.size() != matrix.cols || stats.std.size() != matrix.cols) {
    throw Error(ErrorKind::kData, "normalization stats have " + std::to_string(stats.mean.size()) +
                                      " columns, matrix has " + std::to_string(matrix.cols));
  }
  FeatureMatrix out = matrix;
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t c = 0; c < out.cols; ++c) out.at(r, c) = (out.at(r, c) - stats.mean[c]) / stats.std[c];
  }
  return out;
}

ScalarStats fit_scalar_stats(std::span<const double> values, std::span<const std::size_t> rows) {
  if (rows.size() < 2) throw Error(ErrorKind::kData, "target standardization needs at least 2 rows");
  ScalarStats st;
  st.mean = 0.0;
  for (auto r : rows) st.mean += values[r];
  st.mean /= static_cast<double>(rows.size());
  double var = 0.0;
  for (auto r : rows) var += (values[r] - st.mean) * (values[r] - st.mean);
  const double sd = std::sqrt(var / static_cast<double>(rows.size()));
  st.std = sd > 1e-12 * std::max(1.0, std::abs(st.mean)) ? sd : 1.0;
  return st;
}

std::string write_wide_csv(const FeatureMatrix& matrix) {
  std::string out = "subject_id";
  for (std::size_t c = 0; c < matrix.cols; ++c) out += ',' + cluster_column(c);
  out += '\n';
  for (std::size_t r = 0; r < matrix.rows; ++r) {
    out += matrix.subject_ids[r];
    for (std::size_t c = 0; c < matrix.cols; ++c) out += ',' + format_double(matrix.at(r, c));
    out += '\n';
  }
  return out;
}

FeatureMatrix parse_wide_csv(std::string_view text, FeatureKind kind) {
  const auto lines = lines_of(text);
  if (lines.empty()) throw Error(ErrorKind::kData, "empty feature matrix file");
  const auto header = split(lines.front(), ',');
  if (header.empty() || header.front() != "subject_id") {
    throw Error(ErrorKind::kData, "feature matrix header must start with subject_id");
  }
  FeatureMatrix m;
  m.kind = kind;
  m.cols = header.size() - 1;
  std::set<std::string> seen;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split(lines[i], ',');
    if (cells.size() != header.size()) {
      throw Error(ErrorKind::kData, "line " + std::to_string(i + 1) + " has " + std::to_string(cells.size()) +
                                        " cells, header has " + std::to_string(header.size()));
    }
    std::string id(cells.front());
    if (!seen.insert(id).second) throw Error(ErrorKind::kData, "duplicate subject " + id);
    m.subject_ids.push_back(std::move(id));
    for (std::size_t c = 1; c < cells.size(); ++c) m.values.push_back(parse_cell(cells[c], i + 1));
  }
  m.rows = m.subject_ids.size();
  return m;
}

std::string write_long_csv(std::span<const SubjectFeatures> subjects, std::span<const FeatureKind> kinds) {
  std::string out = "subject_id,cluster_id";
  for (auto k : kinds) out += ',' + std::string(feature_kind_name(k));
  out += '\n';
  for (const auto& s : subjects) {
    for (std::size_t c = 0; c < s.clusters.size(); ++c) {
      out += s.subject_id + ',' + std::to_string(c + 1);
      for (auto k : kinds) out += ',' + format_double(feature_value(s.clusters[c], k));
      out += '\n';
    }
  }
  return out;
}

std::string write_scores_csv(std::span<const SubjectFeatures> subjects) {
  std::set<std::string> names;
  for (const auto& s : subjects) {
    for (const auto& [name, _] : s.scores) names.insert(name);
  }
  std::string out = "subject_id";
  for (const auto& n : names) out += ',' + n;
  out += '\n';
  for (const auto& s : subjects) {
    out += s.subject_id;
    for (const auto& n : names) {
      const auto it = s.scores.find(n);
      out += ',' + (it == s.scores.end() ? std::string() : format_double(it->second));
    }
    out += '\n';
  }
  return out;
}

std::map<std::string, std::map<std::string, double>> parse_scores_csv(std::string_view text) {
  const auto lines = lines_of(text);
  if (lines.empty()) throw Error(ErrorKind::kData, "empty scores file");
  const auto header = split(lines.front(), ',');
  if (header.front() != "subject_id") throw Error(ErrorKind::kData, "scores header must start with subject_id");
  std::map<std::string, std::map<std::string, double>> table;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split(lines[i], ',');
    if (cells.size() != header.size()) {
      throw Error(ErrorKind::kData, "scores line " + std::to_string(i + 1) + " has wrong cell count");
    }
    auto& row = table[std::string(cells.front())];
    for (std::size_t c = 1; c < cells.size(); ++c) {
      if (!cells[c].empty()) row[std::string(header[c])] = parse_cell(cells[c], i + 1);
    }
  }
  return table;
}

void attach_target(FeatureMatrix& matrix, const std::map<std::string, std::map<std::string, double>>& scores,
                   std::string_view assessment) {
  matrix.target.clear();
  for (const auto& id : matrix.subject_ids) {
    const auto it = scores.find(id);
    const auto jt = it == scores.end() ? std::map<std::string, double>::const_iterator{}
                                       : it->second.find(std::string(assessment));
    if (it == scores.end() || jt == it->second.end()) {
      throw Error(ErrorKind::kData, "subject " + id + " lacks assessment '" + std::string(assessment) + "'");
    }
    matrix.target.push_back(jt->second);
  }
}

std::string write_id_list(std::span<const std::string> ids) {
  std::string out;
  for (const auto& id : ids) out += id + '\n';
  return out;
}

std::vector<std::string> parse_id_list(std::string_view text) {
  std::vector<std::string> ids;
  for (auto line : lines_of(text)) ids.emplace_back(line);
  return ids;
}

std::vector<FeatureKind> available_kinds(std::span<const SubjectFeatures> subjects) {
  bool fa = !subjects.empty(), md = !subjects.empty();
  for (const auto& s : subjects) {
    fa &= s.has_fa;
    md &= s.has_md;
  }
  std::vector<FeatureKind> kinds;
  for (std::size_t k = 0; k < kFeatureKindCount; ++k) {
    const auto kind = static_cast<FeatureKind>(k);
    if ((kind == FeatureKind::kFA && !fa) || (kind == FeatureKind::kMD && !md)) continue;
    kinds.push_back(kind);
  }
  return kinds;
}

std::vector<FeatureKind> write_feature_dir(const std::filesystem::path& dir,
                                           std::span<const SubjectFeatures> subjects) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());
  const auto kinds = available_kinds(subjects);
  for (auto kind : kinds) {
    write_text_file(dir / (std::string(feature_kind_name(kind)) + ".csv"), write_wide_csv(assemble(subjects, kind, "")));
  }
  write_text_file(dir / "features_long.csv", write_long_csv(subjects, kinds));
  write_text_file(dir / "scores.csv", write_scores_csv(subjects));
  return kinds;
}

std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace sff
