#include "sfformer/bundle_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <regex>
#include <sstream>

#include "sfformer/error.hpp"

namespace sff {
namespace {

constexpr std::string_view kBundleMagic = "SLB1";
constexpr std::string_view kScalarMagic = "SLS1";

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const noexcept { return pos_; }
  bool at_end() const noexcept { return pos_ == bytes_.size(); }

  std::uint32_t u32() {
    require(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64() {
    require(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  void magic(std::string_view expected) {
    if (bytes_.size() < 3 || std::memcmp(bytes_.data(), expected.data(), 3) != 0) {
      throw FormatError(FormatErrorCode::kBadMagic, 0, "expected " + std::string(expected));
    }
    if (bytes_.size() < 4) throw FormatError(FormatErrorCode::kTruncated, 3, "incomplete magic");
    if (bytes_[3] != static_cast<std::uint8_t>(expected[3])) {
      throw FormatError(FormatErrorCode::kBadVersion, 3,
                        "version byte '" + std::string(1, static_cast<char>(bytes_[3])) + "'");
    }
    pos_ = 4;
  }

  // Guards per-item allocations against absurd declared counts.
  void require_items(std::uint64_t count, std::uint64_t item_size) const {
    if (count * item_size > bytes_.size() - pos_) {
      throw FormatError(FormatErrorCode::kTruncated, bytes_.size(),
                        "declared count " + std::to_string(count) + " exceeds payload");
    }
  }

 private:
  void require(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(FormatErrorCode::kTruncated, bytes_.size(),
                        "needed " + std::to_string(n) + " more bytes at " + std::to_string(pos_));
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

class ByteWriter {
 public:
  void raw(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

bool looks_binary(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 3 && bytes[0] == 'S' && bytes[1] == 'L' && bytes[2] == 'B';
}

FiberCluster parse_binary_bundle(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  in.magic(kBundleMagic);
  const std::uint32_t n = in.u32();
  in.require_items(n, 4);
  FiberCluster cluster;
  cluster.streamlines.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t header_at = in.offset();
    const std::uint32_t m = in.u32();
    if (m < 2) {
      throw FormatError(FormatErrorCode::kShortStreamline, header_at,
                        "streamline " + std::to_string(i) + " has " + std::to_string(m) + " points");
    }
    in.require_items(m, 24);
    Streamline s;
    s.points.resize(m);
    for (auto& p : s.points) {
      for (auto& c : p) {
        const std::size_t at = in.offset();
        c = in.f64();
        if (!std::isfinite(c)) {
          throw FormatError(FormatErrorCode::kNonFinite, at, "streamline " + std::to_string(i));
        }
      }
    }
    cluster.streamlines.push_back(std::move(s));
  }
  if (!in.at_end()) {
    throw FormatError(FormatErrorCode::kTrailingBytes, in.offset(), "after declared streamlines");
  }
  return cluster;
}

bool parse_number(std::string_view token, double& out) {
  const char* first = token.data();
  const char* last = token.data() + token.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

FiberCluster parse_text_bundle(std::span<const std::uint8_t> bytes) {
  const std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  for (std::size_t i = 0; i < std::min<std::size_t>(4, text.size()); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (c < 0x20 && c != '\n' && c != '\r' && c != '\t') {
      throw FormatError(FormatErrorCode::kBadMagic, i, "neither SLB1 nor text");
    }
  }
  FiberCluster cluster;
  std::size_t line_start = 0;
  while (line_start < text.size()) {
    std::size_t line_end = text.find('\n', line_start);
    if (line_end == std::string_view::npos) line_end = text.size();
    std::string_view line = text.substr(line_start, line_end - line_start);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);

    Streamline s;
    std::size_t point_start = 0;
    bool any_content = line.find_first_not_of(" \t\r") != std::string_view::npos;
    while (any_content) {
      std::size_t point_end = line.find(';', point_start);
      const bool last = point_end == std::string_view::npos;
      if (last) point_end = line.size();
      const std::string_view chunk = line.substr(point_start, point_end - point_start);
      const std::size_t chunk_offset = line_start + point_start;

      std::vector<double> coords;
      std::size_t pos = 0;
      while (pos < chunk.size()) {
        pos = chunk.find_first_not_of(" \t\r", pos);
        if (pos == std::string_view::npos) break;
        std::size_t end = chunk.find_first_of(" \t\r", pos);
        if (end == std::string_view::npos) end = chunk.size();
        double v = 0.0;
        const std::string_view token = chunk.substr(pos, end - pos);
        if (!parse_number(token, v)) {
          throw FormatError(FormatErrorCode::kSyntax, chunk_offset + pos,
                            "bad coordinate '" + std::string(token) + "'");
        }
        if (!std::isfinite(v)) {
          throw FormatError(FormatErrorCode::kNonFinite, chunk_offset + pos,
                            "streamline " + std::to_string(cluster.size()));
        }
        coords.push_back(v);
        pos = end;
      }
      if (coords.empty() && last) break;  // trailing ';'
      if (coords.size() != 3) {
        throw FormatError(FormatErrorCode::kSyntax, chunk_offset,
                          "point needs 3 coordinates, got " + std::to_string(coords.size()));
      }
      s.points.push_back({coords[0], coords[1], coords[2]});
      if (last) break;
      point_start = point_end + 1;
    }
    if (any_content) {
      if (s.points.size() < 2) {
        throw FormatError(FormatErrorCode::kShortStreamline, line_start,
                          "streamline " + std::to_string(cluster.size()) + " has " +
                              std::to_string(s.points.size()) + " points");
      }
      cluster.streamlines.push_back(std::move(s));
    }
    line_start = line_end + 1;
  }
  return cluster;
}

}  // namespace

std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

void validate_cluster(const FiberCluster& cluster) {
  for (std::size_t i = 0; i < cluster.size(); ++i) {
    const auto& pts = cluster.streamlines[i].points;
    if (pts.size() < 2) {
      throw FormatError(FormatErrorCode::kShortStreamline, 0,
                        "streamline " + std::to_string(i) + " in cluster " + std::to_string(cluster.id));
    }
    for (const auto& p : pts) {
      for (double c : p) {
        if (!std::isfinite(c)) {
          throw FormatError(FormatErrorCode::kNonFinite, 0,
                            "streamline " + std::to_string(i) + " in cluster " +
                                std::to_string(cluster.id));
        }
      }
    }
  }
}

FiberCluster parse_bundle(std::span<const std::uint8_t> bytes) {
  return looks_binary(bytes) ? parse_binary_bundle(bytes) : parse_text_bundle(bytes);
}

std::vector<std::uint8_t> write_bundle(const FiberCluster& cluster) {
  ByteWriter out;
  out.raw(kBundleMagic);
  out.u32(static_cast<std::uint32_t>(cluster.size()));
  for (const auto& s : cluster.streamlines) {
    out.u32(static_cast<std::uint32_t>(s.points.size()));
    for (const auto& p : s.points) {
      for (double c : p) out.f64(c);
    }
  }
  return out.take();
}

std::string write_bundle_text(const FiberCluster& cluster) {
  std::string out;
  for (const auto& s : cluster.streamlines) {
    for (std::size_t t = 0; t < s.points.size(); ++t) {
      if (t > 0) out += "; ";
      const auto& p = s.points[t];
      out += format_double(p[0]) + ' ' + format_double(p[1]) + ' ' + format_double(p[2]);
    }
    out += '\n';
  }
  return out;
}

ScalarMap parse_scalar_map(std::span<const std::uint8_t> bytes, const FiberCluster& cluster,
                           ScalarKind kind) {
  ByteReader in(bytes);
  in.magic(kScalarMagic);
  const std::size_t n_at = in.offset();
  const std::uint32_t n = in.u32();
  if (n != cluster.size()) {
    throw FormatError(FormatErrorCode::kShapeMismatch, n_at,
                      "scalar map has " + std::to_string(n) + " streamlines, cluster has " +
                          std::to_string(cluster.size()));
  }
  ScalarMap map;
  map.kind = kind;
  map.values.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t m_at = in.offset();
    const std::uint32_t m = in.u32();
    const std::size_t expected = cluster.streamlines[i].points.size();
    if (m != expected) {
      throw FormatError(FormatErrorCode::kShapeMismatch, m_at,
                        "streamline " + std::to_string(i) + " has " + std::to_string(m) +
                            " values, cluster has " + std::to_string(expected) + " points");
    }
    in.require_items(m, 8);
    map.values[i].resize(m);
    for (std::uint32_t t = 0; t < m; ++t) {
      const std::size_t at = in.offset();
      const double v = in.f64();
      const std::string where = "streamline " + std::to_string(i) + " point " + std::to_string(t);
      if (!std::isfinite(v)) throw FormatError(FormatErrorCode::kNonFinite, at, where);
      if (kind == ScalarKind::kFA && (v < 0.0 || v > 1.0)) {
        throw FormatError(FormatErrorCode::kOutOfRange, at, where + ": FA " + format_double(v));
      }
      if (kind == ScalarKind::kMD && v < 0.0) {
        throw FormatError(FormatErrorCode::kOutOfRange, at, where + ": MD " + format_double(v));
      }
      map.values[i][t] = v;
    }
  }
  if (!in.at_end()) {
    throw FormatError(FormatErrorCode::kTrailingBytes, in.offset(), "after declared values");
  }
  return map;
}

std::vector<std::uint8_t> write_scalar_map(const ScalarMap& map) {
  ByteWriter out;
  out.raw(kScalarMagic);
  out.u32(static_cast<std::uint32_t>(map.values.size()));
  for (const auto& row : map.values) {
    out.u32(static_cast<std::uint32_t>(row.size()));
    for (double v : row) out.f64(v);
  }
  return out.take();
}

std::map<std::string, double> parse_scores(std::string_view text) {
  std::map<std::string, double> scores;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty() && line.front() != '#') {
      const auto tab = line.find('\t');
      double value = 0.0;
      if (tab == std::string_view::npos || tab == 0 || !parse_number(line.substr(tab + 1), value) ||
          !std::isfinite(value)) {
        throw Error(ErrorKind::kData, "malformed scores line " + std::to_string(line_no) + ": '" +
                                          std::string(line) + "'");
      }
      const std::string name(line.substr(0, tab));
      if (!scores.emplace(name, value).second) {
        throw Error(ErrorKind::kData, "duplicate assessment '" + name + "' in scores file");
      }
    }
    start = end + 1;
  }
  return scores;
}

std::string write_scores(const std::map<std::string, double>& scores) {
  std::string out;
  for (const auto& [name, value] : scores) out += name + '\t' + format_double(value) + '\n';
  return out;
}

std::string cluster_file_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "cluster_%04d.slb", id);
  return buf;
}

std::string scalar_file_name(ScalarKind kind, int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04d.sls", kind == ScalarKind::kFA ? "fa" : "md", id);
  return buf;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::kIo, "read failed: " + path.string());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

SubjectData load_subject(const std::filesystem::path& dir, const LoadOptions& options) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw Error(ErrorKind::kIo, "unreadable subject directory " + dir.string());

  const std::size_t count = options.cluster_count;
  SubjectData subject;
  subject.subject_id = dir.filename().string();
  subject.clusters.resize(count);
  subject.fa.resize(count);
  subject.md.resize(count);
  for (std::size_t k = 0; k < count; ++k) subject.clusters[k].id = static_cast<int>(k + 1);

  static const std::regex kClusterName(R"(cluster_(\d+)\.(slb|txt))");
  static const std::regex kScalarName(R"((fa|md)_(\d+)\.sls)");
  std::vector<fs::path> cluster_files(count);
  std::vector<fs::path> fa_files(count), md_files(count);
  bool have_scores = false;

  fs::directory_iterator it(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "unreadable subject directory " + dir.string() + ": " + ec.message());
  std::vector<fs::directory_entry> entries(it, fs::directory_iterator());
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.path().filename() < b.path().filename(); });

  auto index_of = [&](const std::string& digits, const std::string& name) {
    const std::size_t k = std::stoul(digits);
    if (k < 1 || k > count) {
      throw Error(ErrorKind::kData, subject.subject_id + ": index out of range 1.." +
                                        std::to_string(count) + " in " + name);
    }
    return k - 1;
  };

  for (const auto& entry : entries) {
    const std::string name = entry.path().filename().string();
    std::smatch m;
    if (std::regex_match(name, m, kClusterName)) {
      const std::size_t k = index_of(m[1].str(), name);
      if (!cluster_files[k].empty()) {
        throw Error(ErrorKind::kData, subject.subject_id + ": duplicate cluster index " +
                                          std::to_string(k + 1) + " (" +
                                          cluster_files[k].filename().string() + ", " + name + ")");
      }
      cluster_files[k] = entry.path();
    } else if (std::regex_match(name, m, kScalarName)) {
      const std::size_t k = index_of(m[2].str(), name);
      auto& slot = m[1].str() == "fa" ? fa_files[k] : md_files[k];
      if (!slot.empty()) {
        throw Error(ErrorKind::kData, subject.subject_id + ": duplicate scalar map index " + name);
      }
      slot = entry.path();
    } else if (name == "scores.tsv") {
      have_scores = true;
    }
  }

  for (std::size_t k = 0; k < count; ++k) {
    const int id = static_cast<int>(k + 1);
    if (!cluster_files[k].empty()) {
      try {
        subject.clusters[k] = parse_bundle(read_file_bytes(cluster_files[k]));
      } catch (const FormatError& e) {
        throw Error(ErrorKind::kData, cluster_files[k].string() + ": " + e.what());
      }
      subject.clusters[k].id = id;
    }
    auto load_map = [&](const fs::path& file, ScalarKind kind, std::optional<ScalarMap>& slot) {
      if (file.empty()) return;
      try {
        slot = parse_scalar_map(read_file_bytes(file), subject.clusters[k], kind);
      } catch (const FormatError& e) {
        throw Error(ErrorKind::kData, file.string() + ": " + e.what());
      }
    };
    load_map(fa_files[k], ScalarKind::kFA, subject.fa[k]);
    load_map(md_files[k], ScalarKind::kMD, subject.md[k]);
  }

  if (have_scores) {
    const auto bytes = read_file_bytes(dir / "scores.tsv");
    try {
      subject.scores = parse_scores(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    } catch (const Error& e) {
      throw Error(ErrorKind::kData, subject.subject_id + ": " + e.what());
    }
  } else if (!options.assessments.empty()) {
    throw Error(ErrorKind::kData, subject.subject_id + ": missing scores.tsv");
  }
  for (const auto& name : options.assessments) {
    if (!subject.scores.contains(name)) {
      throw Error(ErrorKind::kData, subject.subject_id + ": scores file lacks assessment '" + name + "'");
    }
  }
  return subject;
}

std::vector<std::filesystem::path> list_subject_dirs(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::directory_iterator it(root, ec);
  if (ec) throw Error(ErrorKind::kIo, "unreadable root " + root.string() + ": " + ec.message());
  std::vector<fs::path> dirs;
  for (const auto& entry : it) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

std::size_t infer_cluster_count(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  static const std::regex kClusterName(R"(cluster_(\d+)\.(slb|txt))");
  std::size_t highest = 0;
  for (const auto& dir : list_subject_dirs(root)) {
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(dir, ec)) {
      const std::string name = entry.path().filename().string();
      std::smatch m;
      if (std::regex_match(name, m, kClusterName)) highest = std::max<std::size_t>(highest, std::stoul(m[1].str()));
    }
    if (ec) throw Error(ErrorKind::kIo, "unreadable subject directory " + dir.string() + ": " + ec.message());
  }
  return highest;
}

std::vector<SubjectData> load_root(const std::filesystem::path& root, const LoadOptions& options) {
  const auto dirs = list_subject_dirs(root);
  std::vector<SubjectData> subjects;
  subjects.reserve(dirs.size());
  for (const auto& d : dirs) subjects.push_back(load_subject(d, options));
  return subjects;
}

void save_subject(const std::filesystem::path& root, const SubjectData& subject) {
  namespace fs = std::filesystem;
  const fs::path dir = root / subject.subject_id;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t k = 0; k < subject.clusters.size(); ++k) {
    const auto& cluster = subject.clusters[k];
    if (cluster.empty()) continue;
    write_file_bytes(dir / cluster_file_name(cluster.id), write_bundle(cluster));
    if (k < subject.fa.size() && subject.fa[k]) {
      write_file_bytes(dir / scalar_file_name(ScalarKind::kFA, cluster.id), write_scalar_map(*subject.fa[k]));
    }
    if (k < subject.md.size() && subject.md[k]) {
      write_file_bytes(dir / scalar_file_name(ScalarKind::kMD, cluster.id), write_scalar_map(*subject.md[k]));
    }
  }
  write_text_file(dir / "scores.tsv", write_scores(subject.scores));
}

}  // namespace sff
