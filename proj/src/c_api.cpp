#include "sfformer/sfformer.h"

#include <cstdlib>
#include <cstring>
#include <mutex>
#include <numeric>
#include <string>

#include "sfformer/bundle_io.hpp"
#include "sfformer/error.hpp"
#include "sfformer/feature_matrix.hpp"
#include "sfformer/gradcheck.hpp"
#include "sfformer/shape_features.hpp"
#include "sfformer/synth.hpp"
#include "sfformer/training.hpp"

struct sff_cluster {
  sff::FiberCluster cluster;
};

namespace {

thread_local std::string last_error;

sff_status fail(sff_status status, const std::string& message) {
  last_error = message;
  return status;
}

template <typename Fn>
sff_status guarded(Fn&& fn) {
  try {
    last_error.clear();
    fn();
    return SFF_OK;
  } catch (const sff::Error& e) {
    return fail(static_cast<sff_status>(e.kind()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(SFF_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(SFF_ERR_INTERNAL, e.what());
  }
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

void require(bool condition, const char* message) {
  if (!condition) throw sff::Error(sff::ErrorKind::kUsage, message);
}

sff::FeatureKind feature_from(const char* name, const char* role) {
  require(name && *name, role);
  const auto kind = sff::parse_feature_kind(name);
  if (!kind) throw sff::Error(sff::ErrorKind::kUsage, std::string("unknown feature '") + name + "'");
  return *kind;
}

std::vector<sff::TargetTerm> parse_target(const std::string& text) {
  std::vector<sff::TargetTerm> terms;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find(',', start), text.size());
    const std::string item = text.substr(start, end - start);
    const std::size_t colon = item.find(':');
    const std::string name = item.substr(0, colon);
    const auto kind = sff::parse_shape_kind(name);
    if (!kind) throw sff::Error(sff::ErrorKind::kUsage, "unknown target descriptor '" + name + "'");
    double weight = 1.0;
    if (colon != std::string::npos) {
      char* tail = nullptr;
      const std::string w = item.substr(colon + 1);
      weight = std::strtod(w.c_str(), &tail);
      if (w.empty() || *tail != '\0') throw sff::Error(sff::ErrorKind::kUsage, "bad target weight '" + w + "'");
    }
    terms.push_back({*kind, weight});
    start = end + 1;
  }
  return terms;
}

struct RunContext {
  sff::Dataset data;
  sff::Task task;
  sff::ModelConfig base;
  sff::HyperParams hp;
  sff::TrainSettings settings;
};

RunContext make_context(const sff_run_options* o, bool needs_primary) {
  require(o != nullptr, "null options");
  require(o->features_dir && *o->features_dir, "features directory is required");
  require(o->assessment && *o->assessment, "assessment is required");
  RunContext ctx;
  if (needs_primary) {
    ctx.task.primary = feature_from(o->primary, "primary feature is required");
    if (o->helper && *o->helper) ctx.task.helper = feature_from(o->helper, "helper");
  }
  ctx.data = sff::load_dataset(o->features_dir, o->assessment);
  if (needs_primary) {
    if (!ctx.data.matrices.contains(ctx.task.primary)) {
      throw sff::Error(sff::ErrorKind::kUsage,
                       "no '" + std::string(sff::feature_kind_name(ctx.task.primary)) + "' matrix in features directory");
    }
    if (ctx.task.helper && !ctx.data.matrices.contains(*ctx.task.helper)) {
      throw sff::Error(sff::ErrorKind::kUsage, "no helper matrix '" +
                                                   std::string(sff::feature_kind_name(*ctx.task.helper)) +
                                                   "' in features directory");
    }
  }
  ctx.base.fusion = ctx.task.helper ? sff::FusionMode::kCrossFusion : sff::FusionMode::kSelfBaseline;
  ctx.base.helper_evolves = o->helper_evolves != 0;
  ctx.base.readout = o->mean_pool ? sff::Readout::kMeanPool : sff::Readout::kCls;
  ctx.hp.learning_rate = o->learning_rate;
  ctx.hp.weight_decay = o->weight_decay;
  ctx.hp.token_dim = o->token_dim;
  ctx.hp.n_layers = o->n_layers;
  ctx.hp.dropout_attn = o->dropout_attn;
  ctx.hp.dropout_ffn = o->dropout_ffn;
  ctx.hp.dropout_residual = o->dropout_residual;
  require(o->learning_rate > 0.0 && o->weight_decay >= 0.0, "learning rate must be > 0 and weight decay >= 0");
  require(o->validation_fraction > 0.0 && o->validation_fraction < 1.0, "validation fraction must be in (0, 1)");
  ctx.settings.max_epochs = o->max_epochs;
  ctx.settings.patience = o->patience;
  ctx.settings.batch_size = o->batch_size;
  ctx.settings.validation_fraction = o->validation_fraction;
  return ctx;
}

nlohmann::json with_command(nlohmann::json j, const char* command, const sff_run_options* o) {
  j["command"] = command;
  j["assessment"] = o->assessment;
  j["settings"] = {{"max_epochs", o->max_epochs},
                   {"patience", o->patience},
                   {"batch_size", o->batch_size},
                   {"validation_fraction", o->validation_fraction}};
  return j;
}

}  // namespace

extern "C" {

const char* sff_last_error(void) { return last_error.c_str(); }
const char* sff_version(void) { return "1.0.0"; }
void sff_free_string(char* s) { std::free(s); }
void sff_free_buffer(uint8_t* bytes) { std::free(bytes); }

const char* sff_feature_name(int kind) {
  if (kind < 0 || kind >= static_cast<int>(sff::kFeatureKindCount)) return nullptr;
  return sff::feature_kind_name(static_cast<sff::FeatureKind>(kind)).data();
}

int sff_feature_index(const char* name) {
  if (!name) return -1;
  const auto kind = sff::parse_feature_kind(name);
  return kind ? static_cast<int>(*kind) : -1;
}

sff_status sff_cluster_parse(const uint8_t* bytes, size_t length, sff_cluster** out) {
  return guarded([&] {
    require(out != nullptr && (bytes != nullptr || length == 0), "null argument");
    auto c = std::make_unique<sff_cluster>();
    c->cluster = sff::parse_bundle(std::span(bytes, length));
    *out = c.release();
  });
}

sff_status sff_cluster_load(const char* path, sff_cluster** out) {
  return guarded([&] {
    require(path != nullptr && out != nullptr, "null argument");
    const auto bytes = sff::read_file_bytes(path);
    auto c = std::make_unique<sff_cluster>();
    c->cluster = sff::parse_bundle(bytes);
    *out = c.release();
  });
}

sff_status sff_cluster_write(const sff_cluster* cluster, uint8_t** bytes, size_t* length) {
  return guarded([&] {
    require(cluster && bytes && length, "null argument");
    const auto data = sff::write_bundle(cluster->cluster);
    auto* buf = static_cast<uint8_t*>(std::malloc(data.size()));
    if (!buf) throw std::bad_alloc();
    std::memcpy(buf, data.data(), data.size());
    *bytes = buf;
    *length = data.size();
  });
}

size_t sff_cluster_streamline_count(const sff_cluster* cluster) { return cluster ? cluster->cluster.size() : 0; }

sff_status sff_cluster_point_count(const sff_cluster* cluster, size_t streamline, size_t* out) {
  return guarded([&] {
    require(cluster && out, "null argument");
    if (streamline >= cluster->cluster.size()) {
      throw sff::Error(sff::ErrorKind::kUsage, "streamline index " + std::to_string(streamline) + " out of range");
    }
    *out = cluster->cluster.streamlines[streamline].points.size();
  });
}

namespace {

sff::FeatureOptions to_options(const sff_feature_options* o) {
  require(o != nullptr, "null argument");
  require(o->spacing > 0.0, "spacing must be positive");
  sff::FeatureOptions options;
  options.spacing = o->spacing;
  options.surface = o->surface_faces ? sff::SurfaceMode::kFaces : sff::SurfaceMode::kVoxels;
  options.cylinder_diameter = o->cylinder_diameter != 0;
  options.raster = o->points_only ? sff::RasterMode::kPointsOnly : sff::RasterMode::kSegmentWalk;
  return options;
}

sff_feature_options with_spacing(double spacing) {
  sff_feature_options o;
  sff_feature_options_init(&o);
  o.spacing = spacing;
  return o;
}

}  // namespace

void sff_feature_options_init(sff_feature_options* o) {
  if (!o) return;
  o->spacing = 1.0;
  o->surface_faces = 0;
  o->cylinder_diameter = 0;
  o->points_only = 0;
}

sff_status sff_cluster_features(const sff_cluster* cluster, double spacing, double* values, int* valid) {
  const auto o = with_spacing(spacing);
  return sff_cluster_features_ex(cluster, &o, values, valid);
}

sff_status sff_cluster_features_ex(const sff_cluster* cluster, const sff_feature_options* o, double* values,
                                   int* valid) {
  return guarded([&] {
    require(cluster && values, "null argument");
    const auto options = to_options(o);
    const auto f = sff::compute_all(cluster->cluster, options);
    for (std::size_t k = 0; k < sff::kFeatureKindCount; ++k) {
      const auto kind = static_cast<sff::FeatureKind>(k);
      values[k] = sff::feature_value(f, kind);
      if (!valid) continue;
      if (sff::is_shape_kind(kind)) {
        valid[k] = f.shape.values[k].valid ? 1 : 0;
      } else {
        valid[k] = kind == sff::FeatureKind::kNoS ? 1 : 0;
      }
    }
  });
}

void sff_cluster_free(sff_cluster* cluster) { delete cluster; }

void sff_synth_options_init(sff_synth_options* o) {
  if (!o) return;
  const sff::SynthSpec d;
  o->subjects = d.subjects;
  o->clusters = d.clusters;
  o->streamlines = d.streamlines;
  o->points = d.points;
  o->family = "mixed";
  o->target = "volume";
  o->sigma = d.sigma;
  o->seed = d.seed;
  o->spacing = d.spacing;
  o->scalar_maps = 0;
  o->permute_targets = 0;
  o->assessment = "SYNTH";
}

sff_status sff_synth(const sff_synth_options* o, const char* root) {
  return guarded([&] {
    require(o && root && *root, "null argument");
    sff::SynthSpec spec;
    spec.subjects = o->subjects;
    spec.clusters = o->clusters;
    spec.streamlines = o->streamlines;
    spec.points = o->points;
    const auto family = sff::parse_geometry_family(o->family ? o->family : "mixed");
    if (!family) throw sff::Error(sff::ErrorKind::kUsage, std::string("unknown geometry family '") + o->family + "'");
    spec.family = *family;
    spec.target = parse_target(o->target ? o->target : "volume");
    spec.sigma = o->sigma;
    spec.seed = o->seed;
    spec.spacing = o->spacing;
    spec.scalar_maps = o->scalar_maps != 0;
    spec.permute_targets = o->permute_targets != 0;
    spec.assessment = o->assessment ? o->assessment : "SYNTH";
    const auto cohort = sff::generate_cohort(spec);
    sff::write_cohort(root, spec, cohort);
  });
}

sff_status sff_extract_features(const char* root, const char* out_dir, double spacing, size_t cluster_count,
                                size_t threads, size_t* failed, char** log) {
  const auto o = with_spacing(spacing);
  return sff_extract_features_ex(root, out_dir, &o, cluster_count, threads, failed, log);
}

sff_status sff_extract_features_ex(const char* root, const char* out_dir, const sff_feature_options* o,
                                   size_t cluster_count, size_t threads, size_t* failed, char** log) {
  return guarded([&] {
    require(root && out_dir, "null argument");
    const auto options = to_options(o);
    const auto dirs = sff::list_subject_dirs(root);
    if (dirs.empty()) throw sff::Error(sff::ErrorKind::kData, std::string("no subject directories under ") + root);
    sff::LoadOptions load;
    load.cluster_count = cluster_count ? cluster_count : sff::infer_cluster_count(root);
    if (load.cluster_count == 0) throw sff::Error(sff::ErrorKind::kData, std::string("no cluster files under ") + root);

    std::vector<std::optional<sff::SubjectFeatures>> results(dirs.size());
    std::vector<std::string> errors(dirs.size());
    sff::parallel_for(dirs.size(), threads, [&](std::size_t i) {
      try {
        results[i] = sff::extract_features(sff::load_subject(dirs[i], load), options);
      } catch (const std::exception& e) {
        errors[i] = dirs[i].filename().string() + ": " + e.what();
      }
    });
    std::vector<sff::SubjectFeatures> ok;
    std::string messages;
    std::size_t n_failed = 0;
    for (std::size_t i = 0; i < dirs.size(); ++i) {
      if (results[i]) {
        ok.push_back(std::move(*results[i]));
      } else {
        ++n_failed;
        messages += errors[i] + "\n";
      }
    }
    if (!ok.empty()) sff::write_feature_dir(out_dir, ok);
    if (failed) *failed = n_failed;
    if (log) *log = copy_string(messages);
    if (ok.empty()) throw sff::Error(sff::ErrorKind::kData, "every subject failed:\n" + messages);
  });
}

void sff_run_options_init(sff_run_options* o) {
  if (!o) return;
  const sff::HyperParams hp;
  const sff::TrainSettings ts;
  const sff::HyperRanges hr;
  *o = sff_run_options{};
  o->assessment = "SYNTH";
  o->primary = "volume";
  o->learning_rate = hp.learning_rate;
  o->weight_decay = hp.weight_decay;
  o->token_dim = hp.token_dim;
  o->n_layers = hp.n_layers;
  o->dropout_attn = hp.dropout_attn;
  o->dropout_ffn = hp.dropout_ffn;
  o->dropout_residual = hp.dropout_residual;
  o->max_epochs = ts.max_epochs;
  o->patience = ts.patience;
  o->batch_size = ts.batch_size;
  o->validation_fraction = ts.validation_fraction;
  o->seed = 1;
  o->threads = 1;
  o->trials = hr.trials;
  o->token_min = hr.token_min;
  o->token_max = hr.token_max;
}

sff_status sff_cv(const sff_run_options* o, char** report) {
  return guarded([&] {
    require(report != nullptr, "null argument");
    const auto ctx = make_context(o, true);
    const auto cv = sff::cross_validate(ctx.data, ctx.task, ctx.base, ctx.hp, ctx.settings, o->seed);
    *report = copy_string(with_command(sff::to_json(cv), "cv", o).dump(2) + "\n");
  });
}

sff_status sff_search(const sff_run_options* o, char** report) {
  return guarded([&] {
    require(report != nullptr, "null argument");
    const auto ctx = make_context(o, true);
    sff::HyperRanges ranges;
    ranges.trials = o->trials;
    ranges.token_min = o->token_min;
    ranges.token_max = o->token_max;
    const auto sr = sff::hyperparam_search(ctx.data, ctx.task, ctx.base, ranges, ctx.settings, o->seed, o->threads);
    if (!sr.best) throw sff::Error(sff::ErrorKind::kNumeric, "every search trial failed");
    *report = copy_string(with_command(sff::to_json(sr), "search", o).dump(2) + "\n");
  });
}

sff_status sff_select_helper(const sff_run_options* o, char** report) {
  return guarded([&] {
    require(report != nullptr, "null argument");
    const auto ctx = make_context(o, false);
    const auto sel = sff::select_helper_feature(ctx.data, ctx.base, ctx.hp, ctx.settings, o->seed, o->threads);
    *report = copy_string(with_command(sff::to_json(sel), "select-helper", o).dump(2) + "\n");
  });
}

sff_status sff_train(const sff_run_options* o, const char* checkpoint, char** report) {
  return guarded([&] {
    require(report != nullptr && checkpoint && *checkpoint, "checkpoint path is required");
    const auto ctx = make_context(o, true);
    const std::size_t n = ctx.data.size();
    if (n < 3) throw sff::Error(sff::ErrorKind::kData, "training needs at least 3 subjects");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    sff::ad::Rng rng(sff::derive_seed(o->seed, 30));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const auto n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(ctx.settings.validation_fraction * static_cast<double>(n))));
    std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> tr(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(val.begin(), val.end());
    std::sort(tr.begin(), tr.end());

    const auto& pm = ctx.data.matrix(ctx.task.primary);
    const auto p_stats = sff::zscore_fit(pm, tr);
    const auto p_norm = sff::zscore_apply(pm, p_stats);
    std::optional<sff::ColumnStats> h_stats;
    std::optional<sff::FeatureMatrix> h_norm;
    if (ctx.task.helper) {
      const auto& hm = ctx.data.matrix(*ctx.task.helper);
      h_stats = sff::zscore_fit(hm, tr);
      h_norm = sff::zscore_apply(hm, *h_stats);
    }
    const auto t_stats = sff::fit_scalar_stats(ctx.data.target, tr);
    sff::FoldData fd;
    fd.clusters = pm.cols;
    auto fill = [&](const std::vector<std::size_t>& rows, std::vector<double>& px, std::vector<double>& hx,
                    std::vector<double>& y) {
      for (auto r : rows) {
        const auto pr = p_norm.row(r);
        px.insert(px.end(), pr.begin(), pr.end());
        if (h_norm) {
          const auto hr = h_norm->row(r);
          hx.insert(hx.end(), hr.begin(), hr.end());
        }
        y.push_back((ctx.data.target[r] - t_stats.mean) / t_stats.std);
      }
    };
    fill(tr, fd.train_primary, fd.train_helper, fd.train_target);
    fill(val, fd.val_primary, fd.val_helper, fd.val_target);
    const auto result = sff::train(fd, ctx.base, ctx.hp, ctx.settings, sff::derive_seed(o->seed, 31));

    sff::write_file_bytes(checkpoint, sff::ad::write_checkpoint(result.params.named()));
    sff::write_text_file(std::string(checkpoint) + ".config", sff::write_model_config(result.config));

    nlohmann::json j;
    j["task"] = {{"primary", std::string(sff::feature_kind_name(ctx.task.primary))},
                 {"fusion", ctx.task.helper ? "cross" : "self"}};
    j["task"]["helper"] =
        ctx.task.helper ? nlohmann::json(std::string(sff::feature_kind_name(*ctx.task.helper))) : nlohmann::json();
    j["hyperparams"] = sff::to_json(ctx.hp);
    j["seeds"] = {{"run", o->seed}, {"train", sff::derive_seed(o->seed, 31)}};
    j["train_count"] = tr.size();
    j["val_count"] = val.size();
    j["best_epoch"] = result.history.best_epoch;
    j["best_val_loss"] = result.history.best_val_loss;
    j["train_loss"] = result.history.train_loss;
    j["val_loss"] = result.history.val_loss;
    j["normalization"] = {{"primary_mean", p_stats.mean},
                          {"primary_std", p_stats.std},
                          {"target_mean", t_stats.mean},
                          {"target_std", t_stats.std}};
    if (h_stats) {
      j["normalization"]["helper_mean"] = h_stats->mean;
      j["normalization"]["helper_std"] = h_stats->std;
    }
    j["checkpoint"] = checkpoint;
    j["folds"] = nlohmann::json::array();
    j["trials"] = nlohmann::json::array();
    *report = copy_string(with_command(j, "train", o).dump(2) + "\n");
  });
}

sff_status sff_gradcheck(const char* corrupt_op, char** table, int* passed) {
  return guarded([&] {
    sff::GradcheckOptions options;
    if (corrupt_op) options.corrupt_op = corrupt_op;
    const auto report = sff::run_gradcheck(options);
    if (table) *table = copy_string(sff::format_gradcheck(report));
    if (passed) *passed = report.passed() ? 1 : 0;
  });
}

}  // extern "C"
