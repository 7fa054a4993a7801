#include "sfformer/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "sfformer/error.hpp"

namespace sff {
namespace {

using ad::Tensor;

std::vector<double> gather_rows(const FeatureMatrix& m, std::span<const std::size_t> rows) {
  std::vector<double> out;
  out.reserve(rows.size() * m.cols);
  for (auto r : rows) {
    const auto row = m.row(r);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

void shuffle(std::vector<std::size_t>& v, ad::Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

double mse(std::span<const double> a, std::span<const double> b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
  return total / static_cast<double>(a.size());
}

std::vector<std::vector<double>> snapshot(std::span<const ad::NamedTensor> params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void restore(std::span<const ad::NamedTensor> params, const std::vector<std::vector<double>>& values) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].tensor;
    std::ranges::copy(values[k], t.mutable_data().begin());
  }
}

}  // namespace

double pearson_r(std::span<const double> prediction, std::span<const double> actual) {
  if (prediction.size() != actual.size()) {
    throw Error(ErrorKind::kUsage, "pearson_r: length mismatch " + std::to_string(prediction.size()) + " vs " +
                                       std::to_string(actual.size()));
  }
  const std::size_t n = prediction.size();
  if (n < 2) throw Error(ErrorKind::kUsage, "pearson_r: needs at least 2 values");
  const double mx = std::accumulate(prediction.begin(), prediction.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(actual.begin(), actual.end(), 0.0) / static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = prediction[i] - mx;
    const double dy = actual[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw Error(ErrorKind::kNumeric, "pearson_r: undefined correlation (constant input)");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::string format_mean_std(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f±%.3f", mean, std);
  return buf;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

void HyperRanges::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kUsage, "hyperparameter ranges: " + m); };
  if (!(lr_min > 0.0 && lr_min <= lr_max)) fail("learning rate range");
  if (!(wd_min > 0.0 && wd_min <= wd_max)) fail("weight decay range");
  if (token_min > token_max || (token_max / 8) * 8 < token_min) fail("token range admits no multiple of 8");
  if (layers_min < 1 || layers_min > layers_max || layers_max > 4) fail("layer range");
  if (!(attn_min >= 0.0 && attn_min <= attn_max && attn_max <= 0.5)) fail("attention dropout range");
  if (!(ffn_min >= 0.0 && ffn_min <= ffn_max && ffn_max <= 0.5)) fail("feed-forward dropout range");
  if (!(residual_min >= 0.0 && residual_min <= residual_max && residual_max <= 0.2)) fail("residual dropout range");
  if (trials < 1) fail("trials must be >= 1");
}

HyperParams sample_hyperparams(const HyperRanges& r, ad::Rng& rng) {
  auto log_uniform = [&](double lo, double hi) {
    return lo == hi ? lo : std::exp(rng.uniform(std::log(lo), std::log(hi)));
  };
  auto int_uniform = [&](std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); };
  HyperParams hp;
  hp.learning_rate = log_uniform(r.lr_min, r.lr_max);
  hp.weight_decay = log_uniform(r.wd_min, r.wd_max);
  const std::size_t lo8 = (r.token_min + 7) / 8 * 8;
  const std::size_t hi8 = r.token_max / 8 * 8;
  const std::size_t raw = int_uniform(r.token_min, r.token_max);
  hp.token_dim = std::clamp<std::size_t>((raw + 4) / 8 * 8, lo8, hi8);
  hp.n_layers = int_uniform(r.layers_min, r.layers_max);
  hp.dropout_attn = rng.uniform(r.attn_min, r.attn_max);
  hp.dropout_ffn = rng.uniform(r.ffn_min, r.ffn_max);
  hp.dropout_residual = rng.uniform(r.residual_min, r.residual_max);
  return hp;
}

ModelConfig make_model_config(const ModelConfig& base, const HyperParams& hp, std::size_t clusters) {
  ModelConfig c = base;
  c.cluster_count = clusters;
  c.token_dim = hp.token_dim;
  c.n_layers = hp.n_layers;
  c.dropout_attn = hp.dropout_attn;
  c.dropout_ffn = hp.dropout_ffn;
  c.dropout_residual = hp.dropout_residual;
  c.validate();
  return c;
}

std::vector<double> predict(const ModelParams& params, const ModelConfig& config, std::span<const double> primary,
                            std::span<const double> helper, std::size_t rows, std::size_t batch_size) {
  const std::size_t c = config.cluster_count;
  std::vector<double> out;
  out.reserve(rows);
  ad::Rng unused(0);
  for (std::size_t start = 0; start < rows; start += batch_size) {
    const std::size_t b = std::min(batch_size, rows - start);
    const Tensor x = Tensor::constant({b, c}, {primary.begin() + start * c, primary.begin() + (start + b) * c});
    Tensor h;
    if (!helper.empty()) h = Tensor::constant({b, c}, {helper.begin() + start * c, helper.begin() + (start + b) * c});
    const Tensor pred = forward(params, config, x, h.defined() ? &h : nullptr, false, unused);
    out.insert(out.end(), pred.data().begin(), pred.data().end());
  }
  return out;
}

TrainResult train(const FoldData& data, const ModelConfig& base, const HyperParams& hp,
                  const TrainSettings& settings, std::uint64_t seed) {
  if (data.train_rows() == 0 || data.val_rows() == 0) {
    throw Error(ErrorKind::kData, "train: empty train or validation fold");
  }
  if (settings.batch_size == 0 || settings.max_epochs == 0) {
    throw Error(ErrorKind::kUsage, "train: batch size and epoch budget must be positive");
  }
  const std::size_t c = data.clusters;
  if (data.train_primary.size() != data.train_rows() * c || data.val_primary.size() != data.val_rows() * c) {
    throw Error(ErrorKind::kUsage, "train: input size does not match rows x clusters");
  }
  TrainResult result;
  result.config = make_model_config(base, hp, c);
  result.config.fusion = data.has_helper() ? FusionMode::kCrossFusion : FusionMode::kSelfBaseline;
  result.config.seed = derive_seed(seed, 1);
  result.params = init_params(result.config);
  const auto params = result.params.named();
  ad::AdamConfig adam;
  adam.learning_rate = hp.learning_rate;
  adam.weight_decay = hp.weight_decay;
  auto state = ad::make_adam_state(params, adam);
  ad::Rng dropout_rng(derive_seed(seed, 2));
  ad::Rng shuffle_rng(derive_seed(seed, 3));

  std::vector<std::size_t> order(data.train_rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto best = snapshot(params);
  result.history.best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;

  for (std::size_t epoch = 1; epoch <= settings.max_epochs; ++epoch) {
    shuffle(order, shuffle_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += settings.batch_size) {
      const std::size_t b = std::min(settings.batch_size, order.size() - start);
      std::vector<double> x(b * c), h, y(b);
      if (data.has_helper()) h.resize(b * c);
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t r = order[start + i];
        std::copy_n(data.train_primary.begin() + r * c, c, x.begin() + i * c);
        if (data.has_helper()) std::copy_n(data.train_helper.begin() + r * c, c, h.begin() + i * c);
        y[i] = data.train_target[r];
      }
      const Tensor xt = Tensor::constant({b, c}, std::move(x));
      Tensor ht;
      if (data.has_helper()) ht = Tensor::constant({b, c}, std::move(h));
      const Tensor yt = Tensor::constant({b, 1}, std::move(y));
      const Tensor pred = forward(result.params, result.config, xt, ht.defined() ? &ht : nullptr, true, dropout_rng);
      const Tensor loss = ad::mse_loss(pred, yt);
      if (!std::isfinite(loss.item())) {
        throw Error(ErrorKind::kNumeric, "non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                                             std::to_string(start / settings.batch_size + 1));
      }
      epoch_loss += loss.item() * static_cast<double>(b);
      ad::backward(loss);
      ad::adam_step(params, state);
      ad::zero_grad(params);
    }
    result.history.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));

    const auto val_pred = predict(result.params, result.config, data.val_primary, data.val_helper, data.val_rows());
    const double val_loss = mse(val_pred, data.val_target);
    if (!std::isfinite(val_loss)) {
      throw Error(ErrorKind::kNumeric, "non-finite validation loss at epoch " + std::to_string(epoch));
    }
    result.history.val_loss.push_back(val_loss);
    if (val_loss < result.history.best_val_loss) {
      result.history.best_val_loss = val_loss;
      result.history.best_epoch = epoch;
      best = snapshot(params);
      stale = 0;
    } else if (++stale >= settings.patience) {
      break;
    }
  }
  restore(params, best);
  return result;
}

const FeatureMatrix& Dataset::matrix(FeatureKind kind) const {
  const auto it = matrices.find(kind);
  if (it == matrices.end()) {
    throw Error(ErrorKind::kUsage, "dataset has no '" + std::string(feature_kind_name(kind)) + "' matrix");
  }
  return it->second;
}

Dataset make_dataset(std::span<const FeatureMatrix> matrices) {
  if (matrices.empty()) throw Error(ErrorKind::kUsage, "dataset needs at least one feature matrix");
  Dataset ds;
  ds.subject_ids = matrices.front().subject_ids;
  ds.target = matrices.front().target;
  for (const auto& m : matrices) {
    if (m.subject_ids != ds.subject_ids) {
      throw Error(ErrorKind::kData, "matrix '" + std::string(feature_kind_name(m.kind)) + "' rows are not aligned");
    }
    if (m.target.size() != m.rows) {
      throw Error(ErrorKind::kData, "matrix '" + std::string(feature_kind_name(m.kind)) + "' has no target");
    }
    ds.matrices[m.kind] = m;
  }
  return ds;
}

Dataset load_dataset(const std::filesystem::path& dir, std::string_view assessment) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error(ErrorKind::kIo, "feature directory not found: " + dir.string());
  const fs::path scores_path = dir / "scores.csv";
  if (!fs::exists(scores_path)) throw Error(ErrorKind::kData, "missing " + scores_path.string());
  const auto scores = parse_scores_csv(read_text_file(scores_path));
  std::vector<FeatureMatrix> matrices;
  for (std::size_t k = 0; k < kFeatureKindCount; ++k) {
    const auto kind = static_cast<FeatureKind>(k);
    const fs::path path = dir / (std::string(feature_kind_name(kind)) + ".csv");
    if (!fs::exists(path)) continue;
    FeatureMatrix m = parse_wide_csv(read_text_file(path), kind);
    attach_target(m, scores, assessment);
    matrices.push_back(std::move(m));
  }
  if (matrices.empty()) throw Error(ErrorKind::kData, "no feature matrices in " + dir.string());
  return make_dataset(matrices);
}

std::array<std::vector<std::size_t>, kFoldCount> make_folds(std::size_t rows, std::uint64_t seed) {
  std::vector<std::size_t> perm(rows);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  ad::Rng rng(derive_seed(seed, 10));
  shuffle(perm, rng);
  std::array<std::vector<std::size_t>, kFoldCount> folds;
  for (std::size_t i = 0; i < rows; ++i) folds[i % kFoldCount].push_back(perm[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

CvReport cross_validate(const Dataset& data, const Task& task, const ModelConfig& base, const HyperParams& hp,
                        const TrainSettings& settings, std::uint64_t seed) {
  const std::size_t n = data.size();
  if (n < 6) throw Error(ErrorKind::kData, "cross-validation needs at least 6 subjects, got " + std::to_string(n));
  const FeatureMatrix& primary = data.matrix(task.primary);
  const FeatureMatrix* helper = task.helper ? &data.matrix(*task.helper) : nullptr;

  CvReport report;
  report.task = task;
  report.hyperparams = hp;
  report.seed = seed;
  const auto folds = make_folds(n, seed);

  for (std::size_t f = 0; f < kFoldCount; ++f) {
    const auto& test = folds[f];
    std::vector<std::size_t> rest;
    for (std::size_t g = 0; g < kFoldCount; ++g) {
      if (g != f) rest.insert(rest.end(), folds[g].begin(), folds[g].end());
    }
    std::sort(rest.begin(), rest.end());
    ad::Rng inner_rng(derive_seed(seed, 20 + f));
    shuffle(rest, inner_rng);
    const auto n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(settings.validation_fraction * static_cast<double>(rest.size()))));
    std::vector<std::size_t> val(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> tr(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
    std::sort(val.begin(), val.end());
    std::sort(tr.begin(), tr.end());
    for (auto t : test) {
      if (std::binary_search(tr.begin(), tr.end(), t) || std::binary_search(val.begin(), val.end(), t)) {
        throw Error(ErrorKind::kData, "fold leak: subject in both training and held-out sets");
      }
    }

    const FeatureMatrix p_norm = zscore_apply(primary, zscore_fit(primary, tr));
    std::optional<FeatureMatrix> h_norm;
    if (helper) h_norm = zscore_apply(*helper, zscore_fit(*helper, tr));
    const ScalarStats ts = fit_scalar_stats(data.target, tr);

    FoldData fd;
    fd.clusters = primary.cols;
    fd.train_primary = gather_rows(p_norm, tr);
    fd.val_primary = gather_rows(p_norm, val);
    if (h_norm) {
      fd.train_helper = gather_rows(*h_norm, tr);
      fd.val_helper = gather_rows(*h_norm, val);
    }
    for (auto r : tr) fd.train_target.push_back((data.target[r] - ts.mean) / ts.std);
    for (auto r : val) fd.val_target.push_back((data.target[r] - ts.mean) / ts.std);

    TrainResult trained = train(fd, base, hp, settings, derive_seed(seed, 100 + f));

    const auto test_primary = gather_rows(p_norm, test);
    const auto test_helper = h_norm ? gather_rows(*h_norm, test) : std::vector<double>{};
    auto pred = predict(trained.params, trained.config, test_primary, test_helper, test.size());
    std::vector<double> actual;
    for (auto& p : pred) p = p * ts.std + ts.mean;
    for (auto r : test) actual.push_back(data.target[r]);

    FoldReport fr;
    fr.index = f;
    for (auto r : test) fr.test_ids.push_back(data.subject_ids[r]);
    fr.train_count = tr.size();
    fr.val_count = val.size();
    try {
      fr.r = pearson_r(pred, actual);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kNumeric) throw;
      fr.r = 0.0;
      fr.r_defined = false;
    }
    fr.history = std::move(trained.history);
    report.folds.push_back(std::move(fr));
  }

  double total = 0.0;
  for (const auto& f : report.folds) total += f.r;
  report.r_mean = total / static_cast<double>(kFoldCount);
  double var = 0.0;
  for (const auto& f : report.folds) var += (f.r - report.r_mean) * (f.r - report.r_mean);
  report.r_std = std::sqrt(var / static_cast<double>(kFoldCount));
  return report;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> workers;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
}

SearchReport hyperparam_search(const Dataset& data, const Task& task, const ModelConfig& base,
                               const HyperRanges& ranges, const TrainSettings& settings, std::uint64_t seed,
                               std::size_t threads) {
  ranges.validate();
  SearchReport report;
  ad::Rng rng(derive_seed(seed, 7));
  for (std::size_t t = 0; t < ranges.trials; ++t) {
    TrialRecord rec;
    rec.index = t;
    rec.hyperparams = sample_hyperparams(ranges, rng);
    report.trials.push_back(std::move(rec));
  }
  parallel_for(report.trials.size(), threads, [&](std::size_t t) {
    auto& rec = report.trials[t];
    try {
      rec.report = cross_validate(data, task, base, rec.hyperparams, settings, seed);
      rec.ok = true;
    } catch (const Error& e) {
      rec.error = e.what();
    }
  });
  for (std::size_t t = 0; t < report.trials.size(); ++t) {
    const auto& rec = report.trials[t];
    if (!rec.ok) continue;
    if (!report.best || rec.report->r_mean > report.trials[*report.best].report->r_mean) report.best = t;
  }
  return report;
}

HelperSelection select_helper_feature(const Dataset& data, const ModelConfig& base, const HyperParams& hp,
                                      const TrainSettings& settings, std::uint64_t seed, std::size_t threads) {
  for (std::size_t k = 0; k < kShapeKindCount; ++k) (void)data.matrix(static_cast<FeatureKind>(k));
  HelperSelection sel;
  sel.reports.resize(kShapeKindCount);
  ModelConfig baseline = base;
  baseline.fusion = FusionMode::kSelfBaseline;
  parallel_for(kShapeKindCount, threads, [&](std::size_t k) {
    sel.reports[k] = cross_validate(data, Task{static_cast<FeatureKind>(k), std::nullopt}, baseline, hp, settings, seed);
  });
  for (std::size_t k = 0; k < kShapeKindCount; ++k) {
    sel.r_mean[k] = sel.reports[k].r_mean;
    if (sel.r_mean[k] > sel.r_mean[static_cast<std::size_t>(sel.best)]) sel.best = static_cast<ShapeKind>(k);
  }
  return sel;
}

nlohmann::json to_json(const HyperParams& hp) {
  return {{"learning_rate", hp.learning_rate}, {"weight_decay", hp.weight_decay},
          {"token_dim", hp.token_dim},         {"n_layers", hp.n_layers},
          {"dropout_attn", hp.dropout_attn},   {"dropout_ffn", hp.dropout_ffn},
          {"dropout_residual", hp.dropout_residual}};
}

nlohmann::json to_json(const CvReport& report) {
  nlohmann::json folds = nlohmann::json::array();
  nlohmann::json fold_seeds = nlohmann::json::array();
  for (const auto& f : report.folds) {
    folds.push_back({{"index", f.index},
                     {"r", f.r},
                     {"r_defined", f.r_defined},
                     {"train_count", f.train_count},
                     {"val_count", f.val_count},
                     {"test_ids", f.test_ids},
                     {"best_epoch", f.history.best_epoch},
                     {"epochs_run", f.history.train_loss.size()},
                     {"best_val_loss", f.history.best_val_loss},
                     {"train_loss", f.history.train_loss},
                     {"val_loss", f.history.val_loss}});
    fold_seeds.push_back(derive_seed(report.seed, 100 + f.index));
  }
  nlohmann::json task = {{"primary", std::string(feature_kind_name(report.task.primary))},
                         {"fusion", report.task.helper ? "cross" : "self"}};
  task["helper"] = report.task.helper ? nlohmann::json(std::string(feature_kind_name(*report.task.helper)))
                                      : nlohmann::json(nullptr);
  return {{"task", task},
          {"hyperparams", to_json(report.hyperparams)},
          {"seeds", {{"cv", report.seed}, {"folds", fold_seeds}}},
          {"folds", folds},
          {"trials", nlohmann::json::array()},
          {"r_mean", report.r_mean},
          {"r_std", report.r_std},
          {"r_formatted", report.formatted()}};
}

nlohmann::json to_json(const SearchReport& report) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : report.trials) {
    nlohmann::json j = {{"index", t.index}, {"hyperparams", to_json(t.hyperparams)}, {"ok", t.ok}};
    if (t.ok) {
      j["r_mean"] = t.report->r_mean;
      j["r_std"] = t.report->r_std;
      j["r_formatted"] = t.report->formatted();
    } else {
      j["error"] = t.error;
    }
    trials.push_back(std::move(j));
  }
  nlohmann::json out;
  if (report.best) {
    out = to_json(*report.trials[*report.best].report);
    out["best_trial"] = *report.best;
  } else {
    out = {{"folds", nlohmann::json::array()}, {"best_trial", nullptr}};
  }
  out["trials"] = std::move(trials);
  return out;
}

nlohmann::json to_json(const HelperSelection& selection) {
  nlohmann::json scores = nlohmann::json::object();
  nlohmann::json formatted = nlohmann::json::object();
  for (std::size_t k = 0; k < kShapeKindCount; ++k) {
    const std::string name(shape_kind_name(static_cast<ShapeKind>(k)));
    scores[name] = selection.r_mean[k];
    formatted[name] = selection.reports[k].formatted();
  }
  nlohmann::json out = to_json(selection.reports[static_cast<std::size_t>(selection.best)]);
  out["helper"] = std::string(shape_kind_name(selection.best));
  out["shape_scores"] = std::move(scores);
  out["shape_scores_formatted"] = std::move(formatted);
  return out;
}

}  // namespace sff
