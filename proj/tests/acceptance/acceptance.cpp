// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Usage: sfformer_acceptance [criterion numbers...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

#include <nlohmann/json.hpp>

#include "../descriptor_suite.hpp"
#include "sfformer/bundle_io.hpp"
#include "sfformer/feature_matrix.hpp"
#include "sfformer/gradcheck.hpp"
#include "sfformer/model.hpp"
#include "sfformer/training.hpp"

namespace fs = std::filesystem;
using namespace sff;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_work;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(SFF_CLI_PATH) + " " + args + " >>" + (g_work / "cli.log").string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_text_file(p)); }

// synth + features through the CLI, cached per name within one run.
fs::path cohort(const std::string& name, const std::string& synth_args) {
  const auto root = g_work / (name + "_root");
  const auto feats = g_work / (name + "_features");
  if (fs::exists(feats / "scores.csv")) return feats;
  if (cli("synth --out " + root.string() + " " + synth_args) != 0) throw std::runtime_error("synth failed: " + name);
  if (cli("features --threads 1 --input " + root.string() + " --out " + feats.string()) != 0) {
    throw std::runtime_error("features failed: " + name);
  }
  return feats;
}

nlohmann::json cv(const fs::path& feats, const std::string& extra, const std::string& tag) {
  const auto report = g_work / ("cv_" + tag + ".json");
  const int rc = cli("cv --threads 1 --features " + feats.string() + " " + extra + " --report " + report.string());
  if (rc != 0) throw std::runtime_error("cv failed (" + tag + ") exit " + std::to_string(rc));
  return read_json(report);
}

// ---------------------------------------------------------------------------

Outcome descriptor_oracles() {
  const auto t0 = Clock::now();
  const auto r = suite::descriptor_oracles(100, 20260101);
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = r.ok() && r.cases == 100 && t < 60.0;
  o.detail = std::to_string(r.cases) + " clusters, " + std::to_string(r.failures.size()) + " mismatches, " +
             fmt("%.2f s", t) + " (limit 60 s)";
  if (!r.ok()) o.detail += "; first: " + r.failures.front();
  return o;
}

Outcome invariances() {
  const auto r = suite::invariance_suite(50, 20260202);
  Outcome o;
  o.pass = r.ok() && r.cases == 50;
  o.detail = std::to_string(r.cases) + " clusters, " + std::to_string(r.failures.size()) + " violations";
  if (!r.ok()) o.detail += "; first: " + r.failures.front();
  return o;
}

Outcome gradcheck() {
  const auto t0 = Clock::now();
  const auto report = run_gradcheck();
  const double t = seconds_since(t0);
  double worst = 0.0;
  std::set<std::string> ops;
  for (const auto& e : report.entries) {
    worst = std::max(worst, e.max_rel_error);
    ops.insert(e.op);
  }
  Outcome o;
  o.pass = report.passed() && ops.contains("sfformer_self_attention") && ops.contains("sfformer_cross_fusion") &&
           report.threshold == 1e-4 && t < 120.0;
  o.detail = std::to_string(report.entries.size()) + " cases, max rel error " + fmt("%.2e", worst) + " (< 1e-4), " +
             fmt("%.2f s", t) + " (limit 120 s)";
  return o;
}

Outcome degeneracy() {
  std::size_t mismatches = 0, perm_fail = 0;
  double worst_row = 0.0, worst_perm = 0.0;
  for (std::size_t layers : {1u, 2u, 4u}) {
    ModelConfig base;
    base.cluster_count = 8;
    base.token_dim = 16;
    base.n_layers = layers;
    base.seed = 100 + layers;
    ModelConfig cross = base;
    cross.fusion = FusionMode::kCrossFusion;
    cross.helper_evolves = layers > 1;
    auto pc = init_params(cross);
    pc.helper = pc.primary;
    for (auto& l : pc.layers) l.norm_kv = l.norm_attn;
    ModelParams pb = pc;
    pb.helper = {};
    ad::Rng rng(layers);
    std::vector<double> xv(6 * 8);
    for (auto& v : xv) v = rng.normal();
    const auto x = ad::Tensor::constant({6, 8}, xv);
    const auto yb = forward(pb, base, x, nullptr, false, rng);
    const auto yc = forward(pc, cross, x, &x, false, rng);
    for (std::size_t i = 0; i < 6; ++i) mismatches += yb.data()[i] != yc.data()[i];

    const auto tokens = tokenize_stream(x, pb.primary, pb.cls);
    std::vector<ad::Tensor> probs;
    (void)multi_head_attention(tokens, tokens, pb.layers[0], base, false, rng, &probs);
    for (const auto& p : probs) {
      const std::size_t n = p.dim(-1);
      for (std::size_t r = 0; r < p.size() / n; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += p.data()[r * n + c];
        worst_row = std::max(worst_row, std::abs(s - 1.0));
      }
    }

    const auto ref = init_params(base);
    const auto yr = forward(ref, base, x, nullptr, false, rng);
    std::vector<std::size_t> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    for (int trial = 0; trial < 20; ++trial) {
      std::shuffle(perm.begin(), perm.end(), rng.engine());
      auto pp = init_params(base);
      std::vector<double> xp(xv.size());
      for (std::size_t j = 0; j < 8; ++j) {
        for (std::size_t b = 0; b < 6; ++b) xp[b * 8 + j] = xv[b * 8 + perm[j]];
        for (std::size_t k = 0; k < 16; ++k) {
          pp.primary.weight.mutable_data()[j * 16 + k] = ref.primary.weight.data()[perm[j] * 16 + k];
          pp.primary.bias.mutable_data()[j * 16 + k] = ref.primary.bias.data()[perm[j] * 16 + k];
        }
      }
      const auto yp = forward(pp, base, ad::Tensor::constant({6, 8}, xp), nullptr, false, rng);
      bool ok = true;
      for (std::size_t b = 0; b < 6; ++b) {
        const double rel = std::abs(yp.data()[b] - yr.data()[b]) / std::max(1.0, std::abs(yr.data()[b]));
        worst_perm = std::max(worst_perm, rel);
        ok = ok && rel <= 1e-12;
      }
      perm_fail += !ok;
    }
  }
  Outcome o;
  o.pass = mismatches == 0 && worst_row <= 1e-12 && perm_fail == 0;
  o.detail = "cross vs self differing outputs " + std::to_string(mismatches) + " (bit-exact over 1/2/4 layers), " +
             "max |row sum - 1| " + fmt("%.1e", worst_row) + ", permutation failures " + std::to_string(perm_fail) +
             "/60 (max rel " + fmt("%.1e", worst_perm) + ")";
  return o;
}

const std::string kRun = "--seed 1";

Outcome recovery() {
  const auto t0 = Clock::now();
  const auto single = cohort("planted_volume", "--subjects 200 --clusters 64 --sigma 0.3 --seed 1 --target volume");
  const auto base = cv(single, "--primary volume " + kRun, "volume");
  const double r_single = base.at("r_mean").get<double>();

  const auto pair =
      cohort("planted_pair", "--subjects 200 --clusters 64 --sigma 0.3 --seed 1 --target volume:1,diameter:1");
  const auto pair_base = cv(pair, "--primary volume " + kRun, "pair_baseline");
  const auto pair_fused = cv(pair, "--primary volume --fusion cross --helper diameter " + kRun, "pair_fusion");
  const double rb = pair_base.at("r_mean").get<double>();
  const double rf = pair_fused.at("r_mean").get<double>();
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = r_single >= 0.85 && rf >= rb - 0.02 && t < 600.0;
  o.detail = "volume target r " + base.at("r_formatted").get<std::string>() + " (>= 0.85); volume+diameter target: " +
             "baseline " + pair_base.at("r_formatted").get<std::string>() + ", cross fusion with diameter " +
             pair_fused.at("r_formatted").get<std::string>() + " (>= baseline - 0.02); " + fmt("%.0f s", t) +
             " (limit 600 s)";
  // Not scored: same pair with the mean-pool readout, which lets primary tokens reach the head.
  const auto pool_base = cv(pair, "--primary volume --mean-pool " + kRun, "pair_baseline_pool");
  const auto pool_fused =
      cv(pair, "--primary volume --fusion cross --helper diameter --mean-pool " + kRun, "pair_fusion_pool");
  o.detail += "; unscored mean-pool readout: baseline " + pool_base.at("r_formatted").get<std::string>() +
              ", cross fusion " + pool_fused.at("r_formatted").get<std::string>();
  return o;
}

// Reduced training budget for the 120 baseline fits; see the README.
const std::size_t kHelperTokenDim = 16;
const std::size_t kHelperPatience = 20;

Outcome helper_selection() {
  const auto single = cohort("planted_volume", "--subjects 200 --clusters 64 --sigma 0.3 --seed 1 --target volume");
  const auto data = load_dataset(single, "SYNTH");
  HyperParams hp;
  hp.token_dim = kHelperTokenDim;
  TrainSettings s;
  s.patience = kHelperPatience;
  std::size_t hits = 0;
  std::ostringstream picks;
  for (std::uint64_t rep = 0; rep < 10; ++rep) {
    const auto sel = select_helper_feature(data, {}, hp, s, 1000 + rep, 1);
    const auto name = shape_kind_name(sel.best);
    hits += sel.best == ShapeKind::kVolume;
    picks << (rep ? "," : "") << name;
    std::fprintf(stderr, "  helper repetition %llu: %s\n", static_cast<unsigned long long>(rep),
                 std::string(name).c_str());
  }
  Outcome o;
  o.pass = hits >= 9;
  o.detail = "volume chosen " + std::to_string(hits) + "/10 (>= 9); picks " + picks.str();
  return o;
}

Outcome null_control() {
  const auto feats =
      cohort("null", "--subjects 60 --clusters 64 --sigma 0.3 --seed 3 --target volume --permute-targets");
  const auto report = cv(feats, "--primary volume " + kRun, "null");
  const double r = report.at("r_mean").get<double>();
  Outcome o;
  o.pass = std::abs(r) < 0.3;
  o.detail = "permuted targets, S=60: r " + report.at("r_formatted").get<std::string>() + " (|mean| < 0.3)";
  return o;
}

Outcome determinism() {
  const auto feats =
      cohort("null", "--subjects 60 --clusters 64 --sigma 0.3 --seed 3 --target volume --permute-targets");
  const std::string args = "--primary volume --fusion cross --helper diameter --dropout-attn 0.1 --dropout-ffn 0.1 "
                           "--dropout-residual 0.05 --epochs 60 --seed 11";
  const auto a = g_work / "det_a.json", b = g_work / "det_b.json";
  const int ra = cli("cv --threads 1 --features " + feats.string() + " " + args + " --report " + a.string());
  const int rb = cli("cv --threads 1 --features " + feats.string() + " " + args + " --report " + b.string());
  const auto ba = read_file_bytes(a), bb = read_file_bytes(b);
  Outcome o;
  o.pass = ra == 0 && rb == 0 && !ba.empty() && ba == bb;
  o.detail = "two cv runs, seed 11, one thread: " + std::to_string(ba.size()) + " and " + std::to_string(bb.size()) +
             " bytes, " + (ba == bb ? "identical" : "different");
  return o;
}

Outcome overfit() {
  const auto single = cohort("planted_volume", "--subjects 200 --clusters 64 --sigma 0.3 --seed 1 --target volume");
  const auto data = load_dataset(single, "SYNTH");
  const auto& m = data.matrix(FeatureKind::kVolume);
  std::vector<std::size_t> rows(8);
  std::iota(rows.begin(), rows.end(), 0);
  const auto stats = zscore_fit(m, rows);
  const auto z = zscore_apply(m, stats);
  const auto ts = fit_scalar_stats(data.target, rows);
  FoldData f;
  f.clusters = m.cols;
  for (auto r : rows) {
    f.train_primary.insert(f.train_primary.end(), z.row(r).begin(), z.row(r).end());
    f.train_target.push_back((data.target[r] - ts.mean) / ts.std);
  }
  f.val_primary = f.train_primary;
  f.val_target = f.train_target;
  HyperParams hp;
  TrainSettings s;
  s.max_epochs = 500;
  s.batch_size = 8;
  s.patience = 50;
  const auto result = train(f, {}, hp, s, 5);
  const auto pred = predict(result.params, result.config, f.train_primary, {}, 8);
  double mse = 0.0;
  for (std::size_t i = 0; i < 8; ++i) mse += (pred[i] - f.train_target[i]) * (pred[i] - f.train_target[i]) / 8.0;
  Outcome o;
  o.pass = mse < 1e-3 && result.history.train_loss.size() <= 500;
  o.detail = "8 subjects, batch 8, patience 50: training MSE " + fmt("%.2e", mse) + " (< 1e-3) after " +
             std::to_string(result.history.train_loss.size()) + " epochs (<= 500)";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"descriptor oracle suite", descriptor_oracles},
      {"geometric invariance suite", invariances},
      {"gradcheck", gradcheck},
      {"architecture degeneracy", degeneracy},
      {"end-to-end synthetic recovery", recovery},
      {"helper-selection recovery", helper_selection},
      {"null control", null_control},
      {"determinism", determinism},
      {"overfit capacity", overfit},
  };
  std::set<std::size_t> chosen;
  for (int i = 1; i < argc; ++i) chosen.insert(static_cast<std::size_t>(std::atoi(argv[i])));

  const char* env = std::getenv("SFF_ACCEPTANCE_WORKDIR");
  g_work = env ? fs::path(env) : fs::temp_directory_path() / ("sfformer_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(g_work);

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!chosen.empty() && !chosen.contains(i + 1)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s [%zu] %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  if (!env) fs::remove_all(g_work);
  return failures == 0 ? 0 : 1;
}
