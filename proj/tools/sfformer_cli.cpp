#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sfformer/sfformer.h"

namespace {

int exit_code(sff_status status) {
  switch (status) {
    case SFF_OK: return 0;
    case SFF_ERR_USAGE: return 2;
    case SFF_ERR_NUMERIC: return 4;
    default: return 3;
  }
}

int report_failure(sff_status status) {
  std::cerr << "error: " << sff_last_error() << "\n";
  return exit_code(status);
}

bool write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return true;
  }
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) {
    std::cerr << "error: cannot write " << path << "\n";
    return false;
  }
  return true;
}

struct RunFlags {
  sff_run_options options{};
  std::string features, assessment = "SYNTH", primary = "volume", helper, fusion = "self", report;
  std::size_t folds = 3;
};

void add_run_flags(CLI::App* cmd, RunFlags& f, bool with_primary) {
  sff_run_options_init(&f.options);
  cmd->add_option("--features", f.features, "Directory written by 'features'")->required();
  cmd->add_option("--assessment", f.assessment, "Score column to predict")->capture_default_str();
  if (with_primary) {
    cmd->add_option("--primary", f.primary, "Primary feature matrix")->capture_default_str();
    cmd->add_option("--fusion", f.fusion, "self or cross")->check(CLI::IsMember({"self", "cross"}))->capture_default_str();
    cmd->add_option("--helper", f.helper, "Helper feature for cross fusion");
  }
  cmd->add_option("--lr", f.options.learning_rate, "Learning rate")->capture_default_str();
  cmd->add_option("--weight-decay", f.options.weight_decay, "Decoupled weight decay")->capture_default_str();
  cmd->add_option("--token-dim", f.options.token_dim, "Token dimension")->capture_default_str();
  cmd->add_option("--layers", f.options.n_layers, "Encoder layers")->capture_default_str();
  cmd->add_option("--dropout-attn", f.options.dropout_attn)->capture_default_str();
  cmd->add_option("--dropout-ffn", f.options.dropout_ffn)->capture_default_str();
  cmd->add_option("--dropout-residual", f.options.dropout_residual)->capture_default_str();
  cmd->add_option("--epochs", f.options.max_epochs, "Maximum epochs")->capture_default_str();
  cmd->add_option("--patience", f.options.patience, "Early-stopping patience")->capture_default_str();
  cmd->add_option("--batch-size", f.options.batch_size)->capture_default_str();
  cmd->add_option("--val-fraction", f.options.validation_fraction, "Inner validation split")->capture_default_str();
  cmd->add_option("--folds", f.folds, "Cross-validation folds (fixed at 3)")->check(CLI::Range(3, 3))->capture_default_str();
  cmd->add_option("--seed", f.options.seed)->capture_default_str();
  cmd->add_option("--threads", f.options.threads)->capture_default_str();
  cmd->add_flag("--helper-evolves", f.options.helper_evolves, "Update the helper stream through each layer");
  cmd->add_flag("--mean-pool", f.options.mean_pool, "Mean-pool tokens instead of the CLS readout");
  cmd->add_option("--report", f.report, "Write the JSON report here (default stdout)");
}

int prepare(RunFlags& f, bool with_primary) {
  f.options.features_dir = f.features.c_str();
  f.options.assessment = f.assessment.c_str();
  if (with_primary) {
    f.options.primary = f.primary.c_str();
    if (f.fusion == "cross") {
      if (f.helper.empty()) {
        std::cerr << "error: --fusion cross requires --helper\n";
        return 2;
      }
      f.options.helper = f.helper.c_str();
    } else if (!f.helper.empty()) {
      std::cerr << "error: --helper requires --fusion cross\n";
      return 2;
    }
  }
  return 0;
}

int finish(sff_status status, char* report, const std::string& path, const char* summary_key) {
  if (status != SFF_OK) return report_failure(status);
  if (!report) return 3;
  const std::string text(report);
  sff_free_string(report);
  if (!write_output(path, text)) return 3;
  if (!path.empty() && path != "-") {
    const auto j = nlohmann::json::parse(text);
    if (j.contains("helper")) std::cout << "helper " << j["helper"].get<std::string>() << "\n";
    if (j.contains(summary_key)) std::cout << "r " << j[summary_key].get<std::string>() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fiber-cluster shape features and transformer score prediction"};
  app.require_subcommand(1);

  sff_synth_options synth{};
  sff_synth_options_init(&synth);
  std::string synth_out, family = "mixed", target = "volume", synth_assessment = "SYNTH";
  bool scalar_maps = false, permute = false;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic cohort");
  synth_cmd->add_option("--out", synth_out, "Output root")->required();
  synth_cmd->add_option("--subjects", synth.subjects)->capture_default_str();
  synth_cmd->add_option("--clusters", synth.clusters)->capture_default_str();
  synth_cmd->add_option("--streamlines", synth.streamlines, "Streamlines per cluster")->capture_default_str();
  synth_cmd->add_option("--points", synth.points, "Points per streamline")->capture_default_str();
  synth_cmd->add_option("--family", family, "rods, arcs, helices or mixed")->capture_default_str();
  synth_cmd->add_option("--target", target, "Descriptor terms, e.g. volume:1,diameter:1")->capture_default_str();
  synth_cmd->add_option("--sigma", synth.sigma, "Noise standard deviation")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed)->capture_default_str();
  synth_cmd->add_option("--spacing", synth.spacing)->capture_default_str();
  synth_cmd->add_option("--assessment", synth_assessment)->capture_default_str();
  synth_cmd->add_flag("--scalar-maps", scalar_maps, "Also write FA and MD maps");
  synth_cmd->add_flag("--permute-targets", permute, "Shuffle targets across subjects");

  std::string feat_in, feat_out;
  double spacing = 1.0;
  std::size_t clusters = 0, feat_threads = 1;
  auto* feat_cmd = app.add_subcommand("features", "Compute feature matrices for every subject");
  feat_cmd->add_option("--input", feat_in, "Subject root")->required();
  feat_cmd->add_option("--out", feat_out, "Output directory")->required();
  feat_cmd->add_option("--spacing", spacing, "Voxel size in mm")->capture_default_str();
  feat_cmd->add_option("--clusters", clusters, "Atlas size (0 infers from file names)")->capture_default_str();
  feat_cmd->add_option("--threads", feat_threads)->capture_default_str();
  bool surface_faces = false, cylinder = false, points_only = false;
  feat_cmd->add_flag("--surface-faces", surface_faces, "Surface area as exposed face count");
  feat_cmd->add_flag("--cylinder-diameter", cylinder, "Diameter as 2*sqrt(V/(pi L))");
  feat_cmd->add_flag("--points-only", points_only, "Rasterize streamline points only");

  RunFlags cv, search, train, select;
  std::string checkpoint;
  auto* cv_cmd = app.add_subcommand("cv", "Three-fold cross-validation");
  add_run_flags(cv_cmd, cv, true);
  auto* train_cmd = app.add_subcommand("train", "Fit on all subjects and write a checkpoint");
  add_run_flags(train_cmd, train, true);
  train_cmd->add_option("--checkpoint", checkpoint, "Checkpoint path")->required();
  auto* search_cmd = app.add_subcommand("search", "Random hyperparameter search");
  add_run_flags(search_cmd, search, true);
  search_cmd->add_option("--trials", search.options.trials)->capture_default_str();
  search_cmd->add_option("--token-min", search.options.token_min)->capture_default_str();
  search_cmd->add_option("--token-max", search.options.token_max)->capture_default_str();
  auto* select_cmd = app.add_subcommand("select-helper", "Pick the best shape feature under the baseline model");
  add_run_flags(select_cmd, select, false);

  std::string corrupt;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  grad_cmd->add_option("--corrupt", corrupt, "Scale one op's gradient by 1.01 (harness self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (synth_cmd->parsed()) {
    synth.family = family.c_str();
    synth.target = target.c_str();
    synth.assessment = synth_assessment.c_str();
    synth.scalar_maps = scalar_maps;
    synth.permute_targets = permute;
    const sff_status st = sff_synth(&synth, synth_out.c_str());
    if (st != SFF_OK) return report_failure(st);
    std::cout << "wrote " << synth.subjects << " subjects to " << synth_out << "\n";
    return 0;
  }
  if (feat_cmd->parsed()) {
    std::size_t failed = 0;
    char* log = nullptr;
    sff_feature_options fo;
    sff_feature_options_init(&fo);
    fo.spacing = spacing;
    fo.surface_faces = surface_faces;
    fo.cylinder_diameter = cylinder;
    fo.points_only = points_only;
    const sff_status st =
        sff_extract_features_ex(feat_in.c_str(), feat_out.c_str(), &fo, clusters, feat_threads, &failed, &log);
    if (log) {
      std::cerr << log;
      sff_free_string(log);
    }
    if (st != SFF_OK) return report_failure(st);
    if (failed) {
      std::cerr << failed << " subject(s) failed\n";
      return 3;
    }
    std::cout << "features written to " << feat_out << "\n";
    return 0;
  }
  if (grad_cmd->parsed()) {
    char* table = nullptr;
    int passed = 0;
    const sff_status st = sff_gradcheck(corrupt.empty() ? nullptr : corrupt.c_str(), &table, &passed);
    if (st != SFF_OK) return report_failure(st);
    std::cout << table;
    sff_free_string(table);
    return passed ? 0 : 4;
  }

  char* report = nullptr;
  if (cv_cmd->parsed()) {
    if (int rc = prepare(cv, true)) return rc;
    const sff_status st = sff_cv(&cv.options, &report);
    return finish(st, report, cv.report, "r_formatted");
  }
  if (train_cmd->parsed()) {
    if (int rc = prepare(train, true)) return rc;
    const sff_status st = sff_train(&train.options, checkpoint.c_str(), &report);
    return finish(st, report, train.report, "r_formatted");
  }
  if (search_cmd->parsed()) {
    if (int rc = prepare(search, true)) return rc;
    const sff_status st = sff_search(&search.options, &report);
    return finish(st, report, search.report, "r_formatted");
  }
  if (select_cmd->parsed()) {
    if (int rc = prepare(select, false)) return rc;
    const sff_status st = sff_select_helper(&select.options, &report);
    return finish(st, report, select.report, "r_formatted");
  }
  return 2;
}
