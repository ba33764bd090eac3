// Command-line front end: dataset generation, training, evaluation,
// complexity profiling, gradient checking and the ablation table, all driven
// by one JSON config plus key=value overrides. Every run is reproducible from
// its seed; EAN_THREADS caps the parallel parts.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ean/complexity.hpp"
#include "ean/config.hpp"
#include "ean/evaluation.hpp"
#include "ean/gradcheck_suite.hpp"
#include "ean/train.hpp"

namespace fs = std::filesystem;
using namespace ean;

namespace {

struct CommonArgs {
  std::string config_path;
  uint64_t seed = 0;
  std::string out_dir = "out";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file (defaults when omitted)");
  cmd->add_option("--seed", args.seed, "master seed");
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--set", args.overrides, "dotted-path override, e.g. decoder.groups=50");
}

RunConfig resolve_config(const CommonArgs& args) {
  return load_run_config(args.config_path.empty() ? fs::path{} : fs::path(args.config_path),
                         args.overrides);
}

fs::path dataset_dir(const RunConfig& cfg, const CommonArgs& args) {
  return cfg.data_dir.empty() ? fs::path(args.out_dir) / "dataset" : fs::path(cfg.data_dir);
}

int cmd_gen_data(const CommonArgs& args) {
  RunConfig cfg = resolve_config(args);
  const fs::path dir = dataset_dir(cfg, args);
  std::cerr << "generating " << cfg.data.train_scenes << " train / " << cfg.data.val_scenes
            << " val scenes into " << dir << "\n";
  auto train = generate_split(cfg.data, args.seed, 0, cfg.data.train_scenes);
  save_split(dir, "train", train, cfg.data, args.seed);
  auto val = generate_split(cfg.data, args.seed,
                            static_cast<uint64_t>(cfg.data.train_scenes), cfg.data.val_scenes);
  save_split(dir, "val", val, cfg.data, args.seed);
  std::cout << "dataset written to " << dir << "\n";
  return 0;
}

int cmd_train(const CommonArgs& args, const std::string& resume) {
  RunConfig cfg = resolve_config(args);
  const fs::path dir = dataset_dir(cfg, args);
  TrainResult res = train_run(cfg, args.out_dir, args.seed, dir, &std::cerr,
                              resume.empty() ? fs::path{} : fs::path(resume));
  std::cout << "final checkpoint: " << res.final_checkpoint << "\n";
  if (!res.epoch_mean_loss.empty()) {
    std::cout << "first epoch mean loss " << res.epoch_mean_loss.front()
              << ", final epoch mean loss " << res.epoch_mean_loss.back() << "\n";
  }
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& ckpt, bool gt_oracle,
             const std::string& chamfer_csv) {
  RunConfig cfg = resolve_config(args);
  const fs::path dir = dataset_dir(cfg, args);
  std::vector<Scene> val = load_split(dir, "val");
  EvalConfig ecfg = cfg.eval;
  ecfg.num_classes = cfg.decoder.num_classes;

  EvalReport report;
  if (gt_oracle) {
    // upper-bound oracle: feed the ground truth back as unit-score predictions
    std::vector<std::vector<ResampledElement>> gts;
    std::vector<ScoredPrediction> preds;
    for (size_t s = 0; s < val.size(); ++s) {
      auto scene_gt = scene_ground_truth(val[s], static_cast<int>(cfg.data.n_points));
      for (const ResampledElement& e : scene_gt) {
        ScoredPrediction p;
        p.scene_index = static_cast<int64_t>(s);
        p.class_id = e.class_id;
        p.score = 1.0;
        p.points_m = e.points;
        preds.push_back(std::move(p));
      }
      gts.push_back(std::move(scene_gt));
    }
    report = evaluate_detections(preds, gts, ecfg);
  } else {
    if (ckpt.empty()) throw ConfigError("eval: --checkpoint is required (or --gt-oracle)");
    DetectionModel model = load_model_for_eval(cfg, ckpt);
    if (!chamfer_csv.empty()) {
      std::vector<std::vector<ResampledElement>> gts;
      for (const Scene& s : val) {
        gts.push_back(scene_ground_truth(s, static_cast<int>(cfg.data.n_points)));
      }
      auto preds = predict_split(model, val, ecfg);
      std::ofstream csv(chamfer_csv);
      if (!csv) throw IoError("cannot open '" + chamfer_csv + "'");
      write_chamfer_csv(preds, gts, val, csv);
      report = evaluate_detections(preds, gts, ecfg);
    } else {
      report = evaluate_split(model, val, ecfg);
    }
  }
  const nlohmann::json j = report.to_json();
  fs::create_directories(args.out_dir);
  std::ofstream f(fs::path(args.out_dir) / "eval_report.json");
  f << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_profile(const CommonArgs& args) {
  RunConfig cfg = resolve_config(args);
  fs::create_directories(args.out_dir);
  const fs::path csv_path = fs::path(args.out_dir) / "profile.csv";
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot open '" + csv_path.string() + "'");
  run_sweep(cfg.profile, csv);
  csv.close();
  std::ifstream back(csv_path);
  std::cout << back.rdbuf();
  std::cout << "sweep written to " << csv_path << "\n";
  // wall-clock comparison at the largest grid point; informational only,
  // machine-dependent and never asserted on
  {
    const int64_t M = cfg.profile.groups.back(), N = cfg.profile.points.back(),
                  d = cfg.profile.dims.back();
    const auto t0 = std::chrono::steady_clock::now();
    count_glsa(M, N, d, 1);
    const auto t1 = std::chrono::steady_clock::now();
    count_vanilla(M, N, d);
    const auto t2 = std::chrono::steady_clock::now();
    const auto ms = [](auto a, auto b) {
      return std::chrono::duration_cast<std::chrono::milliseconds>(b - a).count();
    };
    std::cerr << "wall clock at M=" << M << " N=" << N << " d=" << d << ": grouped "
              << ms(t0, t1) << " ms, vanilla " << ms(t1, t2) << " ms\n";
  }
  return 0;
}

int cmd_grad_check(const CommonArgs& args) {
  auto reports = run_gradient_check_suite(args.seed);
  bool all_pass = true;
  std::cout << std::left << std::setw(34) << "op" << std::setw(14) << "max_rel_err"
            << "status\n";
  for (const OpCheckReport& r : reports) {
    all_pass = all_pass && r.pass;
    std::cout << std::left << std::setw(34) << r.name << std::setw(14) << std::scientific
              << std::setprecision(2) << r.max_rel_err << (r.pass ? "pass" : "FAIL") << "\n";
  }
  std::cout.unsetf(std::ios::scientific);
  std::cout << (all_pass ? "gradient check passed" : "gradient check FAILED") << "\n";
  return all_pass ? 0 : 1;
}

struct AblationRow {
  std::string name;
  RunConfig cfg;
};

std::vector<AblationRow> ablation_rows(const RunConfig& base) {
  auto with = [&](const std::string& name, bool noncentral, bool gt_nbhd, bool improved,
                  bool random) {
    AblationRow row;
    row.name = name;
    row.cfg = base;
    row.cfg.decoder.use_noncentral_branch = noncentral;
    row.cfg.decoder.use_gt_neighborhood = gt_nbhd;
    row.cfg.decoder.use_improved_local_queries = improved;
    row.cfg.decoder.random_noncentral = random;
    row.cfg.train.lambda_noncenter = noncentral ? base.train.lambda_noncenter : 0.0;
    // neighborhood hyperparameters track the local-query variant
    row.cfg.decoder.omega = improved ? 0.2 : 0.25;
    row.cfg.decoder.a_meters = improved ? 0.5 : 0.55;
    return row;
  };
  return {
      with("a_baseline", false, false, false, false),
      with("b_anchor_neighborhoods", true, false, false, false),
      with("c_gt_neighborhoods", true, true, false, false),
      with("d_improved_local_queries", true, true, true, false),
      with("random_anchors", true, true, false, true),
  };
}

int cmd_ablate(const CommonArgs& args, const std::vector<uint64_t>& seeds_arg,
               const std::vector<std::string>& row_filter) {
  RunConfig base = resolve_config(args);
  const fs::path dir = dataset_dir(base, args);
  std::vector<uint64_t> seeds = seeds_arg.empty() ? std::vector<uint64_t>{args.seed} : seeds_arg;

  std::vector<AblationRow> rows = ablation_rows(base);
  if (!row_filter.empty()) {
    std::vector<AblationRow> kept;
    for (const AblationRow& r : rows) {
      for (const std::string& f : row_filter) {
        if (r.name.rfind(f, 0) == 0) {
          kept.push_back(r);
          break;
        }
      }
    }
    rows = std::move(kept);
  }

  fs::create_directories(args.out_dir);
  const fs::path csv_path = fs::path(args.out_dir) / "ablation.csv";
  std::ofstream csv(csv_path);
  csv << "row,seed,map,ap_ped,ap_div,ap_bound\n";
  std::cout << std::left << std::setw(28) << "row" << std::setw(8) << "seed"
            << "mAP\n";
  for (const AblationRow& row : rows) {
    for (uint64_t seed : seeds) {
      const fs::path row_out =
          fs::path(args.out_dir) / (row.name + "_seed" + std::to_string(seed));
      TrainResult res = train_run(row.cfg, row_out, seed, dir, &std::cerr);
      DetectionModel model = load_model_for_eval(row.cfg, res.final_checkpoint);
      std::vector<Scene> val = load_split(dir, "val");
      EvalConfig ecfg = row.cfg.eval;
      ecfg.num_classes = row.cfg.decoder.num_classes;
      EvalReport report = evaluate_split(model, val, ecfg);
      csv << row.name << "," << seed << "," << report.map << ","
          << report.class_ap[kPedestrianCrossing] << "," << report.class_ap[kLaneDivider]
          << "," << report.class_ap[kBoundary] << "\n";
      csv.flush();
      std::cout << std::left << std::setw(28) << row.name << std::setw(8) << seed
                << report.map << "\n";
    }
  }
  std::cout << "table written to " << csv_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EAN map-element detection head: training, evaluation and profiling"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, profile_args, grad_args, ablate_args;
  std::string resume, checkpoint, chamfer_csv;
  bool gt_oracle = false;
  std::vector<uint64_t> ablate_seeds;
  std::vector<std::string> ablate_rows;

  add_common(app.add_subcommand("gen-data", "generate synthetic train/val splits"), gen_args);
  CLI::App* train = app.add_subcommand("train", "train the detection head");
  add_common(train, train_args);
  train->add_option("--resume", resume, "resume from a checkpoint");
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the val split");
  add_common(eval, eval_args);
  eval->add_option("--checkpoint", checkpoint, "trained checkpoint path");
  eval->add_flag("--gt-oracle", gt_oracle, "evaluate ground truth as predictions");
  eval->add_option("--chamfer-csv", chamfer_csv, "write per-prediction Chamfer distances");
  add_common(app.add_subcommand("profile", "attention complexity sweep"), profile_args);
  add_common(app.add_subcommand("grad-check", "finite-difference gradient check"), grad_args);
  CLI::App* ablate = app.add_subcommand("ablate", "train and score the ablation table");
  add_common(ablate, ablate_args);
  ablate->add_option("--seeds", ablate_seeds, "seeds (default: --seed)");
  ablate->add_option("--rows", ablate_rows, "row name prefixes to run (default: all)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("gen-data")) return cmd_gen_data(gen_args);
    if (app.got_subcommand("train")) return cmd_train(train_args, resume);
    if (app.got_subcommand("eval")) return cmd_eval(eval_args, checkpoint, gt_oracle, chamfer_csv);
    if (app.got_subcommand("profile")) return cmd_profile(profile_args);
    if (app.got_subcommand("grad-check")) return cmd_grad_check(grad_args);
    if (app.got_subcommand("ablate")) return cmd_ablate(ablate_args, ablate_seeds, ablate_rows);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
