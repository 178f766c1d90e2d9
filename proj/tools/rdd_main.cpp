// Command-line front end: scene generation, teacher/student training, mAP
// evaluation, feature-distance histograms, and the strategy ablation grid.
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rdd/harness.hpp"

namespace {

using namespace rdd;

// Config-file keys, overridden by repeated --set key=value, then by the
// dedicated flags.
struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> strategy;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_strategy = false) {
  cmd->add_option("--config", args.config_path, "key = value config file");
  cmd->add_option("--set", args.sets, "override a config key (key=value)")
      ->take_all();
  cmd->add_option("--seed", args.seed, "experiment seed (train.seed)");
  cmd->add_option("--out", args.out, "output directory (train.out_dir)");
  if (with_strategy)
    cmd->add_option("--strategy", args.strategy,
                    "none | hint | equal | rdd (train.strategy)");
}

ExperimentConfig load_config(const CommonArgs& args) {
  KvMap kv;
  if (!args.config_path.empty()) kv = load_kv_file(args.config_path);
  for (const std::string& s : args.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw UsageError("--set expects key=value, got \"" + s + "\"");
    kv[s.substr(0, eq)] = s.substr(eq + 1);
  }
  if (args.seed) kv["train.seed"] = std::to_string(*args.seed);
  if (args.out) kv["train.out_dir"] = *args.out;
  if (args.strategy) kv["train.strategy"] = *args.strategy;
  return ExperimentConfig::from_kv(kv);
}

std::filesystem::path ensure_out_dir(const ExperimentConfig& cfg) {
  std::filesystem::path dir(cfg.out_dir.empty() ? "runs" : cfg.out_dir);
  std::filesystem::create_directories(dir);
  return dir;
}

SceneSet scenes_for_eval(const ExperimentConfig& cfg, const std::string& scenes_path) {
  if (!scenes_path.empty()) return load_scene_set(scenes_path);
  return experiment_eval_scenes(cfg);
}

void print_eval(const EvalResult& eval) {
  std::cout << "class        AP  ground-truth  predictions\n";
  for (const ClassAp& c : eval.per_class) {
    std::cout << "  " << c.class_id << "    " << std::fixed;
    std::cout.precision(4);
    std::cout << c.ap << "  " << c.gt_count << "  " << c.pred_count << "\n";
  }
  std::cout << "mAP " << eval.map << "\n";
  std::cout.unsetf(std::ios::fixed);
}

void write_eval_csv(const std::string& path, const EvalResult& eval) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.precision(17);
  os << "class_id,ap,gt_count,pred_count\n";
  for (const ClassAp& c : eval.per_class)
    os << c.class_id << ',' << c.ap << ',' << c.gt_count << ',' << c.pred_count
       << '\n';
  os << "mAP," << eval.map << ",,\n";
  if (!os) throw IoError("failed writing " + path);
}

double mean_mask_fraction(const RunReport& report) {
  if (report.step_mask_fractions.empty()) return 0.0;
  double acc = 0.0;
  for (double f : report.step_mask_fractions) acc += f;
  return acc / static_cast<double>(report.step_mask_fractions.size());
}

int cmd_gen_scenes(const CommonArgs& args, int count, const std::string& out_file) {
  ExperimentConfig cfg = load_config(args);
  SceneSet scenes = build_scene_set(cfg.scene, count, cfg.seed);
  save_scene_set(out_file, scenes);
  std::cout << "wrote " << scenes.size() << " scenes to " << out_file << "\n";
  return 0;
}

int cmd_train_teacher(const CommonArgs& args) {
  ExperimentConfig cfg = load_config(args);
  const auto dir = ensure_out_dir(cfg);
  if (cfg.teacher_ckpt.empty()) cfg.teacher_ckpt = (dir / "teacher.ckpt").string();

  SceneSet train = experiment_train_scenes(cfg);
  SceneSet eval_set = experiment_eval_scenes(cfg);
  RunReport report;
  obtain_teacher(cfg, train, eval_set, &report);
  if (report.epochs.empty()) {
    std::cout << "teacher checkpoint " << cfg.teacher_ckpt << " already exists\n";
    return 0;
  }
  write_report_csv((dir / "teacher_report.csv").string(), report);
  write_report_json((dir / "teacher_report.json").string(), report, cfg);
  std::cout << "teacher: mAP " << report.final_eval.map << " after "
            << report.epochs.size() << " epochs (" << report.wall_seconds
            << " s); checkpoint " << cfg.teacher_ckpt << "\n";
  return 0;
}

int cmd_train_student(const CommonArgs& args) {
  ExperimentConfig cfg = load_config(args);
  const auto dir = ensure_out_dir(cfg);
  if (cfg.strategy != Strategy::kNone && cfg.teacher_ckpt.empty())
    cfg.teacher_ckpt = (dir / "teacher.ckpt").string();

  ExperimentResult res = run_experiment(cfg);
  const std::string tag = strategy_name(cfg.strategy);
  save_checkpoint((dir / ("student_" + tag + ".ckpt")).string(), res.student);
  write_report_csv((dir / ("report_" + tag + ".csv")).string(), res.report);
  write_report_json((dir / ("report_" + tag + ".json")).string(), res.report, cfg);
  std::cout << tag << ": mAP " << res.report.final_eval.map << ", mean mask fraction "
            << mean_mask_fraction(res.report) << " (" << res.report.wall_seconds
            << " s)\n";
  print_eval(res.report.final_eval);
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& ckpt,
             const std::string& scenes_path) {
  ExperimentConfig cfg = load_config(args);
  DetectorParams model = load_checkpoint(ckpt);
  if (model.config.num_classes != cfg.scene.num_classes)
    throw ConfigError("checkpoint expects " +
                      std::to_string(model.config.num_classes) +
                      " classes but the scenes have " +
                      std::to_string(cfg.scene.num_classes));
  SceneSet scenes = scenes_for_eval(cfg, scenes_path);
  EvalResult eval = evaluate_map_lite(model, scenes, cfg.eval_iou,
                                      cfg.eval_top_k, cfg.eval_min_score);
  print_eval(eval);
  const auto dir = ensure_out_dir(cfg);
  const std::string csv = (dir / "eval.csv").string();
  write_eval_csv(csv, eval);
  std::cout << "wrote " << csv << "\n";
  return 0;
}

int cmd_histogram(const CommonArgs& args, const std::string& teacher_ckpt,
                  const std::string& student_ckpt, const std::string& scenes_path,
                  int bins, double max_edge, std::string out_file) {
  ExperimentConfig cfg = load_config(args);
  DetectorParams teacher = load_checkpoint(teacher_ckpt);
  DetectorParams student = load_checkpoint(student_ckpt);
  SceneSet scenes = scenes_for_eval(cfg, scenes_path);
  std::vector<double> distances =
      collect_pair_distances(teacher, student, scenes, cfg.distill);
  if (max_edge <= 0)
    for (double v : distances) max_edge = std::max(max_edge, v);
  Histogram hist = make_histogram(distances, bins, max_edge);
  if (out_file.empty())
    out_file = (ensure_out_dir(cfg) / "histogram.csv").string();
  write_histogram(out_file, hist);
  std::cout << hist.total << " pair distances over " << scenes.size()
            << " scenes, bucket range [0, " << hist.max_edge << "]; wrote "
            << out_file << "\n";
  return 0;
}

int cmd_ablate(const CommonArgs& args) {
  ExperimentConfig base = load_config(args);
  const auto dir = ensure_out_dir(base);
  if (base.teacher_ckpt.empty())
    base.teacher_ckpt = (dir / "teacher.ckpt").string();

  std::ofstream table((dir / "ablation.csv").string());
  if (!table) throw IoError("cannot open " + (dir / "ablation.csv").string());
  table.precision(17);
  table << "strategy,final_mAP,mean_mask_fraction,wall_seconds\n";

  std::cout << "strategy   final mAP   mean mask fraction\n";
  for (Strategy strat :
       {Strategy::kNone, Strategy::kHint, Strategy::kEqual, Strategy::kRdd}) {
    ExperimentConfig cfg = base;
    cfg.strategy = strat;
    ExperimentResult res = run_experiment(cfg);
    const std::string tag = strategy_name(strat);
    save_checkpoint((dir / ("student_" + tag + ".ckpt")).string(), res.student);
    write_report_csv((dir / ("report_" + tag + ".csv")).string(), res.report);
    write_report_json((dir / ("report_" + tag + ".json")).string(), res.report, cfg);
    table << tag << ',' << res.report.final_eval.map << ','
          << mean_mask_fraction(res.report) << ',' << res.report.wall_seconds
          << '\n';
    std::cout << "  " << tag << (tag.size() < 5 ? "\t\t" : "\t") << std::fixed;
    std::cout.precision(4);
    std::cout << res.report.final_eval.map << "      "
              << mean_mask_fraction(res.report) << "\n";
    std::cout.unsetf(std::ios::fixed);
  }
  if (!table) throw IoError("failed writing " + (dir / "ablation.csv").string());
  std::cout << "wrote " << (dir / "ablation.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"region-masked knowledge distillation for BEV detection"};
  app.require_subcommand(1);

  CommonArgs gen_args;
  int gen_count = 64;
  std::string gen_out = "scenes.rdds";
  auto* gen = app.add_subcommand("gen-scenes", "generate a labeled scene set");
  add_common(gen, gen_args);
  gen->add_option("--count", gen_count, "number of scenes")
      ->check(CLI::NonNegativeNumber);
  gen->add_option("--out-file", gen_out, "scene file to write");

  CommonArgs teacher_args;
  auto* teacher =
      app.add_subcommand("train-teacher", "train (or reuse) the wide teacher");
  add_common(teacher, teacher_args);

  CommonArgs student_args;
  auto* student = app.add_subcommand(
      "train-student", "run one experiment: teacher, student, reports");
  add_common(student, student_args, true);

  CommonArgs eval_args;
  std::string eval_ckpt, eval_scenes;
  auto* evalc = app.add_subcommand("eval", "score a checkpoint on a scene set");
  add_common(evalc, eval_args);
  evalc->add_option("--ckpt", eval_ckpt, "detector checkpoint")->required();
  evalc->add_option("--scenes", eval_scenes,
                    "scene file (default: the config's evaluation set)");

  CommonArgs hist_args;
  std::string hist_teacher, hist_student, hist_scenes, hist_out;
  int hist_bins = 20;
  double hist_max = 0.0;
  auto* hist = app.add_subcommand(
      "histogram", "teacher-student region distance histogram");
  add_common(hist, hist_args);
  hist->add_option("--teacher", hist_teacher, "teacher checkpoint")->required();
  hist->add_option("--student", hist_student, "student checkpoint")->required();
  hist->add_option("--scenes", hist_scenes,
                   "scene file (default: the config's evaluation set)");
  hist->add_option("--bins", hist_bins, "bucket count")
      ->check(CLI::PositiveNumber);
  hist->add_option("--max-edge", hist_max,
                   "upper bucket edge (default: largest observed distance)");
  hist->add_option("--out-file", hist_out, "histogram file to write");

  CommonArgs ablate_args;
  auto* ablate = app.add_subcommand(
      "ablate", "train every strategy on one config and tabulate");
  add_common(ablate, ablate_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_scenes(gen_args, gen_count, gen_out);
    if (teacher->parsed()) return cmd_train_teacher(teacher_args);
    if (student->parsed()) return cmd_train_student(student_args);
    if (evalc->parsed()) return cmd_eval(eval_args, eval_ckpt, eval_scenes);
    if (hist->parsed())
      return cmd_histogram(hist_args, hist_teacher, hist_student, hist_scenes,
                           hist_bins, hist_max, hist_out);
    if (ablate->parsed()) return cmd_ablate(ablate_args);
  } catch (const rdd::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const rdd::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
