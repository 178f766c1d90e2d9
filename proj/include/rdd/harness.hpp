// Experiment orchestration: configuration, the SGD training loop for all
// four strategies (no-distill / whole-feature hint / equal-weight pairs /
// disparity-masked pairs), per-epoch reporting, and the feature-distance
// histogram analysis.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rdd/config.hpp"
#include "rdd/detector.hpp"
#include "rdd/evaluate.hpp"
#include "rdd/losses.hpp"
#include "rdd/scene.hpp"

namespace rdd {

enum class Strategy { kNone, kHint, kEqual, kRdd };

Strategy parse_strategy(const std::string& name);  // ConfigError on unknown
std::string strategy_name(Strategy s);

struct OptimConfig {
  double lr = 0.02;          // peak learning rate
  double momentum = 0.9;
  double warmup_frac = 0.1;  // fraction of steps ramping up to the peak
  double final_frac = 0.05;  // end-of-training rate as a fraction of the peak
  double max_grad_norm = 5.0;  // global-norm gradient clip; 0 disables
  int epochs = 20;
  int batch_size = 4;  // scenes averaged per optimizer step

  void validate() const;
};

// Warmup-peak-decay: linear rise over the warmup steps, then linear decay
// to final_frac * lr at the last step.
double schedule_lr(const OptimConfig& cfg, int step, int total_steps);

struct ExperimentConfig {
  SceneConfig scene;
  DetectorConfig teacher;
  DetectorConfig student;
  DistillConfig distill;
  OptimConfig optim;
  std::string teacher_preset = "teacher";  // width preset applied to teacher
  std::string student_preset = "s";        // width preset applied to student
  Strategy strategy = Strategy::kRdd;
  int train_scenes = 256;
  int teacher_scenes = 0;  // scenes for teacher training; 0 = the student's
                           // own train set, larger values extend the same
                           // stream so the student's scenes stay a prefix
  int transfer_scenes = 0;  // extra unlabeled scenes: distilling strategies
                            // apply only the imitation losses there, so the
                            // teacher's knowledge of the scene distribution
                            // reaches the student beyond the labeled set
  int eval_scenes = 64;
  int teacher_epochs = 20;
  double eval_iou = 0.5;
  int eval_top_k = 16;         // decode settings for scoring, fixed so that
  double eval_min_score = 0.1; // pairing knobs never change the metric
  std::uint64_t seed = 1;
  std::string out_dir = "runs";
  std::string teacher_ckpt;  // load if present, train-and-save if not

  void validate() const;  // every section, every problem itemized
  KvMap to_kv() const;
  // Strict: unknown keys and parse failures are itemized ConfigErrors.
  static ExperimentConfig from_kv(const KvMap& kv);
  std::uint64_t digest() const;
};

struct EpochRow {
  int epoch = 0;
  double l_cls = 0, l_reg = 0, l_feat = 0, l_logit = 0, total = 0;
  double mask_fraction = 0;  // mean over the epoch's steps
  double eval_map = 0;
};

struct RunReport {
  std::string strategy;
  std::uint64_t seed = 0;
  std::uint64_t config_digest = 0;
  std::vector<EpochRow> epochs;
  std::vector<double> step_mask_fractions;
  EvalResult final_eval;
  double wall_seconds = 0;
};

// Deterministic scene sets: scene i is generated from mix_seed(seed, i).
SceneSet build_scene_set(const SceneConfig& cfg, int count, std::uint64_t seed);

// The exact train/eval sets a run of `cfg` trains and scores on; the two
// draw from independent seed streams derived from cfg.seed.
SceneSet experiment_train_scenes(const ExperimentConfig& cfg);
SceneSet experiment_transfer_scenes(const ExperimentConfig& cfg);
SceneSet experiment_eval_scenes(const ExperimentConfig& cfg);

// Loads cfg.teacher_ckpt when the file exists (rejecting architectures other
// than cfg.teacher), otherwise trains a teacher with plain detection loss and
// saves it when a path is configured. Fills *report when training happened.
DetectorParams obtain_teacher(const ExperimentConfig& cfg, const SceneSet& train,
                              const SceneSet& eval_set, RunReport* report = nullptr);

// Trains `model` in place. Strategies other than none require a teacher
// whose neck spatial dims match the student's. Aborts with TrainError when
// the loss stops being finite, naming the step and seed.
RunReport train_student(DetectorParams& model, const DetectorParams* teacher,
                        const SceneSet& train, const SceneSet& eval_set,
                        const ExperimentConfig& cfg);

struct ExperimentResult {
  RunReport report;
  DetectorParams student;
  DetectorParams teacher;  // empty tensors when strategy none
};

// Full pipeline: scene sets, teacher (loaded or trained), student training.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

void write_report_csv(const std::string& path, const RunReport& report);
void write_report_json(const std::string& path, const RunReport& report,
                       const ExperimentConfig& cfg);

// Affine per-channel map fitted by least squares over neck features, used
// to compare differently-sized models on an equal footing. Identity when
// the channel counts already agree.
struct ChannelAlignment {
  bool identity = false;
  std::vector<std::vector<double>> w;  // [C_T][C_S]
  std::vector<double> b;               // [C_T]
};

ChannelAlignment fit_channel_alignment(const DetectorParams& teacher,
                                       const DetectorParams& student,
                                       const SceneSet& scenes, double ridge = 1e-6);

Tensor apply_alignment(const ChannelAlignment& align, const Tensor& patch);

// One mean-square distance per region pair between the teacher patch and the
// aligned student patch, both channel-softmax normalized; pooled over scenes.
std::vector<double> collect_pair_distances(const DetectorParams& teacher,
                                           const DetectorParams& student,
                                           const SceneSet& scenes,
                                           const DistillConfig& cfg);

struct Histogram {
  double max_edge = 0;      // shared upper edge of the bucket range
  std::vector<int> counts;  // `bins` equal-width buckets over [0, max_edge]
  int total = 0;
};

Histogram make_histogram(const std::vector<double>& values, int bins,
                         double max_edge);

void write_histogram(const std::string& path, const Histogram& hist);

}  // namespace rdd
