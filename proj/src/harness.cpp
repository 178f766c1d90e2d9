#include "rdd/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "rdd/disparity.hpp"
#include "rdd/regions.hpp"

namespace rdd {

namespace {

// independent sub-seed streams hanging off the experiment seed
constexpr std::uint64_t kTrainSceneStream = 0x7a215ce3;
constexpr std::uint64_t kTransferSceneStream = 0x9d4b7e19;
constexpr std::uint64_t kEvalSceneStream = 0xe5a15ce3;
constexpr std::uint64_t kTeacherInitStream = 0x7eac4e21;
constexpr std::uint64_t kStudentInitStream = 0x57de3a11;
constexpr std::uint64_t kPsiInitStream = 0xada97e42;
constexpr std::uint64_t kShuffleStream = 0x5ba771e5;

}  // namespace

Strategy parse_strategy(const std::string& name) {
  if (name == "none") return Strategy::kNone;
  if (name == "hint") return Strategy::kHint;
  if (name == "equal") return Strategy::kEqual;
  if (name == "rdd") return Strategy::kRdd;
  throw ConfigError("unknown strategy \"" + name +
                    "\" (expected none, hint, equal, or rdd)");
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kNone: return "none";
    case Strategy::kHint: return "hint";
    case Strategy::kEqual: return "equal";
    case Strategy::kRdd: return "rdd";
  }
  throw UsageError("corrupt strategy value");
}

void OptimConfig::validate() const {
  std::vector<std::string> problems;
  if (lr <= 0) problems.push_back("lr must be positive");
  if (momentum < 0 || momentum >= 1) problems.push_back("momentum must lie in [0, 1)");
  if (warmup_frac < 0 || warmup_frac > 0.5)
    problems.push_back("warmup_frac must lie in [0, 0.5]");
  if (final_frac <= 0 || final_frac > 1)
    problems.push_back("final_frac must lie in (0, 1]");
  if (max_grad_norm < 0) problems.push_back("max_grad_norm must be non-negative");
  if (epochs < 1) problems.push_back("epochs must be at least 1");
  if (batch_size < 1) problems.push_back("batch_size must be at least 1");
  if (!problems.empty()) {
    std::string msg = "invalid optimizer config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

double schedule_lr(const OptimConfig& cfg, int step, int total_steps) {
  if (total_steps < 1 || step < 0 || step >= total_steps)
    throw UsageError("schedule_lr: step " + std::to_string(step) + " of " +
                     std::to_string(total_steps));
  const int warmup = std::max(1, static_cast<int>(cfg.warmup_frac * total_steps));
  const int peak = warmup - 1;  // last warmup step runs at full rate
  if (step <= peak)
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double t = static_cast<double>(step - peak) /
                   static_cast<double>(total_steps - 1 - peak);
  return cfg.lr * (1.0 - (1.0 - cfg.final_frac) * t);
}

void ExperimentConfig::validate() const {
  std::vector<std::string> problems;
  auto absorb = [&](const char* where, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      problems.push_back(std::string(where) + ": " + e.what());
    }
  };
  absorb("scene", [&] { scene.validate(); });
  absorb("teacher", [&] { teacher.validate(); });
  absorb("student", [&] { student.validate(); });
  absorb("distill", [&] { distill.validate(); });
  absorb("optim", [&] { optim.validate(); });

  if (train_scenes < 1) problems.push_back("train_scenes must be at least 1");
  if (teacher_scenes < 0) problems.push_back("teacher_scenes must not be negative");
  if (transfer_scenes < 0) problems.push_back("transfer_scenes must not be negative");
  if (eval_scenes < 0) problems.push_back("eval_scenes must be non-negative");
  if (teacher_epochs < 1) problems.push_back("teacher_epochs must be at least 1");
  if (eval_iou <= 0 || eval_iou >= 1) problems.push_back("eval_iou must lie in (0, 1)");
  if (eval_top_k < 1) problems.push_back("eval_top_k must be at least 1");
  if (eval_min_score < 0 || eval_min_score >= 1)
    problems.push_back("eval_min_score must lie in [0, 1)");
  if (teacher.num_classes != scene.num_classes ||
      student.num_classes != scene.num_classes)
    problems.push_back("detector num_classes must match scene num_classes");
  if (teacher.in_channels != 3 || student.in_channels != 3)
    problems.push_back("detectors must take the 3 rasterized grid channels");
  if (teacher.out_stride != student.out_stride)
    problems.push_back("teacher and student must share out_stride");
  if (scene.grid_h % 4 != 0 || scene.grid_w % 4 != 0)
    problems.push_back("grid dims must be multiples of 4 for the detector");
  if (!problems.empty()) {
    std::string msg = "invalid experiment config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

KvMap ExperimentConfig::to_kv() const {
  KvMap kv = scene.to_kv("scene.");
  // teacher and student share the base architecture; widths come from presets
  KvMap det = teacher.to_kv("detector.");
  det.erase("detector.enc_mult");
  det.erase("detector.neck_mult");
  det.erase("detector.head_mult");
  kv.insert(det.begin(), det.end());
  KvMap dist = distill.to_kv("distill.");
  kv.insert(dist.begin(), dist.end());

  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  kv["train.teacher_preset"] = teacher_preset;
  kv["train.student_preset"] = student_preset;
  kv["train.strategy"] = strategy_name(strategy);
  kv["train.lr"] = num(optim.lr);
  kv["train.momentum"] = num(optim.momentum);
  kv["train.warmup_frac"] = num(optim.warmup_frac);
  kv["train.final_frac"] = num(optim.final_frac);
  kv["train.max_grad_norm"] = num(optim.max_grad_norm);
  kv["train.epochs"] = std::to_string(optim.epochs);
  kv["train.batch_size"] = std::to_string(optim.batch_size);
  kv["train.train_scenes"] = std::to_string(train_scenes);
  kv["train.teacher_scenes"] = std::to_string(teacher_scenes);
  kv["train.transfer_scenes"] = std::to_string(transfer_scenes);
  kv["train.eval_scenes"] = std::to_string(eval_scenes);
  kv["train.teacher_epochs"] = std::to_string(teacher_epochs);
  kv["train.eval_iou"] = num(eval_iou);
  kv["train.eval_top_k"] = std::to_string(eval_top_k);
  kv["train.eval_min_score"] = num(eval_min_score);
  kv["train.seed"] = std::to_string(seed);
  kv["train.out_dir"] = out_dir;
  kv["train.teacher_ckpt"] = teacher_ckpt;
  return kv;
}

ExperimentConfig ExperimentConfig::from_kv(const KvMap& kv) {
  KvReader reader(kv);
  ExperimentConfig cfg;
  cfg.scene = SceneConfig::from_kv(reader, "scene.");
  DetectorConfig base = DetectorConfig::from_kv(reader, "detector.");
  cfg.distill = DistillConfig::from_kv(reader, "distill.");

  cfg.teacher_preset = reader.get_string("train.teacher_preset", cfg.teacher_preset);
  cfg.student_preset = reader.get_string("train.student_preset", cfg.student_preset);
  const std::string strategy = reader.get_string("train.strategy", "rdd");
  cfg.optim.lr = reader.get_double("train.lr", cfg.optim.lr);
  cfg.optim.momentum = reader.get_double("train.momentum", cfg.optim.momentum);
  cfg.optim.warmup_frac = reader.get_double("train.warmup_frac", cfg.optim.warmup_frac);
  cfg.optim.final_frac = reader.get_double("train.final_frac", cfg.optim.final_frac);
  cfg.optim.max_grad_norm =
      reader.get_double("train.max_grad_norm", cfg.optim.max_grad_norm);
  cfg.optim.epochs = reader.get_int("train.epochs", cfg.optim.epochs);
  cfg.optim.batch_size = reader.get_int("train.batch_size", cfg.optim.batch_size);
  cfg.train_scenes = reader.get_int("train.train_scenes", cfg.train_scenes);
  cfg.teacher_scenes =
      reader.get_int("train.teacher_scenes", cfg.teacher_scenes);
  cfg.transfer_scenes =
      reader.get_int("train.transfer_scenes", cfg.transfer_scenes);
  cfg.eval_scenes = reader.get_int("train.eval_scenes", cfg.eval_scenes);
  cfg.teacher_epochs = reader.get_int("train.teacher_epochs", cfg.teacher_epochs);
  cfg.eval_iou = reader.get_double("train.eval_iou", cfg.eval_iou);
  cfg.eval_top_k = reader.get_int("train.eval_top_k", cfg.eval_top_k);
  cfg.eval_min_score = reader.get_double("train.eval_min_score", cfg.eval_min_score);
  cfg.seed = static_cast<std::uint64_t>(reader.get_int("train.seed", 1));
  cfg.out_dir = reader.get_string("train.out_dir", cfg.out_dir);
  cfg.teacher_ckpt = reader.get_string("train.teacher_ckpt", cfg.teacher_ckpt);
  reader.finish(true);

  cfg.strategy = parse_strategy(strategy);
  cfg.teacher = base;
  cfg.teacher.apply_preset(cfg.teacher_preset);
  cfg.student = base;
  cfg.student.apply_preset(cfg.student_preset);
  cfg.validate();
  return cfg;
}

std::uint64_t ExperimentConfig::digest() const {
  return fnv1a64(canonical_kv_text(to_kv()));
}

SceneSet build_scene_set(const SceneConfig& cfg, int count, std::uint64_t seed) {
  if (count < 0) throw ConfigError("scene count must be non-negative");
  SceneSet scenes;
  scenes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Scene s = generate_scene(cfg, mix_seed(seed, static_cast<std::uint64_t>(i)));
    s.bev = rasterize_bev(s.points, cfg);
    scenes.push_back(std::move(s));
  }
  return scenes;
}

namespace {

// SGD with momentum over a parameter list; velocity persists across steps.
class SgdState {
 public:
  void ensure(std::size_t slots) {
    if (velocity_.size() < slots) velocity_.resize(slots);
  }
  // master <- master - lr * (momentum * v + grad_scale * grad)
  void apply(std::size_t slot, Tensor& master, const Tensor& live, double lr,
             double momentum, double grad_scale) {
    auto& v = velocity_[slot];
    if (v.size() != master.size()) v.assign(master.size(), 0.0);
    const bool has = live.has_grad();
    const std::vector<double>* g = has ? &live.grad() : nullptr;
    double* w = master.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum * v[i] + (g ? grad_scale * (*g)[i] : 0.0);
      w[i] -= lr * v[i];
    }
  }

 private:
  std::vector<std::vector<double>> velocity_;
};

double grad_sq_norm(const Tensor& t) {
  if (!t.has_grad()) return 0.0;
  double acc = 0.0;
  for (double g : t.grad()) acc += g * g;
  return acc;
}

double mse(const Tensor& x) {  // mean of squares, as a plain number
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i] * x.data()[i];
  return acc / static_cast<double>(x.size());
}

}  // namespace

RunReport train_student(DetectorParams& model, const DetectorParams* teacher,
                        const SceneSet& train, const SceneSet& eval_set,
                        const ExperimentConfig& cfg) {
  const Strategy strat = cfg.strategy;
  if (train.empty()) throw ConfigError("training scene set is empty");
  if (strat != Strategy::kNone && teacher == nullptr)
    throw ContractError("strategy " + strategy_name(strat) + " needs a teacher");

  const auto t_begin = std::chrono::steady_clock::now();
  const OptimConfig& opt = cfg.optim;
  const DistillConfig& dist = cfg.distill;

  // Unlabeled transfer scenes carry only the imitation losses, so they are
  // meaningless without a teacher and are skipped for plain training.
  SceneSet transfer;
  if (strat != Strategy::kNone && cfg.transfer_scenes > 0)
    transfer = experiment_transfer_scenes(cfg);
  const std::size_t n_labeled = train.size();
  const std::size_t n_items = n_labeled + transfer.size();
  auto item_scene = [&](std::size_t i) -> const Scene& {
    return i < n_labeled ? train[i] : transfer[i - n_labeled];
  };

  // The teacher is frozen, so its outputs per scene are constants: compute
  // them once, not once per epoch.
  std::vector<DetOutput> teacher_outs;
  std::vector<std::vector<Proposal>> teacher_props;
  if (strat != Strategy::kNone) {
    teacher_outs.reserve(n_items);
    for (std::size_t i = 0; i < n_items; ++i) {
      teacher_outs.push_back(detector_forward(*teacher, item_scene(i).bev));
      if (strat == Strategy::kEqual || strat == Strategy::kRdd)
        teacher_props.push_back(extract_proposals(teacher_outs.back(), dist.top_k,
                                                  dist.min_score, Source::kTeacher));
    }
  }

  AdapterParams psi;
  const bool use_psi = strat != Strategy::kNone;
  if (use_psi)
    psi = init_adapter(teacher->config.neck(), model.config.neck(),
                       mix_seed(cfg.seed, kPsiInitStream));

  SgdState sgd;
  sgd.ensure(model.tensors.size() + 3);
  const std::size_t psi_base = model.tensors.size();

  Rng shuffle_rng(mix_seed(cfg.seed, kShuffleStream));
  std::vector<std::size_t> order(n_items);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const int steps_per_epoch =
      static_cast<int>((n_items + static_cast<std::size_t>(opt.batch_size) - 1) /
                       static_cast<std::size_t>(opt.batch_size));
  const int total_steps = steps_per_epoch * opt.epochs;

  RunReport report;
  report.strategy = strategy_name(strat);
  report.seed = cfg.seed;
  report.config_digest = cfg.digest();

  int step = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(
                    0, static_cast<int>(i) - 1))]);

    EpochRow row;
    row.epoch = epoch;
    double epoch_mask = 0.0;

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(stop - start);

      Tape tape;
      DetectorParams live = model.to_tape(tape);
      AdapterParams psi_live = use_psi ? psi.to_tape(tape) : AdapterParams{};

      Tensor l_cls = scalar_tensor(0.0), l_reg = scalar_tensor(0.0);
      Tensor l_feat = scalar_tensor(0.0), l_logit = scalar_tensor(0.0);
      int pair_count = 0, selected = 0;

      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t idx = order[b];
        const Scene& scene = item_scene(idx);
        DetOutput out = detector_forward(live, scene.bev);
        if (idx < n_labeled) {
          DetLosses det = detection_loss(out, scene, model.config);
          l_cls = add(l_cls, det.cls);
          l_reg = add(l_reg, det.reg);
        }

        if (strat == Strategy::kHint) {
          // whole-neck imitation: adapt the student map, mean-square error
          const DetOutput& tout = teacher_outs[idx];
          const Tensor& sneck = out.neck_feature;
          Tensor batched = reshape(sneck, Shape{1, sneck.dim(0), sneck.dim(1),
                                                sneck.dim(2)});
          Tensor adapted = select_image(adapt_student(batched, psi_live, true), 0);
          Tensor diff = sub(adapted, tout.neck_feature);
          l_feat = add(l_feat, scale(sum(mul(diff, diff)),
                                     1.0 / static_cast<double>(diff.size())));
        } else if (strat == Strategy::kEqual || strat == Strategy::kRdd) {
          const DetOutput& tout = teacher_outs[idx];
          auto sprops =
              extract_proposals(out, dist.top_k, dist.min_score, Source::kStudent);
          auto pairs = pair_regions(teacher_props[idx], sprops, tout, out, psi_live,
                                    dist.pairing(), true);
          if (!pairs.empty()) {
            Mask mask;
            if (strat == Strategy::kEqual) {
              // every candidate pair distilled with equal weight
              mask.m.assign(pairs.size(), 1);
            } else {
              std::vector<double> scores;
              scores.reserve(pairs.size());
              for (const RegionPair& p : pairs)
                scores.push_back(disparity_score(p, dist.kappa).mi_proxy);
              mask = solve_mask(scores, dist.lambda);
            }
            pair_count += static_cast<int>(pairs.size());
            selected += mask.ones();
            l_feat = add(l_feat,
                         feature_loss(pairs, mask, dist.squared_feature_norm));
            l_logit = add(l_logit, logit_loss(pairs, mask, dist.anchor_style_logits));
          }
        }
      }

      l_cls = scale(l_cls, inv_batch);
      l_reg = scale(l_reg, inv_batch);
      l_feat = scale(l_feat, inv_batch);
      l_logit = scale(l_logit, inv_batch);
      Tensor total = total_loss(l_cls, l_reg, l_feat, l_logit, dist);
      if (!std::isfinite(total.value()))
        throw TrainError("training loss is not finite (strategy " +
                         strategy_name(strat) + ", epoch " + std::to_string(epoch) +
                         ", step " + std::to_string(step) + ", seed " +
                         std::to_string(cfg.seed) + ")");
      // A batch of only transfer scenes whose pairs were all masked out has a
      // constant loss: a legitimate zero-gradient step (momentum still decays).
      if (total.tape() == &tape) tape.backward(total);

      double grad_scale = 1.0;
      if (opt.max_grad_norm > 0) {
        double sq = 0.0;
        for (const auto& [name, t] : live.tensors) sq += grad_sq_norm(t);
        if (use_psi)
          sq += grad_sq_norm(psi_live.kernel) + grad_sq_norm(psi_live.gamma) +
                grad_sq_norm(psi_live.beta);
        const double norm = std::sqrt(sq);
        if (norm > opt.max_grad_norm) grad_scale = opt.max_grad_norm / norm;
      }

      const double lr = schedule_lr(opt, step, total_steps);
      for (std::size_t p = 0; p < model.tensors.size(); ++p)
        sgd.apply(p, model.tensors[p].second, live.tensors[p].second, lr,
                  opt.momentum, grad_scale);
      if (use_psi) {
        sgd.apply(psi_base + 0, psi.kernel, psi_live.kernel, lr, opt.momentum,
                  grad_scale);
        sgd.apply(psi_base + 1, psi.gamma, psi_live.gamma, lr, opt.momentum,
                  grad_scale);
        sgd.apply(psi_base + 2, psi.beta, psi_live.beta, lr, opt.momentum,
                  grad_scale);
      }

      const double mask_fraction =
          pair_count > 0 ? static_cast<double>(selected) / pair_count : 0.0;
      report.step_mask_fractions.push_back(mask_fraction);
      epoch_mask += mask_fraction;
      row.l_cls += l_cls.value();
      row.l_reg += l_reg.value();
      row.l_feat += l_feat.value();
      row.l_logit += l_logit.value();
      row.total += total.value();
      ++step;
    }

    const double inv_steps = 1.0 / static_cast<double>(steps_per_epoch);
    row.l_cls *= inv_steps;
    row.l_reg *= inv_steps;
    row.l_feat *= inv_steps;
    row.l_logit *= inv_steps;
    row.total *= inv_steps;
    row.mask_fraction = epoch_mask * inv_steps;
    if (!eval_set.empty()) {
      EvalResult ev = evaluate_map_lite(model, eval_set, cfg.eval_iou,
                                        cfg.eval_top_k, cfg.eval_min_score);
      row.eval_map = ev.map;
      if (epoch == opt.epochs - 1) report.final_eval = ev;
    }
    report.epochs.push_back(row);
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin)
          .count();
  return report;
}

SceneSet experiment_train_scenes(const ExperimentConfig& cfg) {
  return build_scene_set(cfg.scene, cfg.train_scenes,
                         mix_seed(cfg.seed, kTrainSceneStream));
}

SceneSet experiment_transfer_scenes(const ExperimentConfig& cfg) {
  return build_scene_set(cfg.scene, cfg.transfer_scenes,
                         mix_seed(cfg.seed, kTransferSceneStream));
}

SceneSet experiment_eval_scenes(const ExperimentConfig& cfg) {
  return build_scene_set(cfg.scene, cfg.eval_scenes,
                         mix_seed(cfg.seed, kEvalSceneStream));
}

DetectorParams obtain_teacher(const ExperimentConfig& cfg, const SceneSet& train,
                              const SceneSet& eval_set, RunReport* report) {
  if (!cfg.teacher_ckpt.empty() && std::filesystem::exists(cfg.teacher_ckpt)) {
    DetectorParams loaded = load_checkpoint(cfg.teacher_ckpt);
    if (loaded.config.digest() != cfg.teacher.digest())
      throw ConfigError("teacher checkpoint " + cfg.teacher_ckpt +
                        " was built with a different detector config");
    return loaded;
  }
  DetectorParams teacher =
      init_detector(cfg.teacher, mix_seed(cfg.seed, kTeacherInitStream));
  ExperimentConfig tcfg = cfg;
  tcfg.strategy = Strategy::kNone;
  tcfg.optim.epochs = cfg.teacher_epochs;
  // A teacher_scenes count larger than the student's set widens the teacher's
  // view of the distribution; drawing from the same stream keeps the student
  // scenes a strict prefix of the teacher's.
  SceneSet wide;
  const SceneSet* tset = &train;
  if (cfg.teacher_scenes > 0) {
    wide = build_scene_set(cfg.scene, cfg.teacher_scenes,
                           mix_seed(cfg.seed, kTrainSceneStream));
    tset = &wide;
  }
  RunReport rep = train_student(teacher, nullptr, *tset, eval_set, tcfg);
  if (report != nullptr) *report = std::move(rep);
  if (!cfg.teacher_ckpt.empty()) save_checkpoint(cfg.teacher_ckpt, teacher);
  return teacher;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  SceneSet train = experiment_train_scenes(cfg);
  SceneSet eval_set = experiment_eval_scenes(cfg);

  ExperimentResult result;
  if (cfg.strategy != Strategy::kNone)
    result.teacher = obtain_teacher(cfg, train, eval_set);
  result.student = init_detector(cfg.student, mix_seed(cfg.seed, kStudentInitStream));
  result.report = train_student(
      result.student, cfg.strategy != Strategy::kNone ? &result.teacher : nullptr,
      train, eval_set, cfg);
  return result;
}

void write_report_csv(const std::string& path, const RunReport& report) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "epoch,L_cls,L_reg,L_feat,L_logit,total,mask_fraction,eval_mAP\n";
  os.precision(17);
  for (const EpochRow& r : report.epochs)
    os << r.epoch << ',' << r.l_cls << ',' << r.l_reg << ',' << r.l_feat << ','
       << r.l_logit << ',' << r.total << ',' << r.mask_fraction << ','
       << r.eval_map << '\n';
  if (!os) throw IoError("failed writing " + path);
}

void write_report_json(const std::string& path, const RunReport& report,
                       const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["strategy"] = report.strategy;
  j["seed"] = report.seed;
  j["config_digest"] = report.config_digest;
  j["wall_seconds"] = report.wall_seconds;
  j["config"] = cfg.to_kv();
  auto& rows = j["epochs"] = nlohmann::json::array();
  for (const EpochRow& r : report.epochs)
    rows.push_back({{"epoch", r.epoch},
                    {"L_cls", r.l_cls},
                    {"L_reg", r.l_reg},
                    {"L_feat", r.l_feat},
                    {"L_logit", r.l_logit},
                    {"total", r.total},
                    {"mask_fraction", r.mask_fraction},
                    {"eval_mAP", r.eval_map}});
  j["step_mask_fractions"] = report.step_mask_fractions;
  auto& fin = j["final_eval"];
  fin["mAP"] = report.final_eval.map;
  auto& classes = fin["per_class"] = nlohmann::json::array();
  for (const ClassAp& c : report.final_eval.per_class)
    classes.push_back({{"class_id", c.class_id},
                       {"ap", c.ap},
                       {"gt_count", c.gt_count},
                       {"pred_count", c.pred_count}});
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("failed writing " + path);
}

ChannelAlignment fit_channel_alignment(const DetectorParams& teacher,
                                       const DetectorParams& student,
                                       const SceneSet& scenes, double ridge) {
  const int c_t = teacher.config.neck();
  const int c_s = student.config.neck();
  ChannelAlignment align;
  if (c_t == c_s) {
    align.identity = true;
    return align;
  }
  if (scenes.empty())
    throw ConfigError("channel alignment needs at least one scene");

  // least squares with bias: solve (X X^T + ridge I) W = X Y^T over all
  // neck locations, X augmented with a constant-1 row
  const int d = c_s + 1;
  std::vector<std::vector<double>> a(static_cast<std::size_t>(d),
                                     std::vector<double>(static_cast<std::size_t>(d), 0.0));
  std::vector<std::vector<double>> rhs(static_cast<std::size_t>(d),
                                       std::vector<double>(static_cast<std::size_t>(c_t), 0.0));
  std::vector<double> x(static_cast<std::size_t>(d), 1.0);
  for (const Scene& scene : scenes) {
    DetOutput tout = detector_forward(teacher, scene.bev);
    DetOutput sout = detector_forward(student, scene.bev);
    const int hw = tout.neck_feature.dim(1) * tout.neck_feature.dim(2);
    const double* td = tout.neck_feature.data();
    const double* sd = sout.neck_feature.data();
    for (int p = 0; p < hw; ++p) {
      for (int c = 0; c < c_s; ++c) x[static_cast<std::size_t>(c)] = sd[c * hw + p];
      x[static_cast<std::size_t>(c_s)] = 1.0;
      for (int i = 0; i < d; ++i) {
        for (int j = i; j < d; ++j)
          a[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +=
              x[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(j)];
        for (int c = 0; c < c_t; ++c)
          rhs[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] +=
              x[static_cast<std::size_t>(i)] * td[c * hw + p];
      }
    }
  }
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < i; ++j)
      a[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          a[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
    a[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] += ridge;
  }

  // Gaussian elimination with partial pivoting on [A | RHS]
  for (int col = 0; col < d; ++col) {
    int pivot = col;
    for (int r = col + 1; r < d; ++r)
      if (std::fabs(a[static_cast<std::size_t>(r)][static_cast<std::size_t>(col)]) >
          std::fabs(a[static_cast<std::size_t>(pivot)][static_cast<std::size_t>(col)]))
        pivot = r;
    std::swap(a[static_cast<std::size_t>(col)], a[static_cast<std::size_t>(pivot)]);
    std::swap(rhs[static_cast<std::size_t>(col)], rhs[static_cast<std::size_t>(pivot)]);
    const double diag = a[static_cast<std::size_t>(col)][static_cast<std::size_t>(col)];
    if (std::fabs(diag) < 1e-12)
      throw TrainError("channel alignment system is singular");
    for (int r = 0; r < d; ++r) {
      if (r == col) continue;
      const double f =
          a[static_cast<std::size_t>(r)][static_cast<std::size_t>(col)] / diag;
      if (f == 0.0) continue;
      for (int j = col; j < d; ++j)
        a[static_cast<std::size_t>(r)][static_cast<std::size_t>(j)] -=
            f * a[static_cast<std::size_t>(col)][static_cast<std::size_t>(j)];
      for (int c = 0; c < c_t; ++c)
        rhs[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] -=
            f * rhs[static_cast<std::size_t>(col)][static_cast<std::size_t>(c)];
    }
  }

  align.w.assign(static_cast<std::size_t>(c_t),
                 std::vector<double>(static_cast<std::size_t>(c_s), 0.0));
  align.b.assign(static_cast<std::size_t>(c_t), 0.0);
  for (int c = 0; c < c_t; ++c) {
    for (int s = 0; s < c_s; ++s)
      align.w[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)] =
          rhs[static_cast<std::size_t>(s)][static_cast<std::size_t>(c)] /
          a[static_cast<std::size_t>(s)][static_cast<std::size_t>(s)];
    align.b[static_cast<std::size_t>(c)] =
        rhs[static_cast<std::size_t>(c_s)][static_cast<std::size_t>(c)] /
        a[static_cast<std::size_t>(c_s)][static_cast<std::size_t>(c_s)];
  }
  return align;
}

Tensor apply_alignment(const ChannelAlignment& align, const Tensor& patch) {
  if (patch.rank() != 3)
    throw ConfigError("apply_alignment expects [C,h,w], got " +
                      shape_str(patch.shape()));
  if (align.identity) return patch.detach();
  const int c_s = patch.dim(0), h = patch.dim(1), w = patch.dim(2);
  if (c_s != static_cast<int>(align.w.front().size()))
    throw ConfigError("alignment expects " +
                      std::to_string(align.w.front().size()) + " channels, got " +
                      std::to_string(c_s));
  const int c_t = static_cast<int>(align.w.size());
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out(Shape{c_t, h, w});
  for (int c = 0; c < c_t; ++c) {
    double* o = out.data() + static_cast<std::size_t>(c) * plane;
    for (std::size_t p = 0; p < plane; ++p) o[p] = align.b[static_cast<std::size_t>(c)];
    for (int s = 0; s < c_s; ++s) {
      const double wcs = align.w[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)];
      if (wcs == 0.0) continue;
      const double* in = patch.data() + static_cast<std::size_t>(s) * plane;
      for (std::size_t p = 0; p < plane; ++p) o[p] += wcs * in[p];
    }
  }
  return out;
}

std::vector<double> collect_pair_distances(const DetectorParams& teacher,
                                           const DetectorParams& student,
                                           const SceneSet& scenes,
                                           const DistillConfig& cfg) {
  ChannelAlignment align = fit_channel_alignment(teacher, student, scenes);
  std::vector<double> distances;
  for (const Scene& scene : scenes) {
    DetOutput tout = detector_forward(teacher, scene.bev);
    DetOutput sout = detector_forward(student, scene.bev);
    auto tprops = extract_proposals(tout, cfg.top_k, cfg.min_score, Source::kTeacher);
    auto sprops = extract_proposals(sout, cfg.top_k, cfg.min_score, Source::kStudent);

    std::vector<Box> boxes;
    for (const Proposal& p : tprops) boxes.push_back(proposal_box(p, cfg.box_margin));
    for (const Proposal& p : sprops) boxes.push_back(proposal_box(p, cfg.box_margin));
    for (const Box& box : boxes) {
      Tensor tp = normalize_channels(roi_align(tout.neck_feature, box, cfg.roi_r),
                                     cfg.tau, cfg.spatial_softmax);
      Tensor sp = normalize_channels(
          apply_alignment(align, roi_align(sout.neck_feature, box, cfg.roi_r)),
          cfg.tau, cfg.spatial_softmax);
      distances.push_back(mse(sub(sp, tp)));
    }
  }
  return distances;
}

Histogram make_histogram(const std::vector<double>& values, int bins,
                         double max_edge) {
  if (bins < 1) throw ConfigError("histogram needs at least one bucket");
  if (max_edge < 0) throw ConfigError("histogram edge must be non-negative");
  Histogram hist;
  hist.max_edge = max_edge;
  hist.counts.assign(static_cast<std::size_t>(bins), 0);
  hist.total = static_cast<int>(values.size());
  for (double v : values) {
    int b = 0;
    if (max_edge > 0)
      b = std::clamp(static_cast<int>(v / max_edge * bins), 0, bins - 1);
    ++hist.counts[static_cast<std::size_t>(b)];
  }
  return hist;
}

void write_histogram(const std::string& path, const Histogram& hist) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "bucket_upper_edge,count\n";
  os.precision(17);
  const int bins = static_cast<int>(hist.counts.size());
  for (int b = 0; b < bins; ++b)
    os << hist.max_edge * (b + 1) / bins << ',' << hist.counts[static_cast<std::size_t>(b)]
       << '\n';
  if (!os) throw IoError("failed writing " + path);
}

}  // namespace rdd
