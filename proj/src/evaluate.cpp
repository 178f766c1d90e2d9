#include "rdd/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rdd/regions.hpp"

namespace rdd {

double box_iou(const DetBox& a, const DetBox& b) {
  const double ix = std::min(a.cx + a.w / 2, b.cx + b.w / 2) -
                    std::max(a.cx - a.w / 2, b.cx - b.w / 2);
  const double iy = std::min(a.cy + a.l / 2, b.cy + b.l / 2) -
                    std::max(a.cy - a.l / 2, b.cy - b.l / 2);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.w * a.l + b.w * b.l - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<bool> greedy_match(const std::vector<DetBox>& preds,
                               const std::vector<DetBox>& gt, double iou_thresh) {
  if (iou_thresh <= 0 || iou_thresh >= 1)
    throw ConfigError("iou threshold must lie in (0, 1)");
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return preds[a].score > preds[b].score;
  });

  std::vector<bool> hit(preds.size(), false);
  std::vector<bool> taken(gt.size(), false);
  for (const std::size_t pi : order) {
    double best = 0.0;
    std::size_t best_g = gt.size();
    for (std::size_t gi = 0; gi < gt.size(); ++gi) {
      if (taken[gi] || gt[gi].class_id != preds[pi].class_id) continue;
      const double iou = box_iou(preds[pi], gt[gi]);
      if (iou > best) {
        best = iou;
        best_g = gi;
      }
    }
    if (best_g < gt.size() && best >= iou_thresh) {
      taken[best_g] = true;
      hit[pi] = true;
    }
  }
  return hit;
}

double ap40(std::vector<std::pair<double, bool>> scored, int gt_count) {
  if (gt_count <= 0) return 0.0;
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  // precision/recall after each prediction
  std::vector<double> precision(scored.size()), recall(scored.size());
  int tp = 0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    if (scored[i].second) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(gt_count);
  }
  double total = 0.0;
  for (int k = 1; k <= 40; ++k) {
    const double level = static_cast<double>(k) / 40.0;
    double best = 0.0;
    for (std::size_t i = 0; i < scored.size(); ++i)
      if (recall[i] + 1e-12 >= level) best = std::max(best, precision[i]);
    total += best;
  }
  return total / 40.0;
}

EvalResult evaluate_detections(const std::vector<std::vector<DetBox>>& preds_per_scene,
                               const std::vector<std::vector<DetBox>>& gt_per_scene,
                               int num_classes, double iou_thresh) {
  if (preds_per_scene.size() != gt_per_scene.size())
    throw ContractError("prediction and ground-truth scene counts differ");
  std::vector<std::vector<std::pair<double, bool>>> scored(
      static_cast<std::size_t>(num_classes));
  std::vector<int> gt_count(static_cast<std::size_t>(num_classes), 0);
  std::vector<int> pred_count(static_cast<std::size_t>(num_classes), 0);

  for (std::size_t s = 0; s < preds_per_scene.size(); ++s) {
    const auto& preds = preds_per_scene[s];
    const auto& gt = gt_per_scene[s];
    for (const DetBox& g : gt) {
      if (g.class_id < 0 || g.class_id >= num_classes)
        throw ConfigError("ground-truth class " + std::to_string(g.class_id) +
                          " outside [0," + std::to_string(num_classes) + ")");
      ++gt_count[static_cast<std::size_t>(g.class_id)];
    }
    auto hit = greedy_match(preds, gt, iou_thresh);
    for (std::size_t p = 0; p < preds.size(); ++p) {
      const int c = preds[p].class_id;
      if (c < 0 || c >= num_classes)
        throw ConfigError("prediction class " + std::to_string(c) + " outside [0," +
                          std::to_string(num_classes) + ")");
      scored[static_cast<std::size_t>(c)].emplace_back(preds[p].score, hit[p]);
      ++pred_count[static_cast<std::size_t>(c)];
    }
  }

  EvalResult result;
  double sum = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    if (gt_count[static_cast<std::size_t>(c)] == 0) continue;
    ClassAp entry;
    entry.class_id = c;
    entry.gt_count = gt_count[static_cast<std::size_t>(c)];
    entry.pred_count = pred_count[static_cast<std::size_t>(c)];
    entry.ap = ap40(scored[static_cast<std::size_t>(c)], entry.gt_count);
    sum += entry.ap;
    result.per_class.push_back(entry);
  }
  result.map = result.per_class.empty()
                   ? 0.0
                   : sum / static_cast<double>(result.per_class.size());
  return result;
}

EvalResult evaluate_map_lite(const DetectorParams& params, const SceneSet& scenes,
                             double iou_thresh, int top_k, double min_score) {
  const double inv_stride = 1.0 / params.config.out_stride;
  std::vector<std::vector<DetBox>> preds(scenes.size()), gt(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    DetOutput out = detector_forward(params, scenes[s].bev);
    for (const Proposal& p :
         extract_proposals(out, top_k, min_score, Source::kStudent)) {
      DetBox box;
      box.cx = p.cx;
      box.cy = p.cy;
      box.w = p.w;
      box.l = p.l;
      box.class_id = p.class_id;
      box.score = p.score;
      preds[s].push_back(box);
    }
    for (const ObjectGT& o : scale_objects(scenes[s].objects, inv_stride)) {
      DetBox box;
      box.cx = o.cx;
      box.cy = o.cy;
      box.w = o.w;
      box.l = o.l;
      box.class_id = o.class_id;
      box.score = 1.0;
      gt[s].push_back(box);
    }
  }
  return evaluate_detections(preds, gt, params.config.num_classes, iou_thresh);
}

}  // namespace rdd
