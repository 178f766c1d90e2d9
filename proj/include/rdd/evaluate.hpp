// Detection quality scoring: axis-aligned BEV IoU, greedy score-ordered
// matching, and 40-point interpolated average precision over a scene set.
#pragma once

#include <utility>
#include <vector>

#include "rdd/detector.hpp"
#include "rdd/scene.hpp"

namespace rdd {

struct DetBox {
  double cx = 0, cy = 0, w = 1, l = 1;
  int class_id = 0;
  double score = 0;
};

// Intersection-over-union of two axis-aligned center/extent boxes.
double box_iou(const DetBox& a, const DetBox& b);

// One-to-one matching within a scene: predictions in descending score order
// each take the unmatched same-class ground-truth box of highest IoU, and
// count as hits when that IoU reaches iou_thresh. Returns hit flags aligned
// with the input prediction order.
std::vector<bool> greedy_match(const std::vector<DetBox>& preds,
                               const std::vector<DetBox>& gt, double iou_thresh);

// 40-point interpolated average precision from (score, hit) pairs pooled
// over a class: mean over recall levels i/40 of the best precision attained
// at or beyond that recall. Zero when there are no ground-truth boxes.
double ap40(std::vector<std::pair<double, bool>> scored, int gt_count);

struct ClassAp {
  int class_id = 0;
  int gt_count = 0;
  int pred_count = 0;
  double ap = 0.0;
};

struct EvalResult {
  std::vector<ClassAp> per_class;  // only classes with ground-truth boxes
  double map = 0.0;                // mean AP over those classes
};

// Matching + AP over parallel per-scene prediction/ground-truth lists.
EvalResult evaluate_detections(const std::vector<std::vector<DetBox>>& preds_per_scene,
                               const std::vector<std::vector<DetBox>>& gt_per_scene,
                               int num_classes, double iou_thresh);

// Full pipeline: forward every scene, decode proposals, and score them
// against the scaled ground truth in heatmap-cell coordinates.
EvalResult evaluate_map_lite(const DetectorParams& params, const SceneSet& scenes,
                             double iou_thresh = 0.5, int top_k = 16,
                             double min_score = 0.1);

}  // namespace rdd
