#include "rdd/losses.hpp"

#include <sstream>

namespace rdd {

void DistillConfig::validate() const {
  std::vector<std::string> problems;
  if (tau <= 0) problems.push_back("tau must be positive");
  if (lambda < 0) problems.push_back("lambda must be non-negative");
  if (alpha1 < 0) problems.push_back("alpha1 must be non-negative");
  if (alpha2 < 0) problems.push_back("alpha2 must be non-negative");
  if (gamma < 0) problems.push_back("gamma must be non-negative");
  if (kappa < 0) problems.push_back("kappa must be non-negative");
  if (top_k < 1) problems.push_back("top_k must be at least 1");
  if (roi_r < 1) problems.push_back("roi_r must be at least 1");
  if (min_score < 0 || min_score >= 1)
    problems.push_back("min_score must lie in [0, 1)");
  if (box_margin < 0) problems.push_back("box_margin must be non-negative");
  if (!problems.empty()) {
    std::string msg = "invalid distillation config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

KvMap DistillConfig::to_kv(const std::string& prefix) const {
  KvMap kv;
  auto put = [&](const std::string& k, const std::string& v) { kv[prefix + k] = v; };
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  put("tau", num(tau));
  put("lambda", num(lambda));
  put("alpha1", num(alpha1));
  put("alpha2", num(alpha2));
  put("gamma", num(gamma));
  put("kappa", num(kappa));
  put("top_k", std::to_string(top_k));
  put("roi_r", std::to_string(roi_r));
  put("min_score", num(min_score));
  put("box_margin", num(box_margin));
  put("anchor_style_logits", anchor_style_logits ? "true" : "false");
  put("squared_feature_norm", squared_feature_norm ? "true" : "false");
  put("spatial_softmax", spatial_softmax ? "true" : "false");
  return kv;
}

DistillConfig DistillConfig::from_kv(KvReader& reader, const std::string& prefix) {
  DistillConfig cfg;
  cfg.tau = reader.get_double(prefix + "tau", cfg.tau);
  cfg.lambda = reader.get_double(prefix + "lambda", cfg.lambda);
  cfg.alpha1 = reader.get_double(prefix + "alpha1", cfg.alpha1);
  cfg.alpha2 = reader.get_double(prefix + "alpha2", cfg.alpha2);
  cfg.gamma = reader.get_double(prefix + "gamma", cfg.gamma);
  cfg.kappa = reader.get_double(prefix + "kappa", cfg.kappa);
  cfg.top_k = reader.get_int(prefix + "top_k", cfg.top_k);
  cfg.roi_r = reader.get_int(prefix + "roi_r", cfg.roi_r);
  cfg.min_score = reader.get_double(prefix + "min_score", cfg.min_score);
  cfg.box_margin = reader.get_double(prefix + "box_margin", cfg.box_margin);
  cfg.anchor_style_logits =
      reader.get_bool(prefix + "anchor_style_logits", cfg.anchor_style_logits);
  cfg.squared_feature_norm =
      reader.get_bool(prefix + "squared_feature_norm", cfg.squared_feature_norm);
  cfg.spatial_softmax = reader.get_bool(prefix + "spatial_softmax", cfg.spatial_softmax);
  return cfg;
}

PairingSettings DistillConfig::pairing() const {
  PairingSettings s;
  s.roi_r = roi_r;
  s.tau = tau;
  s.box_margin = box_margin;
  s.spatial_softmax = spatial_softmax;
  return s;
}

namespace {

void check_mask(const std::vector<RegionPair>& pairs, const Mask& mask,
                const char* what) {
  if (pairs.size() != mask.m.size())
    throw ContractError(std::string(what) + ": " + std::to_string(pairs.size()) +
                        " pairs but " + std::to_string(mask.m.size()) +
                        " mask entries");
}

}  // namespace

Tensor feature_loss(const std::vector<RegionPair>& pairs, const Mask& mask,
                    bool squared) {
  check_mask(pairs, mask, "feature_loss");
  Tensor acc = scalar_tensor(0.0);
  if (pairs.empty()) return acc;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!mask.m[i]) continue;
    Tensor diff = sub(pairs[i].student_patch, pairs[i].teacher_patch);
    acc = add(acc, squared ? sum(mul(diff, diff)) : l2_norm(diff));
  }
  return scale(acc, 1.0 / static_cast<double>(pairs.size()));
}

Tensor logit_loss(const std::vector<RegionPair>& pairs, const Mask& mask,
                  bool anchor_style) {
  check_mask(pairs, mask, "logit_loss");
  Tensor acc = scalar_tensor(0.0);
  if (pairs.empty()) return acc;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!mask.m[i]) continue;
    acc = add(acc, l1_norm(sub(pairs[i].student_cls, pairs[i].teacher_cls)));
    if (anchor_style)
      acc = add(acc, l1_norm(sub(pairs[i].student_reg, pairs[i].teacher_reg)));
  }
  return scale(acc, 1.0 / static_cast<double>(pairs.size()));
}

Tensor total_loss(const Tensor& l_cls, const Tensor& l_reg, const Tensor& l_feat,
                  const Tensor& l_logit, const DistillConfig& cfg) {
  if (l_cls.size() != 1 || l_reg.size() != 1 || l_feat.size() != 1 ||
      l_logit.size() != 1)
    throw ConfigError("total_loss expects scalar components");
  Tensor total = add(l_cls, scale(l_reg, cfg.gamma));
  total = add(total, scale(l_feat, cfg.alpha1));
  return add(total, scale(l_logit, cfg.alpha2));
}

}  // namespace rdd
