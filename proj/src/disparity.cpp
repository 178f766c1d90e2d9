#include "rdd/disparity.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace rdd {

double entropy(const Tensor& patch_normalized) {
  if (patch_normalized.rank() != 3)
    throw ConfigError("entropy expects [C,h,w], got " +
                      shape_str(patch_normalized.shape()));
  const int C = patch_normalized.dim(0);
  const int h = patch_normalized.dim(1), w = patch_normalized.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const double* d = patch_normalized.data();

  double total = 0.0;
  for (std::size_t s = 0; s < plane; ++s) {
    double sum = 0.0, ent = 0.0;
    for (int c = 0; c < C; ++c) {
      const double p = d[static_cast<std::size_t>(c) * plane + s];
      sum += p;
      if (p > 0.0) ent -= p * std::log(p);
    }
    if (std::fabs(sum - 1.0) > 1e-6)
      throw ContractError("entropy input is not channel-normalized (location " +
                          std::to_string(s) + " sums to " + std::to_string(sum) + ")");
    total += ent;
  }
  return total / static_cast<double>(plane);
}

DisparityScore disparity_score(const RegionPair& pair, double kappa) {
  if (pair.teacher_patch.shape() != pair.student_patch.shape())
    throw ConfigError("pair patches disagree in shape: " +
                      shape_str(pair.teacher_patch.shape()) + " vs " +
                      shape_str(pair.student_patch.shape()));
  DisparityScore score;
  score.entropy_s = entropy(pair.student_patch);
  const double* t = pair.teacher_patch.data();
  const double* s = pair.student_patch.data();
  const std::size_t n = pair.teacher_patch.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = s[i] - t[i];
    acc += d * d;
  }
  score.distance = acc / static_cast<double>(n);
  score.mi_proxy = score.entropy_s - kappa * score.distance;
  return score;
}

int Mask::ones() const {
  int n = 0;
  for (int v : m) n += v;
  return n;
}

double Mask::fraction() const {
  return m.empty() ? 0.0 : static_cast<double>(ones()) / static_cast<double>(m.size());
}

Mask solve_mask(const std::vector<double>& scores, double lambda) {
  if (lambda < 0) throw ConfigError("mask penalty lambda must be non-negative");
  Mask mask;
  mask.m.resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    mask.m[i] = scores[i] + lambda < 0.0 ? 1 : 0;
  return mask;
}

Mask solve_mask_gd(const std::vector<double>& scores, double lambda, int steps,
                   double lr) {
  if (lambda < 0) throw ConfigError("mask penalty lambda must be non-negative");
  if (steps < 1) throw ConfigError("gradient solver needs at least one step");
  std::vector<double> m(scores.size(), 0.5);
  for (int step = 0; step < steps; ++step)
    for (std::size_t i = 0; i < m.size(); ++i)
      m[i] = std::clamp(m[i] - lr * (scores[i] + lambda), 0.0, 1.0);
  Mask mask;
  mask.m.resize(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) mask.m[i] = m[i] > 0.5 ? 1 : 0;
  return mask;
}

}  // namespace rdd
