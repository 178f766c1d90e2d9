// Representation-disparity scoring of region pairs (entropy of the
// normalized student patch minus a scaled patch distance) and the
// L1-penalized selection problem whose minimizer is the binary mask that
// gates the distillation losses.
#pragma once

#include <vector>

#include "rdd/regions.hpp"
#include "rdd/tensor.hpp"

namespace rdd {

struct DisparityScore {
  double entropy_s = 0;  // mean per-location channel entropy, nats
  double distance = 0;   // mean squared difference between the patches
  double mi_proxy = 0;   // entropy_s - kappa * distance; lower = more disparate
};

// Mean over spatial locations of the channel entropy -sum_c p ln p (with
// 0 ln 0 := 0). The input must already be channel-normalized: a location
// whose channel sum deviates from 1 by more than 1e-6 is a ContractError.
double entropy(const Tensor& patch_normalized);

// Scores one pair from its normalized patches; reads values only, never
// touches the tape.
DisparityScore disparity_score(const RegionPair& pair, double kappa);

struct Mask {
  std::vector<int> m;  // one {0,1} entry per pair

  int ones() const;
  double fraction() const;  // ones / size; 0 for an empty mask
};

// Elementwise minimizer of sum_i m_i * (score_i + lambda) over [0,1]^n.
// The objective is linear and separable, so the optimum sits at a vertex:
// m_i = 1 exactly when score_i + lambda < 0; ties keep 0 (don't distill).
Mask solve_mask(const std::vector<double>& scores, double lambda);

// Projected gradient descent on the same objective, clipped to [0,1] after
// every step and thresholded at 0.5 at the end. Agrees with solve_mask on
// every non-tie instance; kept as an independently-derived cross-check.
Mask solve_mask_gd(const std::vector<double>& scores, double lambda, int steps,
                   double lr);

}  // namespace rdd
