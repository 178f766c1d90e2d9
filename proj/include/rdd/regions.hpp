// Region proposals from detector outputs, bilateral teacher/student pairing,
// RoI-aligned patch cropping, the student channel adapter, and the
// temperature channel-softmax that turns patches into per-location
// probability distributions.
#pragma once

#include <memory>
#include <vector>

#include "rdd/detector.hpp"
#include "rdd/tensor.hpp"

namespace rdd {

enum class Source { kTeacher, kStudent };

struct Proposal {
  double cx = 0, cy = 0;        // decoded center, real grid coordinates
  double w = 1, l = 1;          // decoded extent, grid units
  std::vector<double> p_cls;    // class probabilities at the peak cell
  std::vector<double> p_reg;    // raw regression vector at the peak cell
  Source source = Source::kTeacher;
  double score = 0;             // peak heatmap value
  int class_id = 0;
  int peak_x = 0, peak_y = 0;
};

struct Box {
  double cx = 0, cy = 0, w = 1, l = 1;
  double x0() const { return cx - w / 2; }
  double y0() const { return cy - l / 2; }
};

// Crop geometry for a proposal: decoded extent plus `margin` cells on every
// side, never smaller than one cell.
Box proposal_box(const Proposal& p, double margin);

// Peaks of the class heatmaps (3x3 neighborhood maxima, ties kept), sorted by
// score descending, truncated to top_k, filtered by min_score. Extents decode
// from the regression map at each peak and are clamped to [1, grid].
std::vector<Proposal> extract_proposals(const DetOutput& out, int top_k,
                                        double min_score, Source source);

// r x r crop of `feature` over `box`, one border-clamped bilinear sample at
// each bin center. Degenerate boxes are clamped to one cell per axis.
Tensor roi_align(const Tensor& feature, const Box& box, int r);

// Per-class max over the cells whose centers fall inside the box (the box is
// clamped to the grid and always covers at least the cell nearest its center).
Tensor region_max_pool(const Tensor& map, const Box& box);

// Temperature softmax across channels at every spatial location (rank-3
// [C,h,w] or rank-4 [P,C,h,w] input). With spatial=true the softmax instead
// runs across the h*w positions of each channel.
Tensor normalize_channels(const Tensor& patch, double tau, bool spatial = false);

// 1x1 projection + per-channel normalization + rectifier mapping student
// channels onto teacher channels. Running statistics are shared between tape
// copies so evaluation sees what training accumulated.
struct AdapterParams {
  Tensor kernel;  // [C_T, C_S, 1, 1]
  Tensor gamma;   // [C_T]
  Tensor beta;    // [C_T]
  std::shared_ptr<std::vector<double>> running_mean;
  std::shared_ptr<std::vector<double>> running_var;
  bool use_norm = true;
  double eps = 1e-5;
  double momentum = 0.1;

  AdapterParams to_tape(Tape& tape) const;
};

AdapterParams init_adapter(int c_t, int c_s, std::uint64_t seed);

// patches: [P, C_S, r, r] -> [P, C_T, r, r]. In training mode the
// normalization uses batch statistics over the whole patch set and updates
// the running statistics; in eval mode it uses the running statistics.
Tensor adapt_student(const Tensor& patches, AdapterParams& psi, bool training);

struct PairingSettings {
  int roi_r = 7;
  double tau = 4.0;
  double box_margin = 1.0;
  bool spatial_softmax = false;
};

struct RegionPair {
  Box box;
  Source origin = Source::kTeacher;
  Tensor teacher_patch;   // [C_T, r, r], softmax-normalized, constant
  Tensor student_patch;   // [C_T, r, r], adapted then normalized, on tape
  Tensor teacher_cls;     // [num_classes] box-max class probabilities
  Tensor student_cls;
  Tensor teacher_reg;     // [6] regression vector at the box center cell
  Tensor student_reg;
};

// Teacher-origin pairs first (1..M), then student-origin (M+1..M+N); no
// deduplication of overlapping boxes. Teacher-side tensors come from
// teacher_out and must be off-tape; student-side tensors stay differentiable.
std::vector<RegionPair> pair_regions(const std::vector<Proposal>& teacher_props,
                                     const std::vector<Proposal>& student_props,
                                     const DetOutput& teacher_out,
                                     const DetOutput& student_out,
                                     AdapterParams& psi,
                                     const PairingSettings& settings,
                                     bool training);

}  // namespace rdd
