// Toy center-based BEV detector with a configurable width multiplier.
//
// Encoder (3 conv stages, strides 1/2/2) -> two-scale neck (lateral 1x1 +
// nearest upsample + 3x3 fuse) -> sigmoid class-heatmap head and a 6-channel
// regression head (dx, dy, log w, log l, sin heading, cos heading), all at
// 1/out_stride of the input grid.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rdd/config.hpp"
#include "rdd/scene.hpp"
#include "rdd/tensor.hpp"

namespace rdd {

struct DetectorConfig {
  int in_channels = 3;
  int num_classes = 3;
  int base_enc1 = 16;
  int base_enc2 = 24;
  int base_enc3 = 32;
  int base_neck = 24;
  int base_head = 24;
  double enc_mult = 1.0;
  double neck_mult = 1.0;
  double head_mult = 1.0;
  int out_stride = 2;  // fixed by the two stride-2 stages + one upsample

  int enc1() const { return scaled(base_enc1, enc_mult); }
  int enc2() const { return scaled(base_enc2, enc_mult); }
  int enc3() const { return scaled(base_enc3, enc_mult); }
  int neck() const { return scaled(base_neck, neck_mult); }
  int head() const { return scaled(base_head, head_mult); }

  // "teacher" keeps full width; "s" halves neck/head; "xxs" quarters them.
  static DetectorConfig preset(const std::string& name);
  void apply_preset(const std::string& name);

  void validate() const;
  KvMap to_kv(const std::string& prefix) const;
  static DetectorConfig from_kv(KvReader& reader, const std::string& prefix);
  std::uint64_t digest() const;

 private:
  static int scaled(int base, double mult);
};

struct DetectorParams {
  DetectorConfig config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  Tensor& find(const std::string& name);
  const Tensor& find(const std::string& name) const;
  // Same names, fresh tape variables initialized from the current values.
  DetectorParams to_tape(Tape& tape) const;
  DetectorParams detached() const;
};

struct DetOutput {
  Tensor neck_feature;  // [C_neck, H', W']
  Tensor cls_logits;    // [num_classes, H', W']
  Tensor cls_heatmap;   // sigmoid(cls_logits)
  Tensor reg_map;       // [6, H', W']
};

DetectorParams init_detector(const DetectorConfig& cfg, std::uint64_t seed);

DetOutput detector_forward(const DetectorParams& params, const Tensor& bev);

// Supervision rendered on the strided output grid.
struct GtTargets {
  Tensor heatmap;                       // [num_classes, H', W']
  std::vector<ObjectGT> scaled_objects; // centers/sizes divided by out_stride
};

GtTargets build_targets(const Scene& scene, const DetectorConfig& cfg);

struct DetLosses {
  Tensor cls;  // focal heatmap loss
  Tensor reg;  // L1 at ground-truth center cells
};

DetLosses detection_loss(const DetOutput& out, const Scene& scene,
                         const DetectorConfig& cfg);

void save_checkpoint(const std::string& path, const DetectorParams& params);
DetectorParams load_checkpoint(const std::string& path);

}  // namespace rdd
