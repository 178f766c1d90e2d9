#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "../oracles.hpp"
#include "rdd/detector.hpp"
#include "rdd/rng.hpp"
#include "rdd/serialize.hpp"

using namespace rdd;

namespace {

DetectorConfig tiny_config() {
  DetectorConfig cfg;
  cfg.base_enc1 = 4;
  cfg.base_enc2 = 6;
  cfg.base_enc3 = 8;
  cfg.base_neck = 6;
  cfg.base_head = 6;
  return cfg;
}

SceneConfig tiny_scene_config() {
  SceneConfig cfg;
  cfg.grid_h = 16;
  cfg.grid_w = 16;
  cfg.min_objects = 1;
  cfg.max_objects = 3;
  cfg.points_per_object = 30.0;
  cfg.clutter_density = 0.03;
  return cfg;
}

// Focal heatmap loss, written as plain per-cell loops.
double focal_oracle(const std::vector<double>& p, const std::vector<double>& g) {
  double total = 0.0;
  int peaks = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i], gi = g[i];
    double weight, div;
    if (gi == 1.0) {
      ++peaks;
      weight = (1.0 - pi) * (1.0 - pi);
      div = -std::log(pi);
    } else {
      weight = std::pow(1.0 - gi, 4.0) * pi * pi;
      div = -(1.0 - gi) * std::log(1.0 - pi);
      if (gi > 0.0) div += gi * std::log(gi / pi) + (1.0 - gi) * std::log(1.0 - gi);
    }
    total += weight * div;
  }
  return total / std::max(1, peaks);
}

std::uint64_t fnv_bytes(const Tensor& t) {
  std::string bytes;
  bytes.resize(t.size() * sizeof(double));
  std::memcpy(bytes.data(), t.data(), bytes.size());
  return fnv1a64(bytes);
}

DetOutput fake_output(const Tensor& logits, const Tensor& reg) {
  DetOutput out;
  out.cls_logits = logits;
  out.cls_heatmap = sigmoid(logits);
  out.reg_map = reg;
  out.neck_feature = Tensor(Shape{1, logits.dim(1), logits.dim(2)});
  return out;
}

}  // namespace

TEST_SUITE("detector") {

TEST_CASE("presets scale channel counts") {
  DetectorConfig t = DetectorConfig::preset("teacher");
  DetectorConfig s = DetectorConfig::preset("s");
  DetectorConfig xxs = DetectorConfig::preset("xxs");
  CHECK(t.neck() == 24);
  CHECK(s.enc1() == 12);
  CHECK(s.neck() == 12);
  CHECK(xxs.neck() == 6);
  CHECK(xxs.head() == 6);
  // halving the neck multiplier halves the neck width
  DetectorConfig half = t;
  half.neck_mult = 0.5;
  CHECK(t.neck() == 2 * half.neck());
  CHECK_THROWS_AS(DetectorConfig::preset("tiny"), ConfigError);

  DetectorConfig bad;
  bad.num_classes = 0;
  bad.enc_mult = -1;
  try {
    bad.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("num_classes") != std::string::npos);
    CHECK(std::string(e.what()).find("multipliers") != std::string::npos);
  }
}

TEST_CASE("config digest tracks field changes") {
  DetectorConfig a, b;
  CHECK(a.digest() == b.digest());
  b.neck_mult = 0.5;
  CHECK(a.digest() != b.digest());
}

TEST_CASE("initialization lays out the expected tensors") {
  DetectorConfig cfg = tiny_config();
  DetectorParams p = init_detector(cfg, 1);
  CHECK(p.find("enc1.k").shape() == Shape{4, 3, 3, 3});
  CHECK(p.find("neck.lat3.k").shape() == Shape{6, 8, 1, 1});
  CHECK(p.find("head.cls2.k").shape() == Shape{3, 6, 1, 1});
  CHECK(p.find("head.reg2.k").shape() == Shape{6, 6, 1, 1});
  for (std::size_t i = 0; i < p.find("head.cls2.b").size(); ++i)
    CHECK(p.find("head.cls2.b").data()[i] == doctest::Approx(-std::log(99.0)));
  CHECK_THROWS_AS(p.find("nope"), UsageError);
  // deterministic init
  DetectorParams q = init_detector(cfg, 1);
  CHECK(p.find("enc3.k").vec() == q.find("enc3.k").vec());
  DetectorParams r = init_detector(cfg, 2);
  CHECK(p.find("enc3.k").vec() != r.find("enc3.k").vec());
}

TEST_CASE("forward on an all-zero grid stays finite") {
  DetectorParams p = init_detector(tiny_config(), 3);
  DetOutput out = detector_forward(p, Tensor(Shape{3, 16, 16}));
  CHECK(out.neck_feature.shape() == Shape{6, 8, 8});
  CHECK(out.cls_heatmap.shape() == Shape{3, 8, 8});
  CHECK(out.reg_map.shape() == Shape{6, 8, 8});
  for (double v : out.neck_feature.vec()) CHECK(std::isfinite(v));
  for (double v : out.cls_heatmap.vec()) {
    CHECK(std::isfinite(v));
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  for (double v : out.reg_map.vec()) CHECK(std::isfinite(v));
}

TEST_CASE("forward rejects mismatched inputs") {
  DetectorParams p = init_detector(tiny_config(), 3);
  CHECK_THROWS_AS(detector_forward(p, Tensor(Shape{2, 16, 16})), ConfigError);
  CHECK_THROWS_AS(detector_forward(p, Tensor(Shape{3, 18, 18})), ConfigError);
}

TEST_CASE("forward is deterministic and matches the recorded golden hashes") {
  Scene scene = generate_scene(tiny_scene_config(), 7);
  DetectorParams p = init_detector(tiny_config(), 42);
  DetOutput a = detector_forward(p, scene.bev);
  DetOutput b = detector_forward(p, scene.bev);
  CHECK(a.neck_feature.vec() == b.neck_feature.vec());
  CHECK(a.cls_heatmap.vec() == b.cls_heatmap.vec());
  CHECK(a.reg_map.vec() == b.reg_map.vec());
  // recorded from the first verified build of this configuration; a mismatch
  // means the forward path changed numerically, which must be deliberate
  CHECK(fnv_bytes(a.neck_feature) == 12388556174198834152ull);
  CHECK(fnv_bytes(a.cls_logits) == 4413290344649708986ull);
  CHECK(fnv_bytes(a.reg_map) == 17730671510870502313ull);
}

TEST_CASE("on-tape forward reaches every parameter") {
  Scene scene = generate_scene(tiny_scene_config(), 9);
  DetectorParams init = init_detector(tiny_config(), 4);
  Tape tape;
  DetectorParams p = init.to_tape(tape);
  DetOutput out = detector_forward(p, scene.bev);
  DetLosses losses = detection_loss(out, scene, p.config);
  Tensor total = add(losses.cls, scale(losses.reg, 0.25));
  tape.backward(total);
  for (const auto& [name, t] : p.tensors) {
    REQUIRE_MESSAGE(t.has_grad(), name);
    double mag = 0.0;
    for (double gv : t.grad()) mag += std::fabs(gv);
    CHECK_MESSAGE(mag > 0.0, name, " received no gradient");
  }
}

TEST_CASE("detection loss basics") {
  SceneConfig scfg = tiny_scene_config();
  DetectorConfig dcfg = tiny_config();
  SUBCASE("perfect heatmap gives (near) zero focal loss") {
    Scene scene = generate_scene(scfg, 11);
    GtTargets t = build_targets(scene, dcfg);
    std::vector<double> z(t.heatmap.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double g = std::clamp(t.heatmap.data()[i], 1e-12, 1.0 - 1e-12);
      z[i] = std::log(g / (1.0 - g));
    }
    DetOutput out = fake_output(Tensor(t.heatmap.shape(), z), Tensor(Shape{6, 8, 8}));
    DetLosses losses = detection_loss(out, scene, dcfg);
    CHECK(losses.cls.value() >= 0.0);
    CHECK(losses.cls.value() <= 1e-9);
  }
  SUBCASE("any deviation from the target is penalized") {
    Scene scene = generate_scene(scfg, 11);
    GtTargets t = build_targets(scene, dcfg);
    std::vector<double> z(t.heatmap.size(), -2.0);
    DetOutput out = fake_output(Tensor(t.heatmap.shape(), z), Tensor(Shape{6, 8, 8}));
    CHECK(detection_loss(out, scene, dcfg).cls.value() > 1e-4);
  }
  SUBCASE("zero objects means zero regression loss") {
    SceneConfig empty = scfg;
    empty.min_objects = 0;
    empty.max_objects = 0;
    Scene scene = generate_scene(empty, 13);
    DetectorParams p = init_detector(dcfg, 5);
    DetLosses losses = detection_loss(detector_forward(p, scene.bev), scene, dcfg);
    CHECK(losses.reg.value() == 0.0);
    CHECK(losses.cls.value() > 0.0);
  }
}

TEST_CASE("focal loss matches the per-cell oracle") {
  SceneConfig scfg = tiny_scene_config();
  DetectorConfig dcfg = tiny_config();
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    Scene scene = generate_scene(scfg, 100 + trial);
    Tensor z = randn(Shape{3, 8, 8}, rng, 2.0);
    DetOutput out = fake_output(z, randn(Shape{6, 8, 8}, rng));
    DetLosses losses = detection_loss(out, scene, dcfg);
    GtTargets t = build_targets(scene, dcfg);
    const double want = focal_oracle(out.cls_heatmap.vec(), t.heatmap.vec());
    CHECK(losses.cls.value() == doctest::Approx(want).epsilon(1e-10));
    CHECK(losses.cls.value() >= 0.0);
  }
}

TEST_CASE("regression loss matches a direct loop") {
  SceneConfig scfg = tiny_scene_config();
  DetectorConfig dcfg = tiny_config();
  Scene scene = generate_scene(scfg, 21);
  REQUIRE_FALSE(scene.objects.empty());
  Rng rng(23);
  Tensor reg = randn(Shape{6, 8, 8}, rng);
  DetOutput out = fake_output(randn(Shape{3, 8, 8}, rng), reg);
  DetLosses losses = detection_loss(out, scene, dcfg);
  double want = 0.0;
  for (const ObjectGT& o : scale_objects(scene.objects, 0.5)) {
    const int cx = static_cast<int>(std::lround(o.cx));
    const int cy = static_cast<int>(std::lround(o.cy));
    const double w = o.w, l = o.l, heading = o.heading;
    const double target[6] = {o.cx - cx, o.cy - cy, std::log(w), std::log(l),
                              std::sin(heading), std::cos(heading)};
    for (int c = 0; c < 6; ++c) want += std::fabs(reg.at({c, cy, cx}) - target[c]);
  }
  want /= static_cast<double>(scene.objects.size());
  CHECK(losses.reg.value() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("detection loss gradients match finite differences") {
  DetectorConfig dcfg;
  dcfg.base_enc1 = 2;
  dcfg.base_enc2 = 3;
  dcfg.base_enc3 = 4;
  dcfg.base_neck = 3;
  dcfg.base_head = 3;
  // hand-built scene on a tiny grid so each finite-difference probe is cheap
  Scene scene;
  scene.seed = 31;
  ObjectGT a;
  a.cx = 3.2f; a.cy = 4.1f; a.w = 1.6f; a.l = 2.8f; a.heading = 0.4f; a.class_id = 1;
  ObjectGT b;
  b.cx = 5.7f; b.cy = 1.9f; b.w = 1.2f; b.l = 1.4f; b.heading = -1.1f; b.class_id = 0;
  scene.objects = {a, b};
  Rng brng(61);
  scene.bev = rand_uniform(Shape{3, 8, 8}, brng, 0.0, 1.0);
  DetectorParams base = init_detector(dcfg, 8);

  auto loss_at = [&](const DetectorParams& p) {
    DetLosses l = detection_loss(detector_forward(p, scene.bev), scene, dcfg);
    return add(l.cls, scale(l.reg, 0.25));
  };

  Tape tape;
  DetectorParams live = base.to_tape(tape);
  tape.backward(loss_at(live));

  Rng pick(101);
  for (std::size_t ti = 0; ti < base.tensors.size(); ++ti) {
    Tensor& t = base.tensors[ti].second;
    const int probes = 3;
    for (int k = 0; k < probes; ++k) {
      const std::size_t ci = static_cast<std::size_t>(
          pick.uniform_int(0, static_cast<int>(t.size()) - 1));
      const double keep = t.data()[ci];
      const double h = 1e-5;
      t.data()[ci] = keep + h;
      const double up = loss_at(base).value();
      t.data()[ci] = keep - h;
      const double dn = loss_at(base).value();
      t.data()[ci] = keep;
      const double numeric = (up - dn) / (2 * h);
      const double analytic = live.tensors[ti].second.grad()[ci];
      const double err = std::fabs(analytic) < 1e-6
                             ? std::fabs(analytic - numeric)
                             : std::fabs(analytic - numeric) / std::fabs(analytic);
      CHECK_MESSAGE(err < 1e-4, base.tensors[ti].first, "[", ci, "]: analytic=",
                    analytic, " numeric=", numeric);
    }
  }
}

TEST_CASE("checkpoints round-trip to identical forwards") {
  const std::string path = "/tmp/rdd_test_ckpt.rddc";
  Scene scene = generate_scene(tiny_scene_config(), 41);
  DetectorParams p = init_detector(tiny_config(), 6);
  save_checkpoint(path, p);
  DetectorParams q = load_checkpoint(path);
  CHECK(q.config.digest() == p.config.digest());
  DetOutput a = detector_forward(p, scene.bev);
  DetOutput b = detector_forward(q, scene.bev);
  CHECK(a.cls_heatmap.vec() == b.cls_heatmap.vec());
  CHECK(a.reg_map.vec() == b.reg_map.vec());
  CHECK(a.neck_feature.vec() == b.neck_feature.vec());

  SUBCASE("corrupted config digest is rejected") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    bytes[5] ^= 0x7f;  // inside the stored digest
    std::ofstream(path, std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
  }
  SUBCASE("truncated checkpoint is rejected") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
  }
  std::remove(path.c_str());
}

TEST_CASE("build_targets renders on the strided grid") {
  SceneConfig scfg = tiny_scene_config();
  DetectorConfig dcfg = tiny_config();
  Scene scene = generate_scene(scfg, 51);
  GtTargets t = build_targets(scene, dcfg);
  CHECK(t.heatmap.shape() == Shape{3, 8, 8});
  REQUIRE(t.scaled_objects.size() == scene.objects.size());
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    CHECK(t.scaled_objects[i].cx == doctest::Approx(scene.objects[i].cx / 2.0f));
    CHECK(t.scaled_objects[i].w == doctest::Approx(scene.objects[i].w / 2.0f));
    // each object still peaks at exactly 1 on its class channel
    const auto& o = t.scaled_objects[i];
    CHECK(t.heatmap.at({static_cast<int>(o.class_id),
                        static_cast<int>(std::lround(o.cy)),
                        static_cast<int>(std::lround(o.cx))}) == 1.0);
  }
}

}  // TEST_SUITE
