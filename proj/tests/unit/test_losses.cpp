#include <doctest.h>

#include <cmath>
#include <vector>

#include "../oracles.hpp"
#include "rdd/losses.hpp"
#include "rdd/rng.hpp"

using namespace rdd;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor t(shape);
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<RegionPair> random_pairs(int n, Rng& rng, Tape* tape) {
  std::vector<RegionPair> pairs(n);
  for (auto& p : pairs) {
    Tensor s = random_tensor(Shape{3, 4, 4}, rng, -1.0, 1.0);
    p.student_patch = tape ? tape->variable(s) : s;
    p.teacher_patch = random_tensor(Shape{3, 4, 4}, rng, -1.0, 1.0);
    Tensor sc = random_tensor(Shape{2}, rng, 0.0, 1.0);
    p.student_cls = tape ? tape->variable(sc) : sc;
    p.teacher_cls = random_tensor(Shape{2}, rng, 0.0, 1.0);
    Tensor sr = random_tensor(Shape{6}, rng, -1.0, 1.0);
    p.student_reg = tape ? tape->variable(sr) : sr;
    p.teacher_reg = random_tensor(Shape{6}, rng, -1.0, 1.0);
  }
  return pairs;
}

Mask all_ones(std::size_t n) {
  Mask m;
  m.m.assign(n, 1);
  return m;
}

double feature_oracle(const std::vector<RegionPair>& pairs, const Mask& mask,
                      bool squared) {
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!mask.m[i]) continue;
    double ss = 0.0;
    for (std::size_t e = 0; e < pairs[i].student_patch.size(); ++e) {
      const double d = pairs[i].student_patch.data()[e] - pairs[i].teacher_patch.data()[e];
      ss += d * d;
    }
    total += squared ? ss : std::sqrt(ss);
  }
  return total / static_cast<double>(pairs.size());
}

double logit_oracle(const std::vector<RegionPair>& pairs, const Mask& mask,
                    bool anchor_style) {
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!mask.m[i]) continue;
    for (std::size_t e = 0; e < pairs[i].student_cls.size(); ++e)
      total += std::fabs(pairs[i].student_cls.data()[e] - pairs[i].teacher_cls.data()[e]);
    if (anchor_style)
      for (std::size_t e = 0; e < 6; ++e)
        total += std::fabs(pairs[i].student_reg.data()[e] - pairs[i].teacher_reg.data()[e]);
  }
  return total / static_cast<double>(pairs.size());
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("distillation config validates and round-trips through text") {
  DistillConfig cfg;
  cfg.validate();

  DistillConfig bad;
  bad.tau = 0.0;
  bad.lambda = -1.0;
  bad.roi_r = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  cfg.kappa = 137.5;
  cfg.anchor_style_logits = true;
  cfg.min_score = 0.25;
  KvMap kv = cfg.to_kv("distill.");
  KvReader reader(kv);
  DistillConfig back = DistillConfig::from_kv(reader, "distill.");
  reader.finish(true);
  CHECK(back.kappa == cfg.kappa);
  CHECK(back.anchor_style_logits == cfg.anchor_style_logits);
  CHECK(back.min_score == cfg.min_score);
  CHECK(back.tau == cfg.tau);

  PairingSettings ps = cfg.pairing();
  CHECK(ps.roi_r == cfg.roi_r);
  CHECK(ps.tau == cfg.tau);
}

TEST_CASE("feature loss vanishes under a zero mask or identical patches") {
  Rng rng(42);
  auto pairs = random_pairs(4, rng, nullptr);
  Mask zero;
  zero.m.assign(4, 0);
  CHECK(feature_loss(pairs, zero).value() == 0.0);

  for (auto& p : pairs) p.teacher_patch = p.student_patch.detach();
  CHECK(feature_loss(pairs, all_ones(4)).value() == 0.0);

  CHECK(feature_loss({}, Mask{}).value() == 0.0);
  CHECK_THROWS_AS(feature_loss(pairs, zero = all_ones(3)), ContractError);
}

TEST_CASE("feature loss matches the scalar-loop oracle") {
  Rng rng(1001);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.uniform_int(1, 6);
    auto pairs = random_pairs(n, rng, nullptr);
    Mask mask;
    mask.m.resize(n);
    for (auto& v : mask.m) v = rng.uniform_int(0, 1);
    const bool squared = trial % 2 == 0;
    const double got = feature_loss(pairs, mask, squared).value();
    const double want = feature_oracle(pairs, mask, squared);
    CHECK(got == doctest::Approx(want).epsilon(1e-10));
    CHECK(got >= 0.0);
  }
}

TEST_CASE("logit loss matches the scalar-loop oracle") {
  Rng rng(1002);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.uniform_int(1, 6);
    auto pairs = random_pairs(n, rng, nullptr);
    Mask mask;
    mask.m.resize(n);
    for (auto& v : mask.m) v = rng.uniform_int(0, 1);
    const bool anchor = trial % 2 == 0;
    const double got = logit_loss(pairs, mask, anchor).value();
    const double want = logit_oracle(pairs, mask, anchor);
    CHECK(got == doctest::Approx(want).epsilon(1e-10));
    CHECK(got >= 0.0);
  }
}

TEST_CASE("logit loss ignores regression unless anchor-style") {
  Rng rng(9);
  auto pairs = random_pairs(3, rng, nullptr);
  const double base = logit_loss(pairs, all_ones(3), false).value();
  for (auto& p : pairs)
    p.student_reg = random_tensor(Shape{6}, rng, -5.0, 5.0);
  CHECK(logit_loss(pairs, all_ones(3), false).value() == base);
  CHECK(logit_loss(pairs, all_ones(3), true).value() > base);

  for (auto& p : pairs) {
    p.student_cls = p.teacher_cls.detach();
    p.student_reg = p.teacher_reg.detach();
  }
  CHECK(logit_loss(pairs, all_ones(3), true).value() == 0.0);
}

TEST_CASE("a deselected duplicate changes only the renormalization") {
  Rng rng(77);
  auto pairs = random_pairs(3, rng, nullptr);
  Mask mask = all_ones(3);
  const double feat = feature_loss(pairs, mask).value();
  const double logit = logit_loss(pairs, mask, true).value();

  auto extended = pairs;
  extended.push_back(pairs[1]);
  Mask mask4 = mask;
  mask4.m.push_back(0);
  CHECK(feature_loss(extended, mask4).value() ==
        doctest::Approx(feat * 3.0 / 4.0).epsilon(1e-12));
  CHECK(logit_loss(extended, mask4, true).value() ==
        doctest::Approx(logit * 3.0 / 4.0).epsilon(1e-12));
}

TEST_CASE("total loss is the exact weighted sum") {
  DistillConfig cfg;  // gamma 0.25, alpha1 0.2, alpha2 0.2
  CHECK(total_loss(scalar_tensor(1.0), scalar_tensor(2.0), scalar_tensor(3.0),
                   scalar_tensor(4.0), cfg)
            .value() == doctest::Approx(2.9).epsilon(1e-15));
  CHECK(total_loss(scalar_tensor(0.0), scalar_tensor(0.0), scalar_tensor(0.0),
                   scalar_tensor(0.0), cfg)
            .value() == 0.0);

  DistillConfig plain = cfg;
  plain.alpha1 = plain.alpha2 = 0.0;
  CHECK(total_loss(scalar_tensor(1.5), scalar_tensor(2.0), scalar_tensor(30.0),
                   scalar_tensor(40.0), plain)
            .value() == doctest::Approx(2.0).epsilon(1e-15));

  CHECK_THROWS_AS(total_loss(Tensor(Shape{2}), scalar_tensor(0.0), scalar_tensor(0.0),
                             scalar_tensor(0.0), cfg),
                  ConfigError);
}

TEST_CASE("gradients reach the student side only") {
  Rng rng(314);
  Tape tape;
  auto pairs = random_pairs(3, rng, &tape);
  Mask mask = all_ones(3);
  mask.m[1] = 0;

  DistillConfig cfg;
  Tensor l_feat = feature_loss(pairs, mask);
  Tensor l_logit = logit_loss(pairs, mask, true);
  Tensor total = total_loss(scalar_tensor(0.0), scalar_tensor(0.0), l_feat, l_logit, cfg);
  CHECK(total.value() > 0.0);
  tape.backward(total);

  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK_FALSE(pairs[i].teacher_patch.has_grad());
    CHECK_FALSE(pairs[i].teacher_cls.has_grad());
    double mag = 0.0;
    if (pairs[i].student_patch.has_grad())
      for (double g : pairs[i].student_patch.grad()) mag += std::fabs(g);
    if (pairs[i].student_cls.has_grad())
      for (double g : pairs[i].student_cls.grad()) mag += std::fabs(g);
    if (mask.m[i])
      CHECK(mag > 0.0);
    else
      CHECK(mag == 0.0);  // deselected pairs never enter the graph
  }
}

TEST_CASE("feature loss gradient matches finite differences") {
  Rng rng(2718);
  Tensor s_init = random_tensor(Shape{3, 4, 4}, rng, -1.0, 1.0);
  Tensor teacher = random_tensor(Shape{3, 4, 4}, rng, -1.0, 1.0);

  for (bool squared : {false, true}) {
    CAPTURE(squared);
    auto loss_of = [&](const std::vector<double>& flat) {
      RegionPair p;
      p.student_patch = Tensor(Shape{3, 4, 4}, flat);
      p.teacher_patch = teacher;
      return feature_loss({p}, all_ones(1), squared).value();
    };
    Tape tape;
    RegionPair p;
    p.student_patch = tape.variable(s_init);
    p.teacher_patch = teacher;
    tape.backward(feature_loss({p}, all_ones(1), squared));
    auto fd = oracle::fd_gradient(loss_of, s_init.vec());
    auto check = oracle::compare_gradients(p.student_patch.grad(), fd);
    CHECK_MESSAGE(check.ok, check.describe());
  }
}

}  // TEST_SUITE
