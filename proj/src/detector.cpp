#include "rdd/detector.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "rdd/rng.hpp"
#include "rdd/serialize.hpp"

namespace rdd {

int DetectorConfig::scaled(int base, double mult) {
  return std::max(1, static_cast<int>(std::lround(base * mult)));
}

DetectorConfig DetectorConfig::preset(const std::string& name) {
  DetectorConfig cfg;
  cfg.apply_preset(name);
  return cfg;
}

void DetectorConfig::apply_preset(const std::string& name) {
  if (name == "teacher") {
    enc_mult = 1.0;
    neck_mult = 1.0;
    head_mult = 1.0;
  } else if (name == "s") {
    enc_mult = 0.75;
    neck_mult = 0.5;
    head_mult = 0.5;
  } else if (name == "xxs") {
    enc_mult = 0.5;
    neck_mult = 0.25;
    head_mult = 0.25;
  } else {
    throw ConfigError("unknown detector preset \"" + name +
                      "\" (expected teacher, s, or xxs)");
  }
}

void DetectorConfig::validate() const {
  std::ostringstream problems;
  auto bad = [&](const std::string& msg) { problems << "  detector: " << msg << "\n"; };
  if (in_channels < 1) bad("in_channels must be positive");
  if (num_classes < 1) bad("num_classes must be positive");
  if (base_enc1 < 1 || base_enc2 < 1 || base_enc3 < 1 || base_neck < 1 || base_head < 1)
    bad("all base channel counts must be positive");
  if (enc_mult <= 0 || neck_mult <= 0 || head_mult <= 0)
    bad("width multipliers must be positive");
  if (out_stride != 2) bad("out_stride is fixed at 2 by the architecture");
  const std::string all = problems.str();
  if (!all.empty()) throw ConfigError("invalid detector configuration:\n" + all);
}

KvMap DetectorConfig::to_kv(const std::string& prefix) const {
  KvMap kv;
  auto put = [&](const std::string& k, const std::string& v) { kv[prefix + k] = v; };
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  put("in_channels", std::to_string(in_channels));
  put("num_classes", std::to_string(num_classes));
  put("base_enc1", std::to_string(base_enc1));
  put("base_enc2", std::to_string(base_enc2));
  put("base_enc3", std::to_string(base_enc3));
  put("base_neck", std::to_string(base_neck));
  put("base_head", std::to_string(base_head));
  put("enc_mult", num(enc_mult));
  put("neck_mult", num(neck_mult));
  put("head_mult", num(head_mult));
  put("out_stride", std::to_string(out_stride));
  return kv;
}

DetectorConfig DetectorConfig::from_kv(KvReader& reader, const std::string& prefix) {
  DetectorConfig cfg;
  const std::string preset = reader.get_string(prefix + "preset", "");
  if (!preset.empty()) cfg.apply_preset(preset);
  cfg.in_channels = reader.get_int(prefix + "in_channels", cfg.in_channels);
  cfg.num_classes = reader.get_int(prefix + "num_classes", cfg.num_classes);
  cfg.base_enc1 = reader.get_int(prefix + "base_enc1", cfg.base_enc1);
  cfg.base_enc2 = reader.get_int(prefix + "base_enc2", cfg.base_enc2);
  cfg.base_enc3 = reader.get_int(prefix + "base_enc3", cfg.base_enc3);
  cfg.base_neck = reader.get_int(prefix + "base_neck", cfg.base_neck);
  cfg.base_head = reader.get_int(prefix + "base_head", cfg.base_head);
  cfg.enc_mult = reader.get_double(prefix + "enc_mult", cfg.enc_mult);
  cfg.neck_mult = reader.get_double(prefix + "neck_mult", cfg.neck_mult);
  cfg.head_mult = reader.get_double(prefix + "head_mult", cfg.head_mult);
  cfg.out_stride = reader.get_int(prefix + "out_stride", cfg.out_stride);
  return cfg;
}

std::uint64_t DetectorConfig::digest() const {
  return fnv1a64(canonical_kv_text(to_kv("detector.")));
}

Tensor& DetectorParams::find(const std::string& name) {
  for (auto& [n, t] : tensors)
    if (n == name) return t;
  throw UsageError("no parameter named \"" + name + "\"");
}

const Tensor& DetectorParams::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw UsageError("no parameter named \"" + name + "\"");
}

DetectorParams DetectorParams::to_tape(Tape& tape) const {
  DetectorParams out;
  out.config = config;
  out.tensors.reserve(tensors.size());
  for (const auto& [n, t] : tensors) out.tensors.emplace_back(n, tape.variable(t));
  return out;
}

DetectorParams DetectorParams::detached() const {
  DetectorParams out;
  out.config = config;
  out.tensors.reserve(tensors.size());
  for (const auto& [n, t] : tensors) out.tensors.emplace_back(n, t.detach());
  return out;
}

namespace {

// He-style normal init for a conv kernel [K, C, kh, kw].
Tensor conv_init(const Shape& shape, Rng& rng) {
  const double fan_in = static_cast<double>(shape[1]) * shape[2] * shape[3];
  return randn(shape, rng, std::sqrt(2.0 / fan_in));
}

}  // namespace

DetectorParams init_detector(const DetectorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0xde7ec7));
  DetectorParams p;
  p.config = cfg;
  auto add_conv = [&](const std::string& name, int out_c, int in_c, int k) {
    p.tensors.emplace_back(name + ".k", conv_init(Shape{out_c, in_c, k, k}, rng));
    p.tensors.emplace_back(name + ".b", zeros(Shape{out_c}));
  };
  add_conv("enc1", cfg.enc1(), cfg.in_channels, 3);
  add_conv("enc2", cfg.enc2(), cfg.enc1(), 3);
  add_conv("enc3", cfg.enc3(), cfg.enc2(), 3);
  add_conv("neck.lat2", cfg.neck(), cfg.enc2(), 1);
  add_conv("neck.lat3", cfg.neck(), cfg.enc3(), 1);
  add_conv("neck.fuse", cfg.neck(), cfg.neck(), 3);
  add_conv("head.cls1", cfg.head(), cfg.neck(), 3);
  add_conv("head.cls2", cfg.num_classes, cfg.head(), 1);
  add_conv("head.reg1", cfg.head(), cfg.neck(), 3);
  add_conv("head.reg2", 6, cfg.head(), 1);
  // bias the class head toward "background" (prior 0.01) so the initial focal
  // loss stays small; without it the first steps can blow out the relu units
  // feeding the sparse-gradient regression branch
  Tensor& cls_bias = p.find("head.cls2.b");
  for (std::size_t i = 0; i < cls_bias.size(); ++i) cls_bias.data()[i] = -std::log(99.0);
  // start the regression hidden units active: they only receive gradient at
  // ground-truth peaks, so units knocked negative early never recover
  Tensor& reg_bias = p.find("head.reg1.b");
  for (std::size_t i = 0; i < reg_bias.size(); ++i) reg_bias.data()[i] = 0.2;
  return p;
}

DetOutput detector_forward(const DetectorParams& params, const Tensor& bev) {
  const DetectorConfig& cfg = params.config;
  if (bev.rank() != 3 || bev.dim(0) != cfg.in_channels)
    throw ConfigError("detector expects [" + std::to_string(cfg.in_channels) +
                      ",H,W] input, got " + shape_str(bev.shape()));
  const int H = bev.dim(1), W = bev.dim(2);
  if (H % 4 != 0 || W % 4 != 0)
    throw ConfigError("grid dimensions must be divisible by 4, got " +
                      shape_str(bev.shape()));

  auto conv = [&](const Tensor& x, const std::string& name, int stride, int padding) {
    return add_channel_bias(
        conv2d(x, params.find(name + ".k"), stride, padding), params.find(name + ".b"));
  };

  Tensor x = reshape(bev, Shape{1, cfg.in_channels, H, W});
  Tensor e1 = relu(conv(x, "enc1", 1, 1));        // [1, C1, H,   W]
  Tensor e2 = relu(conv(e1, "enc2", 2, 1));       // [1, C2, H/2, W/2]
  Tensor e3 = relu(conv(e2, "enc3", 2, 1));       // [1, C3, H/4, W/4]
  Tensor lat2 = conv(e2, "neck.lat2", 1, 0);
  Tensor lat3 = upsample_nearest2(conv(e3, "neck.lat3", 1, 0));
  // no rectifier on the fused map: the distillation path wants signed features
  Tensor neck = conv(add(lat2, lat3), "neck.fuse", 1, 1);  // [1, Cn, H/2, W/2]

  Tensor cls_logits = conv(relu(conv(neck, "head.cls1", 1, 1)), "head.cls2", 1, 0);
  Tensor reg_map = conv(relu(conv(neck, "head.reg1", 1, 1)), "head.reg2", 1, 0);

  DetOutput out;
  out.neck_feature = select_image(neck, 0);
  out.cls_logits = select_image(cls_logits, 0);
  out.cls_heatmap = sigmoid(out.cls_logits);
  out.reg_map = select_image(reg_map, 0);
  return out;
}

GtTargets build_targets(const Scene& scene, const DetectorConfig& cfg) {
  const int H = scene.bev.dim(1) / cfg.out_stride;
  const int W = scene.bev.dim(2) / cfg.out_stride;
  GtTargets t;
  t.scaled_objects = scale_objects(scene.objects, 1.0 / cfg.out_stride);
  t.heatmap = render_gt_heatmap(t.scaled_objects, cfg.num_classes, H, W);
  return t;
}

DetLosses detection_loss(const DetOutput& out, const Scene& scene,
                         const DetectorConfig& cfg) {
  GtTargets targets = build_targets(scene, cfg);
  const Tensor& g = targets.heatmap;
  if (g.shape() != out.cls_heatmap.shape())
    throw ConfigError("heatmap shape " + shape_str(out.cls_heatmap.shape()) +
                      " does not match target " + shape_str(g.shape()));

  // Focal heatmap loss. Per cell, with p = sigmoid(z) and target g:
  //   weight = (1-p)^2 where g == 1, (1-g)^4 p^2 elsewhere
  //   divergence = g log(g/p) + (1-g) log((1-g)/(1-p))
  // which reduces to the usual focal terms at g in {0,1} and vanishes exactly
  // when p == g. Normalized by the number of peak cells.
  const std::size_t n = g.size();
  std::vector<double> is_pos(n), neg_w(n), g_const(n);
  int n_peaks = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double gv = g.data()[i];
    if (gv == 1.0) {
      is_pos[i] = 1.0;
      ++n_peaks;
    }
    const double one_m = 1.0 - gv;
    neg_w[i] = one_m * one_m * one_m * one_m;
    double c = 0.0;
    if (gv > 0.0 && gv < 1.0) c = gv * std::log(gv) + one_m * std::log(one_m);
    g_const[i] = c;
  }
  Tensor G(g.shape(), g.vec());
  Tensor pos_mask(g.shape(), std::move(is_pos));
  Tensor neg_weight(g.shape(), std::move(neg_w));
  Tensor entropy_const(g.shape(), std::move(g_const));
  Tensor one_minus_G = add_scalar(neg(G), 1.0);

  const Tensor& z = out.cls_logits;
  Tensor p = sigmoid(z);
  // relu guards against -1e-17 rounding when p == g; the true value is >= 0
  Tensor divergence = relu(add(add(entropy_const, mul(G, softplus(neg(z)))),
                               mul(one_minus_G, softplus(z))));
  Tensor one_minus_p = add_scalar(neg(p), 1.0);
  Tensor weight = add(mul(pos_mask, mul(one_minus_p, one_minus_p)),
                      mul(add_scalar(neg(pos_mask), 1.0),
                          mul(neg_weight, mul(p, p))));
  DetLosses losses;
  losses.cls = scale(sum(mul(weight, divergence)),
                     1.0 / std::max(1, n_peaks));

  // L1 regression at ground-truth center cells, averaged over objects.
  const int H = g.dim(1), W = g.dim(2);
  Tensor reg_total = scalar_tensor(0.0);
  int n_obj = 0;
  for (const ObjectGT& o : targets.scaled_objects) {
    const int cx = std::clamp(static_cast<int>(std::lround(o.cx)), 0, W - 1);
    const int cy = std::clamp(static_cast<int>(std::lround(o.cy)), 0, H - 1);
    const std::vector<double> want = {o.cx - cx,
                                      o.cy - cy,
                                      std::log(static_cast<double>(o.w)),
                                      std::log(static_cast<double>(o.l)),
                                      std::sin(static_cast<double>(o.heading)),
                                      std::cos(static_cast<double>(o.heading))};
    Tensor pred = bilinear_sample(out.reg_map, cx, cy);
    reg_total = add(reg_total, l1_norm(sub(pred, Tensor(Shape{6}, want))));
    ++n_obj;
  }
  losses.reg = n_obj ? scale(reg_total, 1.0 / n_obj) : scalar_tensor(0.0);
  return losses;
}

void save_checkpoint(const std::string& path, const DetectorParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_magic(os, "RDDC");
  const std::string cfg_text = canonical_kv_text(params.config.to_kv("detector."));
  write_u64(os, fnv1a64(cfg_text));
  write_u32(os, static_cast<std::uint32_t>(cfg_text.size()));
  os.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
  write_u32(os, static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& [name, tensor] : params.tensors) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor_record(os, tensor);
  }
  if (!os) throw IoError("failed writing " + path);
}

DetectorParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  expect_magic(is, "RDDC", "checkpoint " + path);
  const std::uint64_t digest = read_u64(is);
  const std::uint32_t cfg_len = read_u32(is);
  std::string cfg_text(cfg_len, '\0');
  is.read(cfg_text.data(), cfg_len);
  if (is.gcount() != static_cast<std::streamsize>(cfg_len))
    throw IoError("truncated checkpoint " + path);
  if (fnv1a64(cfg_text) != digest)
    throw IoError("checkpoint config digest mismatch in " + path);
  const KvMap kv = parse_kv_text(cfg_text);
  KvReader reader(kv);
  DetectorParams params;
  params.config = DetectorConfig::from_kv(reader, "detector.");
  reader.finish(true);
  const std::uint32_t count = read_u32(is);
  params.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (is.gcount() != static_cast<std::streamsize>(name_len))
      throw IoError("truncated checkpoint " + path);
    params.tensors.emplace_back(std::move(name), read_tensor_record(is));
  }
  return params;
}

}  // namespace rdd
