#include "rdd/regions.hpp"

#include <algorithm>
#include <cmath>

#include "rdd/rng.hpp"

namespace rdd {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

}  // namespace

Box proposal_box(const Proposal& p, double margin) {
  Box box;
  box.cx = p.cx;
  box.cy = p.cy;
  box.w = std::max(p.w, 1.0) + 2 * margin;
  box.l = std::max(p.l, 1.0) + 2 * margin;
  return box;
}

std::vector<Proposal> extract_proposals(const DetOutput& out, int top_k,
                                        double min_score, Source source) {
  if (top_k < 1) throw ConfigError("top_k must be at least 1");
  const Tensor& heat = out.cls_heatmap;
  const int K = heat.dim(0), H = heat.dim(1), W = heat.dim(2);
  const double* hd = heat.data();
  const double* rd = out.reg_map.data();
  const std::size_t plane = static_cast<std::size_t>(H) * W;

  std::vector<Proposal> found;
  for (int c = 0; c < K; ++c) {
    const double* p = hd + static_cast<std::size_t>(c) * plane;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double v = p[static_cast<std::size_t>(y) * W + x];
        if (v < min_score) continue;
        bool is_max = true;
        for (int dy = -1; dy <= 1 && is_max; ++dy)
          for (int dx = -1; dx <= 1 && is_max; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
            if (p[static_cast<std::size_t>(ny) * W + nx] > v) is_max = false;
          }
        if (!is_max) continue;
        Proposal prop;
        prop.score = v;
        prop.class_id = c;
        prop.peak_x = x;
        prop.peak_y = y;
        prop.source = source;
        prop.p_cls.resize(K);
        for (int k = 0; k < K; ++k)
          prop.p_cls[k] = hd[static_cast<std::size_t>(k) * plane + y * W + x];
        prop.p_reg.resize(6);
        for (int k = 0; k < 6; ++k)
          prop.p_reg[k] = rd[static_cast<std::size_t>(k) * plane + y * W + x];
        prop.cx = std::clamp(x + prop.p_reg[0], 0.0, W - 1.0);
        prop.cy = std::clamp(y + prop.p_reg[1], 0.0, H - 1.0);
        const double max_extent = std::max(H, W);
        prop.w = std::clamp(std::exp(prop.p_reg[2]), 1.0, max_extent);
        prop.l = std::clamp(std::exp(prop.p_reg[3]), 1.0, max_extent);
        found.push_back(std::move(prop));
      }
  }
  std::sort(found.begin(), found.end(), [](const Proposal& a, const Proposal& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    if (a.peak_y != b.peak_y) return a.peak_y < b.peak_y;
    return a.peak_x < b.peak_x;
  });
  if (static_cast<int>(found.size()) > top_k) found.resize(top_k);
  return found;
}

Tensor roi_align(const Tensor& feature, const Box& box, int r) {
  if (feature.rank() != 3)
    throw ConfigError("roi_align expects [C,H,W], got " + shape_str(feature.shape()));
  if (r < 1) throw ConfigError("roi_align resolution must be at least 1");
  const int C = feature.dim(0), H = feature.dim(1), W = feature.dim(2);
  const double w = std::max(box.w, 1.0);
  const double l = std::max(box.l, 1.0);
  const double bw = w / r, bh = l / r;

  // Integer-anchor decomposition: frac(center) extraction is exact, so the
  // sampling fractions are bit-identical under integer box translations.
  const double flx = std::floor(box.cx), fly = std::floor(box.cy);
  const long long icx = static_cast<long long>(flx);
  const long long icy = static_cast<long long>(fly);
  const double fcx = box.cx - flx, fcy = box.cy - fly;
  auto locate = [](long long anchor, double frac_center, double extent, double bin,
                   int k, int size) {
    const double rel = frac_center - extent / 2 + (k + 0.5) * bin;
    const double rf = std::floor(rel);
    long long cell = anchor + static_cast<long long>(rf);
    double fr = rel - rf;
    if (cell < 0) {
      cell = 0;
      fr = 0.0;
    } else if (cell >= size - 1) {
      cell = size - 1;
      fr = 0.0;
    }
    return std::pair<int, double>(static_cast<int>(cell), fr);
  };

  struct Corner {
    int x0, x1, y0, y1;
    double w00, w01, w10, w11;
  };
  std::vector<Corner> corners(static_cast<std::size_t>(r) * r);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < r; ++j) {
      const auto [cx0, ax] = locate(icx, fcx, w, bw, j, W);
      const auto [cy0, ay] = locate(icy, fcy, l, bh, i, H);
      Corner c;
      c.x0 = cx0;
      c.y0 = cy0;
      c.x1 = std::min(cx0 + 1, W - 1);
      c.y1 = std::min(cy0 + 1, H - 1);
      c.w00 = (1 - ay) * (1 - ax);
      c.w01 = (1 - ay) * ax;
      c.w10 = ay * (1 - ax);
      c.w11 = ay * ax;
      corners[static_cast<std::size_t>(i) * r + j] = c;
    }

  Tensor out(Shape{C, r, r});
  const double* fd = feature.data();
  double* od = out.data();
  for (int c = 0; c < C; ++c) {
    const double* p = fd + static_cast<std::size_t>(c) * H * W;
    double* o = od + static_cast<std::size_t>(c) * r * r;
    for (std::size_t b = 0; b < corners.size(); ++b) {
      const Corner& k = corners[b];
      o[b] = k.w00 * p[k.y0 * W + k.x0] + k.w01 * p[k.y0 * W + k.x1] +
             k.w10 * p[k.y1 * W + k.x0] + k.w11 * p[k.y1 * W + k.x1];
    }
  }

  Tape* tape = detail::op_tape({&feature});
  if (tape && feature.requires_grad()) {
    detail::mark_output(out, tape);
    NodePtr fn = feature.node(), on = out.node();
    tape->record({fn, on}, [fn, on, corners, C, H, W, r] {
      for (int c = 0; c < C; ++c) {
        double* gp = fn->grad.data() + static_cast<std::size_t>(c) * H * W;
        const double* go = on->grad.data() + static_cast<std::size_t>(c) * r * r;
        for (std::size_t b = 0; b < corners.size(); ++b) {
          const Corner& k = corners[b];
          const double g = go[b];
          gp[k.y0 * W + k.x0] += k.w00 * g;
          gp[k.y0 * W + k.x1] += k.w01 * g;
          gp[k.y1 * W + k.x0] += k.w10 * g;
          gp[k.y1 * W + k.x1] += k.w11 * g;
        }
      }
    });
  }
  return out;
}

Tensor region_max_pool(const Tensor& map, const Box& box) {
  if (map.rank() != 3)
    throw ConfigError("region_max_pool expects [C,H,W], got " + shape_str(map.shape()));
  const int C = map.dim(0), H = map.dim(1), W = map.dim(2);
  int xa = static_cast<int>(std::ceil(box.cx - box.w / 2));
  int xb = static_cast<int>(std::floor(box.cx + box.w / 2));
  int ya = static_cast<int>(std::ceil(box.cy - box.l / 2));
  int yb = static_cast<int>(std::floor(box.cy + box.l / 2));
  xa = std::clamp(xa, 0, W - 1);
  xb = std::clamp(xb, 0, W - 1);
  ya = std::clamp(ya, 0, H - 1);
  yb = std::clamp(yb, 0, H - 1);
  if (xb < xa) xa = xb = std::clamp(static_cast<int>(std::lround(box.cx)), 0, W - 1);
  if (yb < ya) ya = yb = std::clamp(static_cast<int>(std::lround(box.cy)), 0, H - 1);

  Tensor out(Shape{C});
  std::vector<std::size_t> argmax(C);
  const double* md = map.data();
  for (int c = 0; c < C; ++c) {
    const double* p = md + static_cast<std::size_t>(c) * H * W;
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_i = 0;
    for (int y = ya; y <= yb; ++y)
      for (int x = xa; x <= xb; ++x) {
        const std::size_t idx = static_cast<std::size_t>(y) * W + x;
        if (p[idx] > best) {
          best = p[idx];
          best_i = idx;
        }
      }
    out.data()[c] = best;
    argmax[c] = best_i;
  }

  Tape* tape = detail::op_tape({&map});
  if (tape && map.requires_grad()) {
    detail::mark_output(out, tape);
    NodePtr mn = map.node(), on = out.node();
    tape->record({mn, on}, [mn, on, argmax, H, W] {
      for (std::size_t c = 0; c < argmax.size(); ++c)
        mn->grad[c * static_cast<std::size_t>(H) * W + argmax[c]] += on->grad[c];
    });
  }
  return out;
}

Tensor normalize_channels(const Tensor& patch, double tau, bool spatial) {
  if (tau <= 0) throw ConfigError("softmax temperature must be positive");
  if (patch.rank() != 3 && patch.rank() != 4)
    throw ConfigError("normalize_channels expects [C,h,w] or [P,C,h,w], got " +
                      shape_str(patch.shape()));
  const bool batched = patch.rank() == 4;
  const int P = batched ? patch.dim(0) : 1;
  const int C = patch.dim(batched ? 1 : 0);
  const int h = patch.dim(batched ? 2 : 1);
  const int w = patch.dim(batched ? 3 : 2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  Tensor out(patch.shape());
  const double* xd = patch.data();
  double* yd = out.data();
  // softmax groups: channel vectors per location, or locations per channel
  // (value capture: the backward closure outlives this frame)
  auto for_each_group = [P, C, plane, spatial](auto&& fn) {
    for (int p = 0; p < P; ++p) {
      const std::size_t base = static_cast<std::size_t>(p) * C * plane;
      if (!spatial) {
        for (std::size_t s = 0; s < plane; ++s) {
          // elements base + c*plane + s, c = 0..C-1
          fn(base + s, plane, C);
        }
      } else {
        for (int c = 0; c < C; ++c) {
          // elements base + c*plane + s, s = 0..plane-1
          fn(base + static_cast<std::size_t>(c) * plane, 1, static_cast<int>(plane));
        }
      }
    }
  };
  for_each_group([&](std::size_t start, std::size_t stride, int n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < n; ++k) mx = std::max(mx, xd[start + k * stride]);
    double z = 0.0;
    for (int k = 0; k < n; ++k) {
      const double e = std::exp((xd[start + k * stride] - mx) / tau);
      yd[start + k * stride] = e;
      z += e;
    }
    for (int k = 0; k < n; ++k) yd[start + k * stride] /= z;
  });

  Tape* tape = detail::op_tape({&patch});
  if (tape && patch.requires_grad()) {
    detail::mark_output(out, tape);
    NodePtr xn = patch.node(), yn = out.node();
    tape->record({xn, yn}, [xn, yn, for_each_group, tau] {
      for_each_group([&](std::size_t start, std::size_t stride, int n) {
        double dot = 0.0;
        for (int k = 0; k < n; ++k)
          dot += yn->grad[start + k * stride] * yn->data[start + k * stride];
        for (int k = 0; k < n; ++k) {
          const std::size_t i = start + k * stride;
          xn->grad[i] += yn->data[i] / tau * (yn->grad[i] - dot);
        }
      });
    });
  }
  return out;
}

AdapterParams AdapterParams::to_tape(Tape& tape) const {
  AdapterParams out = *this;
  out.kernel = tape.variable(kernel);
  out.gamma = tape.variable(gamma);
  out.beta = tape.variable(beta);
  return out;  // running stats stay shared
}

AdapterParams init_adapter(int c_t, int c_s, std::uint64_t seed) {
  if (c_t < 1 || c_s < 1) throw ConfigError("adapter channel counts must be positive");
  Rng rng(mix_seed(seed, 0xada97e4));
  AdapterParams psi;
  psi.kernel = randn(Shape{c_t, c_s, 1, 1}, rng, std::sqrt(2.0 / c_s));
  psi.gamma = Tensor(Shape{c_t}, 1.0);
  psi.beta = zeros(Shape{c_t});
  psi.running_mean = std::make_shared<std::vector<double>>(c_t, 0.0);
  psi.running_var = std::make_shared<std::vector<double>>(c_t, 1.0);
  return psi;
}

namespace {

// Per-channel normalization over a [P,C,h,w] batch as one taped operation.
Tensor batch_norm_channels(const Tensor& x, AdapterParams& psi, bool training) {
  const int P = x.dim(0), C = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t per_channel = static_cast<std::size_t>(P) * plane;
  const double eps = psi.eps;

  std::vector<double> mean(C), inv_std(C);
  const double* xd = x.data();
  if (training) {
    for (int c = 0; c < C; ++c) {
      double m = 0.0;
      for (int p = 0; p < P; ++p) {
        const double* v = xd + (static_cast<std::size_t>(p) * C + c) * plane;
        for (std::size_t s = 0; s < plane; ++s) m += v[s];
      }
      m /= static_cast<double>(per_channel);
      double var = 0.0;
      for (int p = 0; p < P; ++p) {
        const double* v = xd + (static_cast<std::size_t>(p) * C + c) * plane;
        for (std::size_t s = 0; s < plane; ++s) var += (v[s] - m) * (v[s] - m);
      }
      var /= static_cast<double>(per_channel);
      mean[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      (*psi.running_mean)[c] = (1 - psi.momentum) * (*psi.running_mean)[c] + psi.momentum * m;
      (*psi.running_var)[c] = (1 - psi.momentum) * (*psi.running_var)[c] + psi.momentum * var;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = (*psi.running_mean)[c];
      inv_std[c] = 1.0 / std::sqrt((*psi.running_var)[c] + eps);
    }
  }

  Tensor out(x.shape());
  double* yd = out.data();
  const double* gd = psi.gamma.data();
  const double* bd = psi.beta.data();
  for (int p = 0; p < P; ++p)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(p) * C + c) * plane;
      for (std::size_t s = 0; s < plane; ++s)
        yd[off + s] = gd[c] * (xd[off + s] - mean[c]) * inv_std[c] + bd[c];
    }

  Tape* tape = detail::op_tape({&x, &psi.gamma, &psi.beta});
  if (tape && detail::op_requires_grad({&x, &psi.gamma, &psi.beta})) {
    detail::mark_output(out, tape);
    NodePtr xn = x.node(), gn = psi.gamma.node(), bn = psi.beta.node(), yn = out.node();
    tape->record({xn, gn, bn, yn}, [xn, gn, bn, yn, mean, inv_std, P, C, plane,
                                    per_channel, training] {
      for (int c = 0; c < C; ++c) {
        // x_hat, sums over the channel's elements
        double sum_g = 0.0, sum_gx = 0.0;
        for (int p = 0; p < P; ++p) {
          const std::size_t off = (static_cast<std::size_t>(p) * C + c) * plane;
          for (std::size_t s = 0; s < plane; ++s) {
            const double xh = (xn->data[off + s] - mean[c]) * inv_std[c];
            const double g = yn->grad[off + s];
            sum_g += g;
            sum_gx += g * xh;
          }
        }
        if (bn->requires_grad) bn->grad[c] += sum_g;
        if (gn->requires_grad) gn->grad[c] += sum_gx;
        if (!xn->requires_grad) continue;
        const double gamma = gn->data[c];
        if (training) {
          const double mg = sum_g / static_cast<double>(per_channel);
          const double mgx = sum_gx / static_cast<double>(per_channel);
          for (int p = 0; p < P; ++p) {
            const std::size_t off = (static_cast<std::size_t>(p) * C + c) * plane;
            for (std::size_t s = 0; s < plane; ++s) {
              const double xh = (xn->data[off + s] - mean[c]) * inv_std[c];
              xn->grad[off + s] +=
                  gamma * inv_std[c] * (yn->grad[off + s] - mg - xh * mgx);
            }
          }
        } else {
          for (int p = 0; p < P; ++p) {
            const std::size_t off = (static_cast<std::size_t>(p) * C + c) * plane;
            for (std::size_t s = 0; s < plane; ++s)
              xn->grad[off + s] += gamma * inv_std[c] * yn->grad[off + s];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor adapt_student(const Tensor& patches, AdapterParams& psi, bool training) {
  if (patches.rank() != 4)
    throw ConfigError("adapt_student expects [P,C_S,r,r], got " +
                      shape_str(patches.shape()));
  if (patches.dim(1) != psi.kernel.dim(1))
    throw ConfigError("adapter expects " + std::to_string(psi.kernel.dim(1)) +
                      " input channels, got " + std::to_string(patches.dim(1)));
  Tensor projected = conv2d(patches, psi.kernel, 1, 0);
  if (psi.use_norm) projected = batch_norm_channels(projected, psi, training);
  return relu(projected);
}

std::vector<RegionPair> pair_regions(const std::vector<Proposal>& teacher_props,
                                     const std::vector<Proposal>& student_props,
                                     const DetOutput& teacher_out,
                                     const DetOutput& student_out,
                                     AdapterParams& psi,
                                     const PairingSettings& settings,
                                     bool training) {
  if (teacher_out.neck_feature.requires_grad())
    throw UsageError("teacher features must be detached from the tape");
  std::vector<RegionPair> pairs;
  const std::size_t total = teacher_props.size() + student_props.size();
  if (total == 0) return pairs;
  pairs.resize(total);

  std::vector<Tensor> teacher_patches, student_patches;
  teacher_patches.reserve(total);
  student_patches.reserve(total);
  auto add_geometry = [&](const Proposal& prop, std::size_t i, Source origin) {
    RegionPair& pair = pairs[i];
    pair.origin = origin;
    pair.box = proposal_box(prop, settings.box_margin);
    teacher_patches.push_back(roi_align(teacher_out.neck_feature, pair.box, settings.roi_r));
    student_patches.push_back(roi_align(student_out.neck_feature, pair.box, settings.roi_r));
    pair.teacher_cls = region_max_pool(teacher_out.cls_heatmap, pair.box);
    pair.student_cls = region_max_pool(student_out.cls_heatmap, pair.box);
    const int H = teacher_out.reg_map.dim(1), W = teacher_out.reg_map.dim(2);
    const double rx = std::clamp(std::round(pair.box.cx), 0.0, W - 1.0);
    const double ry = std::clamp(std::round(pair.box.cy), 0.0, H - 1.0);
    pair.teacher_reg = bilinear_sample(teacher_out.reg_map, rx, ry);
    pair.student_reg = bilinear_sample(student_out.reg_map, rx, ry);
  };
  for (std::size_t i = 0; i < teacher_props.size(); ++i)
    add_geometry(teacher_props[i], i, Source::kTeacher);
  for (std::size_t i = 0; i < student_props.size(); ++i)
    add_geometry(student_props[i], teacher_props.size() + i, Source::kStudent);

  Tensor teacher_batch =
      normalize_channels(stack(teacher_patches), settings.tau, settings.spatial_softmax);
  Tensor student_batch = normalize_channels(
      adapt_student(stack(student_patches), psi, training), settings.tau,
      settings.spatial_softmax);
  for (std::size_t i = 0; i < total; ++i) {
    pairs[i].teacher_patch = select_image(teacher_batch, static_cast<int>(i));
    pairs[i].student_patch = select_image(student_batch, static_cast<int>(i));
  }
  return pairs;
}

}  // namespace rdd
