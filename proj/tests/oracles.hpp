// Independent reference implementations used to cross-check the library.
// Everything here is deliberately naive: straight loops, no sharing of code
// with src/, so a bug has to appear twice to go unnoticed.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace oracle {

// Plain 7-loop cross-correlation, NCHW * KCRS -> NKOHOW.
inline std::vector<double> naive_conv2d(const std::vector<double>& in, int N, int C,
                                        int H, int W, const std::vector<double>& ker,
                                        int K, int kh, int kw, int stride, int padding,
                                        int& OH, int& OW) {
  OH = (H + 2 * padding - kh) / stride + 1;
  OW = (W + 2 * padding - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(N) * K * OH * OW, 0.0);
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                int ih = oh * stride + i - padding;
                int iw = ow * stride + j - padding;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += in[((static_cast<std::size_t>(n) * C + c) * H + ih) * W + iw] *
                       ker[((static_cast<std::size_t>(k) * C + c) * kh + i) * kw + j];
              }
          out[((static_cast<std::size_t>(n) * K + k) * OH + oh) * OW + ow] = acc;
        }
  return out;
}

// Central finite differences of a scalar function of a flat parameter vector.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double dn = f(x);
    x[i] = keep;
    g[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

struct GradCheck {
  bool ok = true;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;

  std::string describe() const {
    return "index " + std::to_string(worst_index) + ": analytic=" +
           std::to_string(analytic) + " numeric=" + std::to_string(numeric) +
           " err=" + std::to_string(error);
  }
};

// Accept when relative error < 1e-4, or absolute error < 1e-7 for components
// whose analytic magnitude is below 1e-6 (relative error is meaningless there).
inline GradCheck compare_gradients(const std::vector<double>& analytic,
                                   const std::vector<double>& numeric,
                                   double rel_tol = 1e-4, double abs_tol = 1e-7,
                                   double small = 1e-6) {
  GradCheck r;
  double worst = -1.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double abs_err = std::fabs(a - n);
    double err;
    bool ok;
    if (std::fabs(a) < small) {
      err = abs_err;
      ok = abs_err < abs_tol;
    } else {
      err = abs_err / std::fabs(a);
      ok = err < rel_tol;
    }
    if (!ok && err > worst) {
      worst = err;
      r.ok = false;
      r.worst_index = i;
      r.analytic = a;
      r.numeric = n;
      r.error = err;
    }
  }
  return r;
}

// Bilinear interpolation at one point of a [C,H,W] volume, clamped to borders.
inline std::vector<double> bilinear_at(const std::vector<double>& f, int C, int H, int W,
                                       double x, double y) {
  auto clampd = [](double v, double lo, double hi) { return v < lo ? lo : (v > hi ? hi : v); };
  x = clampd(x, 0.0, W - 1.0);
  y = clampd(y, 0.0, H - 1.0);
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  if (x0 > W - 1) x0 = W - 1;
  if (y0 > H - 1) y0 = H - 1;
  int x1 = x0 + 1 > W - 1 ? W - 1 : x0 + 1;
  int y1 = y0 + 1 > H - 1 ? H - 1 : y0 + 1;
  double ax = x - x0, ay = y - y0;
  std::vector<double> out(C);
  for (int c = 0; c < C; ++c) {
    const double* p = f.data() + static_cast<std::size_t>(c) * H * W;
    out[c] = (1 - ay) * ((1 - ax) * p[y0 * W + x0] + ax * p[y0 * W + x1]) +
             ay * ((1 - ax) * p[y1 * W + x0] + ax * p[y1 * W + x1]);
  }
  return out;
}

// Exhaustive minimizer of sum_i m_i*s_i + lambda*|m|_1 over m in {0,1}^n.
// Returns the best mask; prefer_zero breaks ties toward fewer ones, matching
// the convention that a pair is only kept when it strictly helps.
inline std::vector<int> brute_force_mask(const std::vector<double>& scores, double lambda) {
  const std::size_t n = scores.size();
  std::vector<int> best(n, 0);
  double best_val = 0.0;
  int best_ones = 0;
  for (std::size_t bits = 0; bits < (1u << n); ++bits) {
    double val = 0.0;
    int ones = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (bits >> i & 1u) {
        val += scores[i] + lambda;
        ++ones;
      }
    if (val < best_val - 1e-15 ||
        (std::fabs(val - best_val) <= 1e-15 && ones < best_ones)) {
      best_val = val;
      best_ones = ones;
      for (std::size_t i = 0; i < n; ++i) best[i] = static_cast<int>(bits >> i & 1u);
    }
  }
  return best;
}

}  // namespace oracle
