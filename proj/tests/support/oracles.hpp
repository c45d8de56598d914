// Independent reference implementations used as test oracles. Everything
// here is written as plainly as possible (scalar loops, double precision)
// and must not call into the implementation paths it checks.
#pragma once

#include "gazeloss/common.hpp"

#include <cmath>
#include <vector>

namespace oracles {

using gazeloss::GridX;

/// Quadruple-loop valid convolution, the reference for conv2d.
/// input: [c_in][h*w] row-major planes; kernel: [c_out][c_in][kh*kw].
inline std::vector<double> naive_conv2d(const std::vector<double>& input, int c_in, int h, int w,
                                        const std::vector<double>& kernel, int c_out, int kh,
                                        int kw, int stride, int& ho, int& wo) {
  ho = (h - kh) / stride + 1;
  wo = (w - kw) / stride + 1;
  std::vector<double> out(static_cast<size_t>(c_out) * ho * wo, 0.0);
  for (int co = 0; co < c_out; ++co)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double acc = 0;
        for (int ci = 0; ci < c_in; ++ci)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const int iy = oy * stride + ky;
              const int ix = ox * stride + kx;
              acc += input[(static_cast<size_t>(ci) * h + iy) * w + ix] *
                     kernel[((static_cast<size_t>(co) * c_in + ci) * kh + ky) * kw + kx];
            }
        out[(static_cast<size_t>(co) * ho + oy) * wo + ox] = acc;
      }
  return out;
}

/// Literal Eq. 2 collapse: channel sum then min-max normalization, first
/// occurrences tracked for reference only.
inline std::vector<double> collapse_reference(const std::vector<double>& f, int c, int h, int w) {
  const int hw = h * w;
  std::vector<double> s(static_cast<size_t>(hw), 0.0);
  for (int k = 0; k < c; ++k)
    for (int i = 0; i < hw; ++i) s[static_cast<size_t>(i)] += f[static_cast<size_t>(k * hw + i)];
  double mn = s[0], mx = s[0];
  for (double v : s) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  std::vector<double> out(static_cast<size_t>(hw));
  if (mx == mn) {
    for (auto& v : out) v = mx == 0.0 ? 0.0 : 1.0;
    return out;
  }
  for (int i = 0; i < hw; ++i) out[static_cast<size_t>(i)] = (s[static_cast<size_t>(i)] - mn) / (mx - mn);
  return out;
}

/// Literal Eq. 1 with Eq. 3/4 smoothing: CGL(g, f'') over already-collapsed
/// maps. The outer weight is the raw gaze value, so zero-gaze cells are
/// skipped outright.
inline double cgl_reference(const std::vector<double>& g, const std::vector<double>& f_prime,
                            double eps) {
  double total = 0;
  for (size_t i = 0; i < g.size(); ++i) {
    const double gi = g[i];
    if (gi == 0.0) continue;
    const double gp = gi;  // Eq. 3 leaves positive gaze untouched
    const double f2 = f_prime[i] == 0.0 ? eps : f_prime[i];
    total += gi * (gp * std::log(gp / f2));
  }
  return total;
}

/// Spearman rho via the classic 1 - 6*sum(d^2)/(n(n^2-1)) formula.
/// Valid only for tie-free inputs; tests feed it distinct values.
inline double spearman_d2(const std::vector<double>& a, const std::vector<double>& b) {
  const size_t n = a.size();
  auto rank_of = [n](const std::vector<double>& v) {
    std::vector<double> r(n);
    for (size_t i = 0; i < n; ++i) {
      size_t less = 0;
      for (size_t j = 0; j < n; ++j)
        if (v[j] < v[i]) ++less;
      r[i] = static_cast<double>(less) + 1.0;
    }
    return r;
  };
  const auto ra = rank_of(a), rb = rank_of(b);
  double d2 = 0;
  for (size_t i = 0; i < n; ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  const double nn = static_cast<double>(n);
  return 1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0));
}

/// Recovers the Gaussian sigma along one axis of a rendered heatmap by a
/// least-squares line fit of ln(v) against the squared distance to the peak:
/// ln v = -d^2 / (2 sigma^2) + const.
inline double fit_gaussian_sigma(const std::vector<double>& values,
                                 const std::vector<double>& distances) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    const double x = distances[i] * distances[i];
    const double y = std::log(values[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return std::sqrt(-1.0 / (2.0 * slope));
}

}  // namespace oracles
