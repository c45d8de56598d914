#pragma once

#include "gazeloss/gaze.hpp"
#include "gazeloss/tensor.hpp"

#include <cmath>
#include <memory>
#include <vector>

namespace gazeloss {

template <typename S>
struct CglConfig {
  S epsilon = S(1e-10);
  S alpha = S(0.01);
  /// 1-based index of the convolutional layer whose output feeds the loss;
  /// 0 selects the network's default tap.
  int attach_layer = 0;
  /// +1 adds the loss as a penalty; -1 keeps the literal printed sign of the
  /// BC objective, which rewards divergence instead.
  int sign = +1;

  void validate() const {
    if (!(epsilon > S(0))) throw ConfigError("cgl epsilon must be > 0");
    if (alpha < S(0)) throw ConfigError("cgl alpha must be >= 0");
    if (sign != 1 && sign != -1) throw ConfigError("cgl sign must be +1 or -1");
  }
};

/// Channel-collapsed, min-max normalized feature map with epsilon substituted
/// where the normalized value is exactly zero. Lives in the compute graph so
/// the loss can differentiate through the collapse.
template <typename S>
struct CollapsedMap {
  Tensor<S> map;  // [h,w] holding the smoothed values
  Eigen::Array<bool, Eigen::Dynamic, 1> smoothing_mask;
  int64_t argmin = -1;  // first occurrence, row-major, of the channel-sum min/max
  int64_t argmax = -1;
  bool degenerate = false;  // constant channel sum
  S epsilon = S(1e-10);
  int rows = 0, cols = 0;
};

/// Collapses a [c,h,w] feature map by summing over channels, min-max
/// normalizes the 2-D result onto [0,1], and substitutes epsilon for exact
/// zeros. A constant channel sum maps to all-ones (nonzero constant: uniform
/// activation covers everything) or, when the constant is zero, to a fully
/// smoothed all-epsilon map.
///
/// Gradients use the full chain rule through the min and max, attributed to
/// their first row-major occurrence; smoothed cells sit on the constant
/// branch and pass nothing.
template <typename S>
CollapsedMap<S> collapse_normalize(const Tensor<S>& f, S epsilon = S(1e-10)) {
  if (f.rank() != 3)
    throw DimensionError("collapse_normalize: expected [c,h,w], got " + shape_str(f.shape()));
  if (!(epsilon > S(0))) throw ConfigError("collapse_normalize: epsilon must be > 0");
  const int c = f.dim(0), h = f.dim(1), w = f.dim(2);
  const int64_t hw = static_cast<int64_t>(h) * w;

  auto s = std::make_shared<VecX<S>>(VecX<S>::Zero(hw));
  for (int k = 0; k < c; ++k) *s += f.vec().segment(k * hw, hw);

  // First-occurrence min/max in row-major order.
  int64_t argmin = 0, argmax = 0;
  for (int64_t i = 1; i < hw; ++i) {
    if ((*s)[i] < (*s)[argmin]) argmin = i;
    if ((*s)[i] > (*s)[argmax]) argmax = i;
  }
  const S mn = (*s)[argmin];
  const S mx = (*s)[argmax];

  CollapsedMap<S> cm;
  cm.epsilon = epsilon;
  cm.rows = h;
  cm.cols = w;
  cm.argmin = argmin;
  cm.argmax = argmax;
  cm.degenerate = (mx == mn);
  cm.smoothing_mask = Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(hw, false);

  VecX<S> value(hw);
  if (cm.degenerate) {
    if (mx == S(0)) {
      value.setConstant(epsilon);
      cm.smoothing_mask.setConstant(true);
    } else {
      value.setConstant(S(1));
    }
  } else {
    const S inv = S(1) / (mx - mn);
    for (int64_t i = 0; i < hw; ++i) {
      const S fp = ((*s)[i] - mn) * inv;
      if (fp == S(0)) {
        value[i] = epsilon;
        cm.smoothing_mask[i] = true;
      } else {
        value[i] = fp;
      }
    }
  }

  auto fn = f.node();
  auto mask = std::make_shared<Eigen::Array<bool, Eigen::Dynamic, 1>>(cm.smoothing_mask);
  const bool degenerate = cm.degenerate;
  cm.map = Tensor<S>::make_op(
      {h, w}, {f},
      [fn, s, mask, mn, mx, argmin, argmax, degenerate, c, hw](detail::TensorNode<S>& o) {
        if (degenerate) return;  // piecewise-constant branch
        const S inv = S(1) / (mx - mn);
        VecX<S> u = mask->select(VecX<S>::Zero(hw), o.grad);
        VecX<S> ds = u * inv;
        // d f'_ij / d min = (s_ij - max) / (max - min)^2, and the max path
        // mirrors it; both land on the first-occurrence cells.
        ds[argmin] += (u * (*s - mx)).sum() * inv * inv;
        ds[argmax] += (u * (mn - *s)).sum() * inv * inv;
        if (fn->grad.size() == 0) fn->grad = VecX<S>::Zero(fn->value.size());
        for (int k = 0; k < c; ++k) fn->grad.segment(k * hw, hw) += ds;
      });
  cm.map.vec() = value;
  return cm;
}

/// Coverage-based gaze loss over a gaze heatmap and a collapsed feature map:
///   sum_{i,j} g_ij * [ g'_ij * ln(g'_ij / f''_ij) ]
/// with g' and f'' the epsilon-smoothed maps. Cells with g_ij = 0 are
/// short-circuited to an exact zero contribution, never evaluated, so
/// activations outside the gazed region carry no penalty.
template <typename S>
Tensor<S> cgl_loss(const GazeHeatmap<S>& gaze, const CollapsedMap<S>& cm) {
  if (gaze.rows() != cm.rows || gaze.cols() != cm.cols)
    throw ContractError("cgl_loss: gaze " + std::to_string(gaze.rows()) + "x" +
                        std::to_string(gaze.cols()) + " vs feature map " +
                        std::to_string(cm.rows) + "x" + std::to_string(cm.cols));
  const int64_t hw = static_cast<int64_t>(cm.rows) * cm.cols;
  // Row-major flat view matches the tensor layout of cm.map.
  auto g = std::make_shared<VecX<S>>(Eigen::Map<const VecX<S>>(gaze.grid.data(), hw));
  auto mask = std::make_shared<Eigen::Array<bool, Eigen::Dynamic, 1>>(cm.smoothing_mask);

  auto mn = cm.map.node();
  Tensor<S> out = Tensor<S>::make_op({1}, {cm.map}, [g, mask, mn, hw](detail::TensorNode<S>& o) {
    // d loss / d f'' = -g * g' / f''; zero on smoothed cells (constant branch)
    // and wherever g = 0.
    VecX<S> d = VecX<S>::Zero(hw);
    for (int64_t i = 0; i < hw; ++i) {
      const S gi = (*g)[i];
      if (gi > S(0) && !(*mask)[i]) d[i] = -gi * gi / mn->value[i];
    }
    mn->add_grad(d * o.grad[0]);
  });

  S acc = 0;
  const S* f2 = cm.map.data();
  for (int64_t i = 0; i < hw; ++i) {
    const S gi = (*g)[i];
    if (gi > S(0)) acc += gi * (gi * (std::log(gi) - std::log(f2[i])));
  }
  out.data()[0] = acc;
  return out;
}

/// Collapsed-and-normalized layer output without gradient tracking, packaged
/// for export and visual comparison against gaze maps.
template <typename S>
GazeHeatmap<S> activation_heatmap(const Tensor<S>& f, S epsilon = S(1e-10)) {
  NoGradGuard no_grad;
  CollapsedMap<S> cm = collapse_normalize(f, epsilon);
  return GazeHeatmap<S>{cm.map.grid()};
}

}  // namespace gazeloss
