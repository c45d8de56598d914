#pragma once

#include "gazeloss/gaze.hpp"
#include "gazeloss/tensor.hpp"

#include <memory>

namespace gazeloss {

template <typename S>
struct GmdConfig {
  /// Dropout probability applied where gaze is zero; cells under full gaze
  /// are never dropped.
  S p_base = S(0.5);
  /// 1-based conv layer the mask attaches after.
  int layer_index = 1;
  bool train = true;

  void validate() const {
    if (!(p_base >= S(0) && p_base < S(1)))
      throw ConfigError("gmd p_base must be in [0,1)");
    if (layer_index < 1) throw ConfigError("gmd layer_index must be >= 1");
  }
};

/// Spatial dropout mask, shared across channels. Mask entries already carry
/// the inverted-dropout scale 1/keep; eval mode is the all-ones identity.
template <typename S>
struct GmdMask {
  GridX<S> mask;
  GridX<S> keep_prob;
  int layer_index = 1;
};

/// Samples a gaze-modulated dropout mask: p_drop(i,j) = p_base * (1 - g(i,j)),
/// Bernoulli per spatial cell.
template <typename S>
GmdMask<S> gmd_mask(const GazeHeatmap<S>& g, const GmdConfig<S>& config, uint64_t seed) {
  config.validate();
  const int h = g.rows(), w = g.cols();
  GmdMask<S> out;
  out.layer_index = config.layer_index;
  out.keep_prob = S(1) - config.p_base * (S(1) - g.grid);
  if (!config.train) {
    out.mask = GridX<S>::Ones(h, w);
    return out;
  }
  out.mask = GridX<S>::Zero(h, w);
  Rng rng(seed);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const S keep = out.keep_prob(r, c);
      if (rng.uniform() < static_cast<double>(keep)) out.mask(r, c) = S(1) / keep;
    }
  return out;
}

/// Multiplies every channel of a [c,h,w] feature map by the spatial mask.
/// The mask is a constant; gradients pass through the multiplication.
template <typename S>
Tensor<S> apply_gmd(const Tensor<S>& f, const GmdMask<S>& m) {
  if (f.rank() != 3)
    throw DimensionError("apply_gmd: expected [c,h,w], got " + shape_str(f.shape()));
  const int c = f.dim(0), h = f.dim(1), w = f.dim(2);
  if (h != m.mask.rows() || w != m.mask.cols())
    throw ContractError("apply_gmd: mask " + std::to_string(m.mask.rows()) + "x" +
                        std::to_string(m.mask.cols()) + " vs feature map " + std::to_string(h) +
                        "x" + std::to_string(w));
  const int64_t hw = static_cast<int64_t>(h) * w;
  auto mv = std::make_shared<VecX<S>>(Eigen::Map<const VecX<S>>(m.mask.data(), hw));
  auto fn = f.node();
  Tensor<S> out = Tensor<S>::make_op(f.shape(), {f}, [fn, mv, c, hw](detail::TensorNode<S>& o) {
    if (fn->grad.size() == 0) fn->grad = VecX<S>::Zero(fn->value.size());
    for (int k = 0; k < c; ++k)
      fn->grad.segment(k * hw, hw) += o.grad.segment(k * hw, hw) * (*mv);
  });
  for (int k = 0; k < c; ++k)
    out.vec().segment(k * hw, hw) = f.vec().segment(k * hw, hw) * (*mv);
  return out;
}

}  // namespace gazeloss
