#pragma once

#include "gazeloss/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <string>
#include <vector>

namespace gazeloss {

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatCM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

/// Unrolls valid-convolution patches: one column per output position,
/// rows ordered (c_in, ky, kx) row-major to match the kernel layout.
template <typename S>
MatCM<S> im2col(const S* input, int c_in, int h, int w, int kh, int kw, int stride, int ho,
                int wo) {
  MatCM<S> cols(static_cast<int64_t>(c_in) * kh * kw, static_cast<int64_t>(ho) * wo);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const int64_t col = static_cast<int64_t>(oy) * wo + ox;
      S* dst = cols.data() + col * cols.rows();
      for (int c = 0; c < c_in; ++c) {
        const S* plane = input + static_cast<int64_t>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
          const S* row = plane + static_cast<int64_t>(oy * stride + ky) * w + ox * stride;
          for (int kx = 0; kx < kw; ++kx) *dst++ = row[kx];
        }
      }
    }
  }
  return cols;
}

/// Scatter-adds column gradients back onto the input image (im2col adjoint).
template <typename S>
void col2im_add(const MatCM<S>& dcols, S* dinput, int c_in, int h, int w, int kh, int kw,
                int stride, int ho, int wo) {
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const int64_t col = static_cast<int64_t>(oy) * wo + ox;
      const S* src = dcols.data() + col * dcols.rows();
      for (int c = 0; c < c_in; ++c) {
        S* plane = dinput + static_cast<int64_t>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
          S* row = plane + static_cast<int64_t>(oy * stride + ky) * w + ox * stride;
          for (int kx = 0; kx < kw; ++kx) row[kx] += *src++;
        }
      }
    }
  }
}

}  // namespace detail

/// Valid (no padding) 2-D convolution of input [C_in,H,W] with kernel
/// [C_out,C_in,kH,kW]. Output is [C_out,H',W'] with
/// H' = floor((H-kH)/stride)+1 and W' analogous.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, int stride) {
  if (input.rank() != 3)
    throw DimensionError("conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
  if (kernel.rank() != 4)
    throw DimensionError("conv2d: kernel must be [C_out,C_in,kH,kW], got " +
                         shape_str(kernel.shape()));
  const int c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int c_out = kernel.dim(0), kc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kc != c_in)
    throw DimensionError("conv2d: kernel expects " + std::to_string(kc) +
                         " input channels, input has " + std::to_string(c_in));
  if (kh > h || kw > w)
    throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceeds input " + std::to_string(h) + "x" + std::to_string(w));
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");

  const int ho = (h - kh) / stride + 1;
  const int wo = (w - kw) / stride + 1;
  const int64_t krows = static_cast<int64_t>(c_in) * kh * kw;

  auto cols = std::make_shared<detail::MatCM<S>>(
      detail::im2col(input.data(), c_in, h, w, kh, kw, stride, ho, wo));

  auto in_n = input.node();
  auto k_n = kernel.node();
  Tensor<S> out = Tensor<S>::make_op(
      {c_out, ho, wo}, {input, kernel},
      [in_n, k_n, cols, c_in, h, w, kh, kw, stride, ho, wo, krows,
       c_out](detail::TensorNode<S>& o) {
        Eigen::Map<const detail::MatRM<S>> dout(o.grad.data(), c_out,
                                                static_cast<int64_t>(ho) * wo);
        if (k_n->requires_grad) {
          if (k_n->grad.size() == 0) k_n->grad = VecX<S>::Zero(k_n->value.size());
          Eigen::Map<detail::MatRM<S>> dk(k_n->grad.data(), c_out, krows);
          dk.noalias() += dout * cols->transpose();
        }
        if (in_n->requires_grad) {
          Eigen::Map<const detail::MatRM<S>> kmat(k_n->value.data(), c_out, krows);
          detail::MatCM<S> dcols = kmat.transpose() * dout;
          if (in_n->grad.size() == 0) in_n->grad = VecX<S>::Zero(in_n->value.size());
          detail::col2im_add(dcols, in_n->grad.data(), c_in, h, w, kh, kw, stride, ho, wo);
        }
      });

  Eigen::Map<const detail::MatRM<S>> kmat(kernel.data(), c_out, krows);
  Eigen::Map<detail::MatRM<S>> omat(out.data(), c_out, static_cast<int64_t>(ho) * wo);
  omat.noalias() = kmat * (*cols);
  return out;
}

/// Adds a per-channel bias to a [C,H,W] feature map.
template <typename S>
Tensor<S> bias_channels(const Tensor<S>& x, const Tensor<S>& bias) {
  if (x.rank() != 3 || bias.rank() != 1 || bias.dim(0) != x.dim(0))
    throw DimensionError("bias_channels: need [C,H,W] and [C], got " + shape_str(x.shape()) +
                         " and " + shape_str(bias.shape()));
  const int c = x.dim(0);
  const int64_t plane = static_cast<int64_t>(x.dim(1)) * x.dim(2);
  auto xn = x.node();
  auto bn = bias.node();
  Tensor<S> out =
      Tensor<S>::make_op(x.shape(), {x, bias}, [xn, bn, c, plane](detail::TensorNode<S>& o) {
        if (xn->requires_grad) xn->add_grad(o.grad);
        if (bn->requires_grad) {
          if (bn->grad.size() == 0) bn->grad = VecX<S>::Zero(c);
          for (int k = 0; k < c; ++k) bn->grad[k] += o.grad.segment(k * plane, plane).sum();
        }
      });
  for (int k = 0; k < c; ++k)
    out.vec().segment(k * plane, plane) = x.vec().segment(k * plane, plane) + bias.data()[k];
  return out;
}

/// weight[m,n] * x[n] + bias[m].
template <typename S>
Tensor<S> fully_connected(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  if (x.rank() != 1 || weight.rank() != 2 || bias.rank() != 1)
    throw DimensionError("fully_connected: need x[n], weight[m,n], bias[m]");
  const int n = x.dim(0), m = weight.dim(0);
  if (weight.dim(1) != n || bias.dim(0) != m)
    throw DimensionError("fully_connected: shape mismatch x" + shape_str(x.shape()) +
                         " weight" + shape_str(weight.shape()) + " bias" +
                         shape_str(bias.shape()));
  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.node();
  Tensor<S> out = Tensor<S>::make_op({m}, {x, weight, bias}, [xn, wn, bn, m,
                                                              n](detail::TensorNode<S>& o) {
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> dy(o.grad.data(), m);
    Eigen::Map<const detail::MatRM<S>> wmat(wn->value.data(), m, n);
    if (wn->requires_grad) {
      if (wn->grad.size() == 0) wn->grad = VecX<S>::Zero(wn->value.size());
      Eigen::Map<detail::MatRM<S>> dw(wn->grad.data(), m, n);
      Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> xv(xn->value.data(), n);
      dw.noalias() += dy * xv.transpose();
    }
    if (xn->requires_grad) {
      if (xn->grad.size() == 0) xn->grad = VecX<S>::Zero(n);
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> dx(xn->grad.data(), n);
      dx.noalias() += wmat.transpose() * dy;
    }
    if (bn->requires_grad) bn->add_grad(o.grad);
  });
  Eigen::Map<const detail::MatRM<S>> wmat(weight.data(), m, n);
  Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> xv(x.data(), n);
  Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> yv(out.data(), m);
  yv.noalias() = wmat * xv;
  out.vec() += bias.vec();
  return out;
}

/// -log softmax(logits)[label], max-subtracted for stability.
/// d logits = softmax - one_hot.
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, int label) {
  if (logits.rank() != 1)
    throw DimensionError("softmax_cross_entropy: logits must be rank 1, got " +
                         shape_str(logits.shape()));
  const int k = logits.dim(0);
  if (label < 0 || label >= k)
    throw IndexError("softmax_cross_entropy: label " + std::to_string(label) +
                     " out of range [0," + std::to_string(k) + ")");
  const S mx = logits.vec().maxCoeff();
  VecX<S> shifted = logits.vec() - mx;
  VecX<S> ex = shifted.exp();
  const S z = ex.sum();
  auto softmax = std::make_shared<VecX<S>>(ex / z);
  auto ln = logits.node();
  Tensor<S> out =
      Tensor<S>::make_op({1}, {logits}, [ln, softmax, label](detail::TensorNode<S>& o) {
        VecX<S> d = *softmax * o.grad[0];
        d[label] -= o.grad[0];
        ln->add_grad(d);
      });
  out.data()[0] = std::log(z) - shifted[label];
  return out;
}

/// Pairwise ranking loss -log( e^{r_high} / (e^{r_low} + e^{r_high}) ),
/// evaluated as softplus(r_low - r_high) via log-sum-exp.
template <typename S>
Tensor<S> pairwise_rank_loss(const Tensor<S>& return_low, const Tensor<S>& return_high) {
  if (return_low.numel() != 1 || return_high.numel() != 1)
    throw ContractError("pairwise_rank_loss: snippet returns must be scalars");
  const S d = return_low.item() - return_high.item();
  auto lo = return_low.node();
  auto hi = return_high.node();
  Tensor<S> out = Tensor<S>::make_op({1}, {return_low, return_high},
                                     [lo, hi, d](detail::TensorNode<S>& o) {
                                       const S sig = S(1) / (S(1) + std::exp(-d));
                                       if (lo->requires_grad) lo->add_grad_at(0, o.grad[0] * sig);
                                       if (hi->requires_grad) hi->add_grad_at(0, -o.grad[0] * sig);
                                     });
  out.data()[0] = d > S(0) ? d + std::log1p(std::exp(-d)) : std::log1p(std::exp(d));
  return out;
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

template <typename S>
struct AdamState {
  S learning_rate = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps_adam = S(1e-8);
  int64_t step = 0;
  std::vector<VecX<S>> first_moment;
  std::vector<VecX<S>> second_moment;

  static AdamState for_params(const std::vector<Tensor<S>>& params, S lr) {
    AdamState st;
    st.learning_rate = lr;
    st.first_moment.reserve(params.size());
    st.second_moment.reserve(params.size());
    for (const auto& p : params) {
      st.first_moment.push_back(VecX<S>::Zero(p.numel()));
      st.second_moment.push_back(VecX<S>::Zero(p.numel()));
    }
    return st;
  }
};

/// Standard bias-corrected Adam update, in parameter order.
template <typename S>
void adam_step(std::vector<Tensor<S>>& params, AdamState<S>& state) {
  if (params.size() != state.first_moment.size())
    throw DimensionError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                         " parameters, got " + std::to_string(params.size()));
  state.step += 1;
  const S bc1 = S(1) - std::pow(state.beta1, static_cast<S>(state.step));
  const S bc2 = S(1) - std::pow(state.beta2, static_cast<S>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (state.first_moment[i].size() != p.numel())
      throw DimensionError("adam_step: moment buffer " + std::to_string(i) +
                           " does not match parameter shape " + shape_str(p.shape()));
    VecX<S> g = p.has_grad() ? p.grad() : VecX<S>::Zero(p.numel());
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    m = state.beta1 * m + (S(1) - state.beta1) * g;
    v = state.beta2 * v + (S(1) - state.beta2) * g.square();
    p.vec() -= state.learning_rate * (m / bc1) / ((v / bc2).sqrt() + state.eps_adam);
  }
}

}  // namespace gazeloss
