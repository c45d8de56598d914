#pragma once

#include "gazeloss/losses.hpp"

#include <cstring>
#include <functional>
#include <string>
#include <vector>

namespace gazeloss {

template <typename S>
struct GradCheckEval {
  Tensor<S> loss;
  /// Discrete witness of every kink decision the forward pass took (ReLU
  /// sign patterns, min/max argument cells, smoothing masks). Coordinates
  /// whose finite-difference probes change the witness sit on a kink and
  /// are excluded.
  std::vector<uint8_t> signature;
};

struct GradCheckReport {
  double max_rel_err = 0;
  int64_t checked = 0;
  int64_t skipped_kink = 0;
  int64_t skipped_unconverged = 0;

  int64_t total() const { return checked + skipped_kink + skipped_unconverged; }
  double checked_fraction() const {
    return total() ? static_cast<double>(checked) / static_cast<double>(total()) : 0.0;
  }
};

namespace detail {

inline void sig_push_signs(std::vector<uint8_t>& sig, const float* v, int64_t n) {
  for (int64_t i = 0; i < n; ++i) sig.push_back(v[i] > 0 ? 1 : 0);
}
inline void sig_push_signs(std::vector<uint8_t>& sig, const double* v, int64_t n) {
  for (int64_t i = 0; i < n; ++i) sig.push_back(v[i] > 0 ? 1 : 0);
}

inline void sig_push_i64(std::vector<uint8_t>& sig, int64_t v) {
  for (int k = 0; k < 8; ++k) sig.push_back(static_cast<uint8_t>((v >> (8 * k)) & 0xff));
}

template <typename S>
void sig_push_trace(std::vector<uint8_t>& sig, const ForwardTrace<S>& trace) {
  for (const auto& t : trace.conv_outputs) sig_push_signs(sig, t.data(), t.numel());
}

template <typename S>
void sig_push_collapsed(std::vector<uint8_t>& sig, const CollapsedMap<S>& cm) {
  sig_push_i64(sig, cm.argmin);
  sig_push_i64(sig, cm.argmax);
  sig.push_back(cm.degenerate ? 1 : 0);
  for (Eigen::Index i = 0; i < cm.smoothing_mask.size(); ++i)
    sig.push_back(cm.smoothing_mask[i] ? 1 : 0);
}

}  // namespace detail

/// Central-difference gradient check against the reverse-mode sweep.
///
/// For each coordinate the harness probes at +-h and +-h/2 and compares the
/// analytic gradient with the Richardson-extrapolated central difference.
/// Coordinates whose probes flip a kink witness are excluded, as are
/// coordinates where the two step sizes disagree by more than 3% of the
/// tensor's gradient scale (the difference quotient itself has not
/// converged there, so it cannot arbitrate).
template <typename S>
GradCheckReport check_gradients(std::vector<Tensor<S>> params,
                                const std::function<GradCheckEval<S>()>& make, double h) {
  for (auto& p : params) p.zero_grad();
  GradCheckEval<S> base = make();
  backward(base.loss);

  GradCheckReport report;
  for (auto& p : params) {
    const VecX<S> analytic = p.has_grad() ? p.grad() : VecX<S>::Zero(p.numel());
    const int64_t n = p.numel();
    std::vector<double> fd(n), fd_half(n);
    std::vector<char> kink(n, 0);
    for (int64_t i = 0; i < n; ++i) {
      const S saved = p.data()[i];
      auto probe = [&](double delta) {
        p.data()[i] = saved + static_cast<S>(delta);
        NoGradGuard no_grad;
        GradCheckEval<S> e = make();
        if (e.signature != base.signature) kink[i] = 1;
        return static_cast<double>(e.loss.item());
      };
      const double lp = probe(h);
      const double lm = probe(-h);
      const double lp2 = probe(h / 2);
      const double lm2 = probe(-h / 2);
      p.data()[i] = saved;
      fd[i] = (lp - lm) / (2 * h);
      fd_half[i] = (lp2 - lm2) / h;
    }
    double scale = 1e-8;
    for (int64_t i = 0; i < n; ++i) {
      if (kink[i]) continue;
      const double rich = (4 * fd_half[i] - fd[i]) / 3;
      scale = std::max({scale, std::abs(static_cast<double>(analytic[i])), std::abs(rich)});
    }
    for (int64_t i = 0; i < n; ++i) {
      if (kink[i]) {
        ++report.skipped_kink;
        continue;
      }
      if (std::abs(fd[i] - fd_half[i]) > 0.03 * scale) {
        ++report.skipped_unconverged;
        continue;
      }
      const double rich = (4 * fd_half[i] - fd[i]) / 3;
      const double err = std::abs(static_cast<double>(analytic[i]) - rich) / scale;
      report.max_rel_err = std::max(report.max_rel_err, err);
      ++report.checked;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Named scenarios for the grad-check CLI and the acceptance suite. Each uses
// a deliberately tiny architecture so the quadratic finite-difference cost
// stays in milliseconds.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
GazeHeatmap<S> random_gaze(int h, int w, Rng& rng) {
  GridX<S> g(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      g(r, c) = static_cast<S>(std::max(0.0, rng.uniform_in(-0.6, 1.0)));
  const S mx = g.maxCoeff();
  if (mx > S(0))
    g /= mx;
  else
    g(h / 2, w / 2) = S(1);
  return GazeHeatmap<S>{std::move(g)};
}

template <typename S>
Tensor<S> random_tensor(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape), requires_grad);
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<S>(rng.uniform_in(lo, hi));
  return t;
}

template <typename S>
std::vector<LabeledState<S>> random_batch(int n, int channels, int hw, int actions, Rng& rng) {
  std::vector<LabeledState<S>> batch;
  for (int i = 0; i < n; ++i) {
    LabeledState<S> s;
    s.state = random_tensor<S>({channels, hw, hw}, 0.0, 1.0, rng, false);
    s.action = static_cast<int>(rng.uniform_int(actions));
    s.gaze = random_gaze<S>(hw, hw, rng);
    batch.push_back(std::move(s));
  }
  return batch;
}

inline NetSpec tiny_policy_spec(const std::string& kind, int channels, int actions) {
  NetSpec s;
  s.kind = kind;
  s.input_channels = channels;
  s.input_h = s.input_w = 8;
  s.conv = {{4, 3, 3, 1, Activation::Relu}, {4, 3, 3, 1, Activation::Relu}};
  s.tap_layer = 2;
  s.output_dim = actions;
  return s;
}

inline NetSpec tiny_reward_spec() {
  NetSpec s;
  s.kind = "trex";
  s.input_channels = 4;
  s.input_h = s.input_w = 8;
  s.conv = {{3, 3, 3, 1, Activation::LeakyRelu}, {3, 3, 3, 1, Activation::LeakyRelu}};
  s.tap_layer = 1;
  s.hidden_units = 8;
  s.output_dim = 1;
  return s;
}

}  // namespace detail

/// Runs one named gradient-check scenario. Ops: cgl, conv, softmax, bc-loss,
/// bco-loss, trex-loss.
template <typename S>
GradCheckReport run_grad_check(const std::string& op, uint64_t seed, double h) {
  Rng rng(derive_seed(seed, 0xabc));
  const S eps = S(1e-10);

  if (op == "cgl") {
    Tensor<S> f = detail::random_tensor<S>({3, 7, 7}, -1.0, 1.0, rng, true);
    GazeHeatmap<S> g = detail::random_gaze<S>(7, 7, rng);
    auto make = [f, g, eps]() {
      CollapsedMap<S> cm = collapse_normalize(f, eps);
      GradCheckEval<S> e;
      detail::sig_push_collapsed(e.signature, cm);
      e.loss = cgl_loss(g, cm);
      return e;
    };
    return check_gradients<S>({f}, make, h);
  }
  if (op == "conv") {
    Tensor<S> input = detail::random_tensor<S>({2, 8, 8}, -1.0, 1.0, rng, true);
    Tensor<S> kernel = detail::random_tensor<S>({3, 2, 3, 3}, -1.0, 1.0, rng, true);
    auto make = [input, kernel]() {
      Tensor<S> y = conv2d(input, kernel, 2);
      GradCheckEval<S> e;
      e.loss = sum(mul(y, y));  // quadratic head keeps the pullback nontrivial
      return e;
    };
    return check_gradients<S>({input, kernel}, make, h);
  }
  if (op == "softmax") {
    Tensor<S> logits = detail::random_tensor<S>({6}, -1.0, 1.0, rng, true);
    const int label = static_cast<int>(rng.uniform_int(6));
    auto make = [logits, label]() {
      GradCheckEval<S> e;
      e.loss = softmax_cross_entropy(logits, label);
      return e;
    };
    return check_gradients<S>({logits}, make, h);
  }
  if (op == "bc-loss" || op == "bco-loss") {
    const bool bc = op == "bc-loss";
    const int channels = bc ? 1 : 4;
    NetSpec spec = detail::tiny_policy_spec(bc ? "bc" : "bco", channels, 3);
    ConvNet<S> net = bc ? build_bc_net<S>(3, derive_seed(seed, 1), &spec, true)
                        : build_bco_net<S>(3, derive_seed(seed, 1), &spec, true);
    auto batch = std::make_shared<std::vector<LabeledState<S>>>(
        detail::random_batch<S>(2, channels, 8, 3, rng));
    CglConfig<S> cfg;
    cfg.alpha = S(0.1);
    cfg.epsilon = eps;
    auto make = [&net, batch, cfg, bc]() {
      GradCheckEval<S> e;
      LossParts<S> parts = bc ? bc_loss<S>(net, *batch, cfg) : bco_loss<S>(net, *batch, cfg);
      e.loss = parts.total;
      for (const auto& item : *batch) {
        ForwardTrace<S> trace = net.forward(item.state);
        detail::sig_push_trace(e.signature, trace);
        CollapsedMap<S> cm = collapse_normalize(trace.layer(net.default_tap()), cfg.epsilon);
        detail::sig_push_collapsed(e.signature, cm);
      }
      return e;
    };
    return check_gradients<S>(net.params(), make, h);
  }
  if (op == "trex-loss") {
    NetSpec spec = detail::tiny_reward_spec();
    ConvNet<S> net = build_trex_net<S>(derive_seed(seed, 1), &spec, true);
    auto pairs = std::make_shared<std::vector<RankedSnippetPair<S>>>();
    RankedSnippetPair<S> pair;
    for (int k = 0; k < 2; ++k) {
      TrajectorySnippet<S> snip;
      for (int i = 0; i < 2; ++i) {
        snip.states.push_back(detail::random_tensor<S>({4, 8, 8}, 0.0, 1.0, rng, false));
        snip.gaze_maps.push_back(detail::random_gaze<S>(8, 8, rng));
      }
      snip.source_return = k;
      (k == 0 ? pair.low : pair.high) = std::move(snip);
    }
    pairs->push_back(std::move(pair));
    CglConfig<S> cfg;
    cfg.alpha = S(0.1);
    cfg.epsilon = eps;
    auto make = [&net, pairs, cfg]() {
      GradCheckEval<S> e;
      LossParts<S> parts = trex_loss<S>(net, *pairs, cfg);
      e.loss = parts.total;
      for (const auto& pr : *pairs)
        for (const auto* snip : {&pr.low, &pr.high})
          for (const auto& st : snip->states) {
            ForwardTrace<S> trace = net.forward(st);
            detail::sig_push_trace(e.signature, trace);
            CollapsedMap<S> cm = collapse_normalize(trace.layer(net.default_tap()), cfg.epsilon);
            detail::sig_push_collapsed(e.signature, cm);
          }
      return e;
    };
    return check_gradients<S>(net.params(), make, h);
  }
  throw ConfigError("unknown grad-check op '" + op +
                    "' (expected cgl|conv|softmax|bc-loss|bco-loss|trex-loss)");
}

inline const std::vector<std::string>& grad_check_ops() {
  static const std::vector<std::string> ops = {"cgl",     "conv",     "softmax",
                                               "bc-loss", "bco-loss", "trex-loss"};
  return ops;
}

}  // namespace gazeloss
