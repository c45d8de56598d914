#pragma once

#include "gazeloss/cgl.hpp"
#include "gazeloss/models.hpp"

#include <span>
#include <string>
#include <vector>

namespace gazeloss {

/// One supervised sample: the state (single frame [1,H,W] for BC, stack
/// [4,H,W] for BCO), its action label, and the gaze map at input resolution.
template <typename S>
struct LabeledState {
  Tensor<S> state;
  int action = 0;
  GazeHeatmap<S> gaze;
};

/// Composite loss value with its logged components. total is the in-graph
/// scalar; base/cgl are the separately logged terms (cgl excludes alpha).
template <typename S>
struct LossParts {
  Tensor<S> total;
  S base = 0;
  S cgl = 0;
};

namespace detail {

/// Shared assembly for Eq. BC / Eq. BCO: summed action NLL plus
/// sign * alpha * summed CGL at the tap layer. Samples whose gaze map is
/// entirely zero contribute an exact zero CGL term and are skipped, which
/// keeps the graph identical to the no-attention one (coverage asymmetry).
template <typename S>
LossParts<S> classification_loss(const ConvNet<S>& net, std::span<const LabeledState<S>> batch,
                                 const CglConfig<S>& config) {
  if (batch.empty()) throw ContractError("loss: batch must be nonempty");
  config.validate();
  const int tap = config.attach_layer > 0 ? config.attach_layer : net.default_tap();
  const auto sizes = net.spec().layer_sizes();
  if (tap < 1 || tap > static_cast<int>(sizes.size()))
    throw ConfigError("attach layer " + std::to_string(tap) + " out of range");
  const auto [th, tw] = sizes[static_cast<size_t>(tap - 1)];

  Tensor<S> nll_sum;
  Tensor<S> cgl_sum;
  for (const auto& item : batch) {
    if (item.action < 0 || item.action >= net.spec().output_dim)
      throw IndexError("action " + std::to_string(item.action) + " out of range [0," +
                       std::to_string(net.spec().output_dim) + ")");
    ForwardTrace<S> trace = net.forward(item.state);
    Tensor<S> nll = softmax_cross_entropy(trace.output, item.action);
    nll_sum = nll_sum.defined() ? add(nll_sum, nll) : nll;
    if (config.alpha > S(0) && item.gaze.any_positive()) {
      GazeHeatmap<S> g = resample_heatmap(item.gaze, th, tw);
      if (!g.any_positive()) continue;
      CollapsedMap<S> cm = collapse_normalize(trace.layer(tap), config.epsilon);
      Tensor<S> term = cgl_loss(g, cm);
      cgl_sum = cgl_sum.defined() ? add(cgl_sum, term) : term;
    }
  }
  LossParts<S> parts;
  parts.base = nll_sum.item();
  if (cgl_sum.defined()) {
    parts.cgl = cgl_sum.item();
    parts.total = add(nll_sum, scale(cgl_sum, S(config.sign) * config.alpha));
  } else {
    parts.total = nll_sum;
  }
  return parts;
}

}  // namespace detail

/// BC objective: summed negative log likelihood of the demonstrated actions
/// plus the weighted gaze coverage term at the third-layer tap.
template <typename S>
LossParts<S> bc_loss(const ConvNet<S>& net, std::span<const LabeledState<S>> batch,
                     const CglConfig<S>& config) {
  return detail::classification_loss(net, batch, config);
}

/// BCO objective: cross-entropy against the recovered action labels plus the
/// weighted coverage term at the second-layer tap. Label recovery itself
/// (the inverse dynamics model) happens upstream; the dataset supplies them.
template <typename S>
LossParts<S> bco_loss(const ConvNet<S>& net, std::span<const LabeledState<S>> batch,
                      const CglConfig<S>& config) {
  return detail::classification_loss(net, batch, config);
}

// ---------------------------------------------------------------------------
// T-REX snippets.
// ---------------------------------------------------------------------------

/// Fixed-length window of subsampled, stacked states with per-state gaze and
/// the parent trajectory's ground-truth return.
template <typename S>
struct TrajectorySnippet {
  std::vector<Tensor<S>> states;       // each [4,H,W]
  std::vector<GazeHeatmap<S>> gaze_maps;
  double source_return = 0;
};

template <typename S>
struct RankedSnippetPair {
  TrajectorySnippet<S> low;
  TrajectorySnippet<S> high;
};

/// A whole trajectory after frame-skip subsampling, ready for windowing.
template <typename S>
struct SubsampledTrajectory {
  std::vector<Tensor<S>> stacks;
  std::vector<GazeHeatmap<S>> stack_gaze;
  double source_return = 0;
  std::string name;

  int length() const { return static_cast<int>(stacks.size()); }
};

/// Frame-skip subsampling: raw frames form groups of four; each group keeps
/// the elementwise max of its 3rd and 4th members. Retained frames slide
/// into stacks of four; a stack's gaze map is the max-normalized sum of the
/// raw gaze maps of its newest group. Gaze that lands in the first three
/// groups of a trajectory precedes every stack's newest group and is
/// therefore dropped.
template <typename S>
SubsampledTrajectory<S> subsample_trajectory(const std::vector<GridX<S>>& frames,
                                             const std::vector<GridX<S>>& gaze_per_frame) {
  if (frames.size() < 16)
    throw ContractError("subsample_trajectory: need at least 16 raw frames, got " +
                        std::to_string(frames.size()));
  if (!gaze_per_frame.empty() && gaze_per_frame.size() != frames.size())
    throw ContractError("subsample_trajectory: gaze list length " +
                        std::to_string(gaze_per_frame.size()) + " != frame count " +
                        std::to_string(frames.size()));
  const int groups = static_cast<int>(frames.size()) / 4;
  const int h = static_cast<int>(frames[0].rows());
  const int w = static_cast<int>(frames[0].cols());

  std::vector<GridX<S>> retained;
  std::vector<GridX<S>> group_gaze;
  retained.reserve(groups);
  for (int gi = 0; gi < groups; ++gi) {
    retained.push_back(frames[4 * gi + 2].max(frames[4 * gi + 3]));
    GridX<S> gz = GridX<S>::Zero(h, w);
    if (!gaze_per_frame.empty())
      for (int k = 0; k < 4; ++k) gz += gaze_per_frame[4 * gi + k];
    const S mx = gz.maxCoeff();
    if (mx > S(0)) gz /= mx;
    group_gaze.push_back(std::move(gz));
  }

  SubsampledTrajectory<S> out;
  for (int t = 3; t < groups; ++t) {
    FrameStack<S> st;
    for (int k = 0; k < 4; ++k) st.frames[k] = retained[t - 3 + k];
    out.stacks.push_back(st.as_tensor());
    out.stack_gaze.push_back(GazeHeatmap<S>{group_gaze[t]});
  }
  return out;
}

/// Uniformly samples `count` pairs of distinct trajectories, orders each pair
/// by return, and cuts aligned-length windows. Deterministic under seed.
template <typename S>
std::vector<RankedSnippetPair<S>> sample_pairs(const std::vector<SubsampledTrajectory<S>>& demos,
                                               int count, int snippet_len, uint64_t seed,
                                               bool allow_ties = false) {
  if (demos.size() < 2) throw ContractError("sample_pairs: need at least 2 trajectories");
  if (count < 1 || snippet_len < 1)
    throw ContractError("sample_pairs: count and snippet_len must be >= 1");
  for (const auto& d : demos)
    if (d.length() < snippet_len)
      throw ContractError("sample_pairs: snippet length " + std::to_string(snippet_len) +
                          " exceeds trajectory '" + d.name + "' (" +
                          std::to_string(d.length()) + " states)");
  if (!allow_ties) {
    bool any_distinct = false;
    for (size_t i = 1; i < demos.size(); ++i)
      any_distinct = any_distinct || demos[i].source_return != demos[0].source_return;
    if (!any_distinct)
      throw ConfigError("sample_pairs: all trajectory returns are equal (pass the tie flag)");
  }

  Rng rng(seed);
  std::vector<RankedSnippetPair<S>> out;
  out.reserve(count);
  while (static_cast<int>(out.size()) < count) {
    const size_t a = rng.uniform_int(demos.size());
    size_t b = rng.uniform_int(demos.size() - 1);
    if (b >= a) ++b;
    if (!allow_ties && demos[a].source_return == demos[b].source_return) continue;
    const bool a_low = demos[a].source_return <= demos[b].source_return;
    const auto& lo = a_low ? demos[a] : demos[b];
    const auto& hi = a_low ? demos[b] : demos[a];
    RankedSnippetPair<S> pair;
    auto cut = [&](const SubsampledTrajectory<S>& d) {
      TrajectorySnippet<S> s;
      const int start = static_cast<int>(rng.uniform_int(d.length() - snippet_len + 1));
      for (int i = start; i < start + snippet_len; ++i) {
        s.states.push_back(d.stacks[i]);
        s.gaze_maps.push_back(d.stack_gaze[i]);
      }
      s.source_return = d.source_return;
      return s;
    };
    pair.low = cut(lo);
    pair.high = cut(hi);
    out.push_back(std::move(pair));
  }
  return out;
}

/// T-REX ranking loss over ranked snippet pairs, plus the coverage term
/// accumulated over every state of both snippets at the first-layer tap.
/// The ranking term is the stable log-sum-exp softplus of the return gap.
template <typename S>
LossParts<S> trex_loss(const ConvNet<S>& net, std::span<const RankedSnippetPair<S>> pairs,
                       const CglConfig<S>& config) {
  if (pairs.empty()) throw ContractError("trex_loss: pairs must be nonempty");
  config.validate();
  const int tap = config.attach_layer > 0 ? config.attach_layer : net.default_tap();
  const auto sizes = net.spec().layer_sizes();
  if (tap < 1 || tap > static_cast<int>(sizes.size()))
    throw ConfigError("attach layer " + std::to_string(tap) + " out of range");
  const auto [th, tw] = sizes[static_cast<size_t>(tap - 1)];

  Tensor<S> rank_sum;
  Tensor<S> cgl_sum;
  for (const auto& pair : pairs) {
    auto snippet_return = [&](const TrajectorySnippet<S>& snip) {
      Tensor<S> total;
      for (size_t i = 0; i < snip.states.size(); ++i) {
        ForwardTrace<S> trace = net.forward(snip.states[i]);
        total = total.defined() ? add(total, trace.output) : trace.output;
        if (config.alpha > S(0) && i < snip.gaze_maps.size() &&
            snip.gaze_maps[i].any_positive()) {
          GazeHeatmap<S> g = resample_heatmap(snip.gaze_maps[i], th, tw);
          if (!g.any_positive()) continue;
          CollapsedMap<S> cm = collapse_normalize(trace.layer(tap), config.epsilon);
          Tensor<S> term = cgl_loss(g, cm);
          cgl_sum = cgl_sum.defined() ? add(cgl_sum, term) : term;
        }
      }
      if (!total.defined()) total = Tensor<S>::zeros({1});
      return total;
    };
    Tensor<S> r_low = snippet_return(pair.low);
    Tensor<S> r_high = snippet_return(pair.high);
    Tensor<S> rank = pairwise_rank_loss(r_low, r_high);
    rank_sum = rank_sum.defined() ? add(rank_sum, rank) : rank;
  }
  LossParts<S> parts;
  parts.base = rank_sum.item();
  if (cgl_sum.defined()) {
    parts.cgl = cgl_sum.item();
    parts.total = add(rank_sum, scale(cgl_sum, S(config.sign) * config.alpha));
  } else {
    parts.total = rank_sum;
  }
  return parts;
}

}  // namespace gazeloss
