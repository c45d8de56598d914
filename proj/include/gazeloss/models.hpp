#pragma once

#include "gazeloss/gmd.hpp"
#include "gazeloss/gzt.hpp"
#include "gazeloss/nn.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace gazeloss {

enum class Activation { Relu, LeakyRelu };

inline std::string to_string(Activation a) {
  return a == Activation::Relu ? "relu" : "leaky_relu";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "leaky_relu") return Activation::LeakyRelu;
  throw ConfigError("unknown activation '" + s + "'");
}

struct ConvLayerSpec {
  int out_channels = 0;
  int kernel_h = 0;
  int kernel_w = 0;
  int stride = 1;
  Activation activation = Activation::Relu;
  double leaky_slope = 0.01;
};

/// Full architecture description: conv stack, tap layer, and head.
/// hidden_units = 0 means the flattened features feed the output layer
/// directly (policy nets); nonzero inserts one hidden layer (reward net).
struct NetSpec {
  std::string kind;  // "bc" | "bco" | "trex"
  int input_channels = 1;
  int input_h = 84;
  int input_w = 84;
  std::vector<ConvLayerSpec> conv;
  int tap_layer = 1;  // 1-based
  int hidden_units = 0;
  int output_dim = 1;

  /// Spatial size after each conv layer; throws if any layer underflows.
  std::vector<std::pair<int, int>> layer_sizes() const {
    std::vector<std::pair<int, int>> out;
    int h = input_h, w = input_w;
    for (size_t i = 0; i < conv.size(); ++i) {
      const auto& l = conv[i];
      if (l.kernel_h > h || l.kernel_w > w || l.stride < 1)
        throw ConfigError("conv layer " + std::to_string(i + 1) + " kernel " +
                          std::to_string(l.kernel_h) + "x" + std::to_string(l.kernel_w) +
                          " does not fit " + std::to_string(h) + "x" + std::to_string(w));
      h = (h - l.kernel_h) / l.stride + 1;
      w = (w - l.kernel_w) / l.stride + 1;
      if (h < 1 || w < 1)
        throw ConfigError("conv layer " + std::to_string(i + 1) + " collapses the spatial map");
      out.emplace_back(h, w);
    }
    return out;
  }

  std::pair<int, int> tap_size() const {
    if (tap_layer < 1 || tap_layer > static_cast<int>(conv.size()))
      throw ConfigError("tap layer " + std::to_string(tap_layer) + " out of range");
    return layer_sizes()[tap_layer - 1];
  }
};

/// Forward pass artifacts: head output plus every conv layer's activation,
/// kept so auxiliary losses can attach to intermediate maps.
template <typename S>
struct ForwardTrace {
  Tensor<S> output;
  std::vector<Tensor<S>> conv_outputs;

  const Tensor<S>& layer(int index_1based) const {
    if (index_1based < 1 || index_1based > static_cast<int>(conv_outputs.size()))
      throw IndexError("layer " + std::to_string(index_1based) + " out of range");
    return conv_outputs[static_cast<size_t>(index_1based - 1)];
  }
};

/// Convolutional network with a small fully-connected head. Both the policy
/// nets and the reward net are instances of this class; builders below pin
/// the paper architectures.
template <typename S>
class ConvNet {
 public:
  ConvNet(NetSpec spec, uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
    spec_.layer_sizes();  // validates
    Rng rng(seed);
    int c_in = spec_.input_channels;
    for (const auto& l : spec_.conv) {
      const S bound = S(1) / std::sqrt(static_cast<S>(c_in * l.kernel_h * l.kernel_w));
      conv_w_.push_back(Tensor<S>::uniform({l.out_channels, c_in, l.kernel_h, l.kernel_w},
                                           bound, rng, true));
      conv_b_.push_back(Tensor<S>::zeros({l.out_channels}, true));
      c_in = l.out_channels;
    }
    const auto sizes = spec_.layer_sizes();
    const int flat = spec_.conv.back().out_channels * sizes.back().first * sizes.back().second;
    if (spec_.hidden_units > 0) {
      const S b1 = S(1) / std::sqrt(static_cast<S>(flat));
      fc_w_.push_back(Tensor<S>::uniform({spec_.hidden_units, flat}, b1, rng, true));
      fc_b_.push_back(Tensor<S>::zeros({spec_.hidden_units}, true));
      const S b2 = S(1) / std::sqrt(static_cast<S>(spec_.hidden_units));
      fc_w_.push_back(Tensor<S>::uniform({spec_.output_dim, spec_.hidden_units}, b2, rng, true));
      fc_b_.push_back(Tensor<S>::zeros({spec_.output_dim}, true));
    } else {
      const S b1 = S(1) / std::sqrt(static_cast<S>(flat));
      fc_w_.push_back(Tensor<S>::uniform({spec_.output_dim, flat}, b1, rng, true));
      fc_b_.push_back(Tensor<S>::zeros({spec_.output_dim}, true));
    }
    collect_params();
  }

  const NetSpec& spec() const { return spec_; }
  uint64_t seed() const { return seed_; }
  std::pair<int, int> tap_resolution() const { return spec_.tap_size(); }
  int default_tap() const { return spec_.tap_layer; }

  std::vector<Tensor<S>>& params() { return params_; }
  const std::vector<Tensor<S>>& params() const { return params_; }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  ForwardTrace<S> forward(const Tensor<S>& input, const GmdMask<S>* gmd = nullptr) const {
    if (input.rank() != 3 || input.dim(0) != spec_.input_channels ||
        input.dim(1) != spec_.input_h || input.dim(2) != spec_.input_w)
      throw DimensionError("forward: input " + shape_str(input.shape()) + ", expected [" +
                           std::to_string(spec_.input_channels) + "," +
                           std::to_string(spec_.input_h) + "," + std::to_string(spec_.input_w) +
                           "]");
    ForwardTrace<S> trace;
    Tensor<S> x = input;
    for (size_t i = 0; i < spec_.conv.size(); ++i) {
      const auto& l = spec_.conv[i];
      Tensor<S> y = bias_channels(conv2d(x, conv_w_[i], l.stride), conv_b_[i]);
      y = l.activation == Activation::Relu ? relu(y) : leaky_relu(y, static_cast<S>(l.leaky_slope));
      if (gmd && gmd->layer_index == static_cast<int>(i + 1)) y = apply_gmd(y, *gmd);
      trace.conv_outputs.push_back(y);
      x = y;
    }
    Tensor<S> flat = flatten(x);
    if (spec_.hidden_units > 0) {
      Tensor<S> hidden = fully_connected(flat, fc_w_[0], fc_b_[0]);
      const auto& l = spec_.conv.back();
      hidden = l.activation == Activation::Relu ? relu(hidden)
                                                : leaky_relu(hidden, static_cast<S>(l.leaky_slope));
      trace.output = fully_connected(hidden, fc_w_[1], fc_b_[1]);
    } else {
      trace.output = fully_connected(flat, fc_w_[0], fc_b_[0]);
    }
    return trace;
  }

  void save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json j;
    j["format"] = "gazeloss-net-v1";
    j["kind"] = spec_.kind;
    j["seed"] = seed_;
    j["input"] = {spec_.input_channels, spec_.input_h, spec_.input_w};
    j["tap_layer"] = spec_.tap_layer;
    j["hidden_units"] = spec_.hidden_units;
    j["output_dim"] = spec_.output_dim;
    nlohmann::json conv = nlohmann::json::array();
    for (const auto& l : spec_.conv)
      conv.push_back({{"out_channels", l.out_channels},
                      {"kernel", {l.kernel_h, l.kernel_w}},
                      {"stride", l.stride},
                      {"activation", to_string(l.activation)},
                      {"leaky_slope", l.leaky_slope}});
    j["conv"] = conv;
    nlohmann::json names = nlohmann::json::array();
    for (size_t i = 0; i < params_.size(); ++i) {
      const std::string name = param_name(i);
      names.push_back(name + ".gzt");
      write_gzt((fs::path(dir) / (name + ".gzt")).string(), params_[i]);
    }
    j["params"] = names;
    std::ofstream os(fs::path(dir) / "net.json", std::ios::trunc);
    if (!os) throw IoError("cannot write " + dir + "/net.json");
    os << j.dump(2) << '\n';
  }

  static ConvNet load(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream is(fs::path(dir) / "net.json");
    if (!is) throw IoError("cannot open " + dir + "/net.json");
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(dir + "/net.json: " + e.what());
    }
    if (j.value("format", "") != "gazeloss-net-v1")
      throw FormatError(dir + "/net.json: unknown format");
    NetSpec spec;
    spec.kind = j.at("kind").get<std::string>();
    spec.input_channels = j.at("input")[0].get<int>();
    spec.input_h = j.at("input")[1].get<int>();
    spec.input_w = j.at("input")[2].get<int>();
    spec.tap_layer = j.at("tap_layer").get<int>();
    spec.hidden_units = j.at("hidden_units").get<int>();
    spec.output_dim = j.at("output_dim").get<int>();
    for (const auto& l : j.at("conv")) {
      ConvLayerSpec c;
      c.out_channels = l.at("out_channels").get<int>();
      c.kernel_h = l.at("kernel")[0].get<int>();
      c.kernel_w = l.at("kernel")[1].get<int>();
      c.stride = l.at("stride").get<int>();
      c.activation = activation_from_string(l.at("activation").get<std::string>());
      c.leaky_slope = l.value("leaky_slope", 0.01);
      spec.conv.push_back(c);
    }
    ConvNet net(spec, j.value("seed", uint64_t{0}));
    const auto& names = j.at("params");
    if (names.size() != net.params_.size())
      throw ValidationError(dir + ": checkpoint lists " + std::to_string(names.size()) +
                            " parameter files, net has " + std::to_string(net.params_.size()));
    for (size_t i = 0; i < net.params_.size(); ++i) {
      Tensor<S> t = read_gzt<S>((fs::path(dir) / names[i].get<std::string>()).string());
      if (t.shape() != net.params_[i].shape())
        throw ValidationError(dir + ": parameter " + param_name(i) + " has shape " +
                              shape_str(t.shape()) + ", expected " +
                              shape_str(net.params_[i].shape()));
      net.params_[i].vec() = t.vec();
    }
    return net;
  }

 private:
  static std::string param_name(size_t flat_index) {
    // conv params come in (w,b) pairs first, then fc pairs.
    return "p" + std::to_string(flat_index);
  }

  void collect_params() {
    params_.clear();
    for (size_t i = 0; i < conv_w_.size(); ++i) {
      params_.push_back(conv_w_[i]);
      params_.push_back(conv_b_[i]);
    }
    for (size_t i = 0; i < fc_w_.size(); ++i) {
      params_.push_back(fc_w_[i]);
      params_.push_back(fc_b_[i]);
    }
  }

  NetSpec spec_;
  uint64_t seed_ = 0;
  std::vector<Tensor<S>> conv_w_, conv_b_;
  std::vector<Tensor<S>> fc_w_, fc_b_;
  std::vector<Tensor<S>> params_;
};

// ---------------------------------------------------------------------------
// Paper architectures. Kernel/stride defaults reconstruct the stated tap
// resolutions at 84x84 input; the builders reject specs whose tap size
// drifts from those unless the caller explicitly acknowledges it.
// ---------------------------------------------------------------------------

inline NetSpec bc_net_spec(int num_actions) {
  NetSpec s;
  s.kind = "bc";
  s.input_channels = 1;
  s.conv = {{32, 8, 8, 2, Activation::Relu},
            {64, 4, 4, 2, Activation::Relu},
            {64, 3, 3, 1, Activation::Relu}};
  s.tap_layer = 3;  // 64 x 16 x 16
  s.output_dim = num_actions;
  return s;
}

inline NetSpec bco_net_spec(int num_actions) {
  NetSpec s;
  s.kind = "bco";
  s.input_channels = 4;
  s.conv = {{32, 8, 8, 4, Activation::Relu},
            {32, 4, 4, 2, Activation::Relu},
            {64, 3, 3, 1, Activation::Relu}};
  s.tap_layer = 2;  // 32 x 9 x 9
  s.output_dim = num_actions;
  return s;
}

inline NetSpec trex_net_spec() {
  NetSpec s;
  s.kind = "trex";
  s.input_channels = 4;
  s.conv = {{16, 7, 7, 3, Activation::LeakyRelu},
            {16, 5, 5, 2, Activation::LeakyRelu},
            {16, 3, 3, 1, Activation::LeakyRelu},
            {16, 3, 3, 1, Activation::LeakyRelu}};
  s.tap_layer = 1;  // 16 x 26 x 26
  s.hidden_units = 64;
  s.output_dim = 1;
  return s;
}

namespace detail {

inline void check_tap(const NetSpec& spec, int want_h, int want_w, bool acknowledge_mismatch) {
  const auto [h, w] = spec.tap_size();
  if ((h != want_h || w != want_w) && !acknowledge_mismatch)
    throw ConfigError("tap layer " + std::to_string(spec.tap_layer) + " produces " +
                      std::to_string(h) + "x" + std::to_string(w) + ", expected " +
                      std::to_string(want_h) + "x" + std::to_string(want_w) +
                      " (pass the acknowledge flag to override)");
}

}  // namespace detail

/// Single-frame policy net; the gaze loss attaches to the 16x16 third layer.
template <typename S>
ConvNet<S> build_bc_net(int num_actions, uint64_t seed, const NetSpec* custom = nullptr,
                        bool acknowledge_tap_mismatch = false) {
  if (num_actions < 2) throw ConfigError("bc net needs at least 2 actions");
  NetSpec spec = custom ? *custom : bc_net_spec(num_actions);
  spec.kind = "bc";
  spec.output_dim = num_actions;
  detail::check_tap(spec, 16, 16, acknowledge_tap_mismatch);
  return ConvNet<S>(spec, seed);
}

/// Four-frame policy net; the gaze loss attaches to the 9x9 second layer.
template <typename S>
ConvNet<S> build_bco_net(int num_actions, uint64_t seed, const NetSpec* custom = nullptr,
                         bool acknowledge_tap_mismatch = false) {
  if (num_actions < 2) throw ConfigError("bco net needs at least 2 actions");
  NetSpec spec = custom ? *custom : bco_net_spec(num_actions);
  spec.kind = "bco";
  spec.output_dim = num_actions;
  detail::check_tap(spec, 9, 9, acknowledge_tap_mismatch);
  return ConvNet<S>(spec, seed);
}

/// Reward net scoring one stacked state; the gaze loss attaches to the
/// 26x26 first layer.
template <typename S>
ConvNet<S> build_trex_net(uint64_t seed, const NetSpec* custom = nullptr,
                          bool acknowledge_tap_mismatch = false) {
  NetSpec spec = custom ? *custom : trex_net_spec();
  spec.kind = "trex";
  spec.output_dim = 1;
  detail::check_tap(spec, 26, 26, acknowledge_tap_mismatch);
  return ConvNet<S>(spec, seed);
}

}  // namespace gazeloss
