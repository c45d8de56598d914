#include "gazeloss/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace gazeloss {

namespace {

namespace fs = std::filesystem;

constexpr uint64_t kInitStream = 0x1;
constexpr uint64_t kBatchStream = 0x2;
constexpr uint64_t kPairStream = 0x3;
constexpr uint64_t kGmdStream = 0x4;

std::string format_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::string hex64(uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void RunConfig::validate() const {
  if (algorithm != "bc" && algorithm != "bco" && algorithm != "trex")
    throw ConfigError("algorithm must be bc|bco|trex, got '" + algorithm + "'");
  if (attention != "none" && attention != "cgl" && attention != "gmd" &&
      attention != "motion-cgl")
    throw ConfigError("attention must be none|cgl|gmd|motion-cgl, got '" + attention + "'");
  if (attention == "gmd" && algorithm == "trex")
    throw ConfigError("attention=gmd is only available for bc and bco");
  if (cgl_sign != "penalty" && cgl_sign != "literal")
    throw ConfigError("cgl_sign must be penalty|literal");
  if (alpha < 0) throw ConfigError("alpha must be >= 0");
  if (!(epsilon > 0)) throw ConfigError("epsilon must be > 0");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (!(gmd_p_base >= 0 && gmd_p_base < 1)) throw ConfigError("gmd_p_base must be in [0,1)");
  if (dataset.empty()) throw ConfigError("dataset manifest path is required");
  if (out_dir.empty()) throw ConfigError("out_dir is required");
  if (probe_count < 0) throw ConfigError("probe_count must be >= 0");
}

int RunConfig::effective_batch() const {
  if (batch_size > 0) return batch_size;
  if (algorithm == "bc") return 50;
  if (algorithm == "bco") return 32;
  return 1;
}

double RunConfig::effective_lr() const {
  if (learning_rate > 0) return learning_rate;
  return algorithm == "trex" ? 5e-5 : 1e-4;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  c.algorithm = j.value("algorithm", "");
  c.attention = j.value("attention", c.attention);
  c.alpha = j.value("alpha", c.alpha);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.attach_layer = j.value("attach_layer", c.attach_layer);
  c.cgl_sign = j.value("cgl_sign", c.cgl_sign);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  c.dataset = j.value("dataset", c.dataset);
  c.eval_dataset = j.value("eval_dataset", c.eval_dataset);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.gmd_p_base = j.value("gmd_p_base", c.gmd_p_base);
  c.gmd_layer = j.value("gmd_layer", c.gmd_layer);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.probe_count = j.value("probe_count", c.probe_count);
  c.snippet_len = j.value("snippet_len", c.snippet_len);
  c.pair_count = j.value("pair_count", c.pair_count);
  c.allow_ties = j.value("allow_ties", c.allow_ties);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.num_actions = j.value("num_actions", c.num_actions);
  return c;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open run config " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json RunConfig::to_json() const {
  return nlohmann::json{{"algorithm", algorithm},
                        {"attention", attention},
                        {"alpha", alpha},
                        {"epsilon", epsilon},
                        {"attach_layer", attach_layer},
                        {"cgl_sign", cgl_sign},
                        {"batch_size", batch_size},
                        {"steps", steps},
                        {"learning_rate", learning_rate},
                        {"seed", seed},
                        {"dataset", dataset},
                        {"eval_dataset", eval_dataset},
                        {"out_dir", out_dir},
                        {"gmd_p_base", gmd_p_base},
                        {"gmd_layer", gmd_layer},
                        {"checkpoint_every", checkpoint_every},
                        {"probe_count", probe_count},
                        {"snippet_len", snippet_len},
                        {"pair_count", pair_count},
                        {"allow_ties", allow_ties},
                        {"adam_beta1", adam_beta1},
                        {"adam_beta2", adam_beta2},
                        {"adam_eps", adam_eps},
                        {"num_actions", num_actions}};
}

double activation_mass_in_gaze(const ConvNet<float>& net, const Tensor<float>& state,
                               const GazeHeatmap<float>& gaze, int tap_layer, float epsilon) {
  NoGradGuard no_grad;
  ForwardTrace<float> trace = net.forward(state);
  const int tap = tap_layer > 0 ? tap_layer : net.default_tap();
  GazeHeatmap<float> act = activation_heatmap(trace.layer(tap), epsilon);
  GazeHeatmap<float> g = resample_heatmap(gaze, act.rows(), act.cols());
  double inside = 0, total = 0;
  for (int r = 0; r < act.rows(); ++r)
    for (int c = 0; c < act.cols(); ++c) {
      const double v = act.grid(r, c);
      total += v;
      if (g.grid(r, c) > 1e-6f) inside += v;
    }
  return total > 0 ? inside / total : 0.0;
}

double spearman_correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw ContractError("spearman: need two equally sized series of length >= 2");
  auto ranks = [](const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return v[i] < v[j]; });
    std::vector<double> r(n);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * (i + j) + 1.0;  // average rank over the tie run
      for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0 || vb == 0) return 0;
  return cov / std::sqrt(va * vb);
}

namespace {

Tensor<float> bc_input(const FrameStack<float>& st) {
  Tensor<float> t = Tensor<float>::zeros({1, st.rows(), st.cols()});
  Eigen::Map<GridX<float>>(t.data(), st.rows(), st.cols()) = st.frames[3];
  return t;
}

struct ProbeSet {
  std::vector<Tensor<float>> states;
  std::vector<GazeHeatmap<float>> gaze;
};

double dump_probe(const ConvNet<float>& net, const ProbeSet& probe, int tap, float epsilon,
                  const std::string& dir, const std::string& tag) {
  fs::create_directories(dir);
  double mass = 0;
  int counted = 0;
  NoGradGuard no_grad;
  for (size_t i = 0; i < probe.states.size(); ++i) {
    ForwardTrace<float> trace = net.forward(probe.states[i]);
    const int layer = tap > 0 ? tap : net.default_tap();
    GazeHeatmap<float> act = activation_heatmap(trace.layer(layer), epsilon);
    write_pgm((fs::path(dir) / (tag + "_act" + std::to_string(i) + ".pgm")).string(), act.grid);
    if (probe.gaze[i].any_positive()) {
      mass += activation_mass_in_gaze(net, probe.states[i], probe.gaze[i], layer, epsilon);
      ++counted;
    }
  }
  return counted ? mass / counted : -1.0;
}

}  // namespace

RunResult train(const RunConfig& config) {
  config.validate();
  DatasetManifest manifest = DatasetManifest::load(config.dataset);
  const bool is_trex = config.algorithm == "trex";
  if (is_trex && manifest.task != "trex")
    throw ValidationError("trex training needs a trex dataset, got task '" + manifest.task + "'");
  if (!is_trex && manifest.task != "bc")
    throw ValidationError(config.algorithm + " training needs a bc dataset, got task '" +
                          manifest.task + "'");

  fs::create_directories(config.out_dir);
  const uint64_t dataset_hash = manifest.content_hash(config.dataset);

  CglConfig<float> cgl;
  cgl.epsilon = static_cast<float>(config.epsilon);
  cgl.alpha = config.uses_cgl() ? static_cast<float>(config.alpha) : 0.0f;
  cgl.attach_layer = config.attach_layer;
  cgl.sign = config.cgl_sign_value();
  cgl.validate();

  RunResult result;
  std::vector<std::string> checkpoint_names;
  const std::string metrics_name = "metrics.csv";
  std::ofstream metrics((fs::path(config.out_dir) / metrics_name).string(), std::ios::trunc);
  if (!metrics) throw IoError("cannot write metrics under " + config.out_dir);
  metrics << "step,total,base,cgl\n";

  AdamState<float> adam;
  auto setup_adam = [&](std::vector<Tensor<float>>& params) {
    adam = AdamState<float>::for_params(params, static_cast<float>(config.effective_lr()));
    adam.beta1 = static_cast<float>(config.adam_beta1);
    adam.beta2 = static_cast<float>(config.adam_beta2);
    adam.eps_adam = static_cast<float>(config.adam_eps);
  };

  auto checkpoint = [&](ConvNet<float>& net, const std::string& name) {
    net.save((fs::path(config.out_dir) / name).string());
    checkpoint_names.push_back(name);
  };

  double last_total = 0, last_base = 0, last_cgl = 0;
  auto log_step = [&](int step, const LossParts<float>& parts) {
    last_total = parts.total.item();
    last_base = parts.base;
    last_cgl = parts.cgl;
    metrics << step << ',' << format_g(last_total) << ',' << format_g(last_base) << ','
            << format_g(last_cgl) << '\n';
  };

  if (!is_trex) {
    LoadedBcDataset data = load_bc_dataset(manifest);
    const int num_actions = config.num_actions > 0 ? config.num_actions : data.num_actions;
    const bool single_frame = config.algorithm == "bc";
    ConvNet<float> net = single_frame
                             ? build_bc_net<float>(num_actions, derive_seed(config.seed, kInitStream))
                             : build_bco_net<float>(num_actions, derive_seed(config.seed, kInitStream));
    if (data.h != net.spec().input_h || data.w != net.spec().input_w)
      throw ValidationError("dataset frames are " + std::to_string(data.h) + "x" +
                            std::to_string(data.w) + ", the " + config.algorithm +
                            " net expects " + std::to_string(net.spec().input_h) + "x" +
                            std::to_string(net.spec().input_w));

    std::vector<LabeledState<float>> all;
    all.reserve(data.size());
    for (size_t i = 0; i < data.size(); ++i) {
      LabeledState<float> s;
      s.state = single_frame ? bc_input(data.stacks[i]) : data.stacks[i].as_tensor();
      s.action = data.actions[i];
      if (config.attention == "motion-cgl")
        s.gaze = data.motion[i];
      else
        s.gaze = data.gaze[i];
      all.push_back(std::move(s));
    }

    ProbeSet probe;
    for (size_t i = 0; i < all.size() && static_cast<int>(i) < config.probe_count; ++i) {
      probe.states.push_back(all[i].state);
      probe.gaze.push_back(data.gaze[i]);
    }
    const std::string probe_dir = (fs::path(config.out_dir) / "probe").string();
    result.activation_mass_start =
        dump_probe(net, probe, cgl.attach_layer, cgl.epsilon, probe_dir, "start");

    setup_adam(net.params());
    const int batch = std::min<int>(config.effective_batch(), static_cast<int>(all.size()));
    Rng batch_rng(derive_seed(config.seed, kBatchStream));
    const auto gmd_res = net.spec().layer_sizes()[static_cast<size_t>(config.gmd_layer - 1)];

    for (int step = 0; step < config.steps; ++step) {
      std::vector<LabeledState<float>> items;
      std::vector<size_t> picked;
      items.reserve(batch);
      for (int b = 0; b < batch; ++b) {
        const size_t idx = batch_rng.uniform_int(all.size());
        picked.push_back(idx);
        items.push_back(all[idx]);
      }
      LossParts<float> parts;
      if (config.attention == "gmd") {
        // GMD replaces the auxiliary loss with gaze-modulated dropout in the
        // forward pass; the objective stays plain cross-entropy.
        GmdConfig<float> gcfg;
        gcfg.p_base = static_cast<float>(config.gmd_p_base);
        gcfg.layer_index = config.gmd_layer;
        Tensor<float> nll_sum;
        for (int b = 0; b < batch; ++b) {
          GazeHeatmap<float> g =
              resample_heatmap(items[static_cast<size_t>(b)].gaze, gmd_res.first, gmd_res.second);
          GmdMask<float> mask = gmd_mask(
              g, gcfg, derive_seed(config.seed, kGmdStream + 2 * (uint64_t(step) * batch + b)));
          ForwardTrace<float> trace = net.forward(items[static_cast<size_t>(b)].state, &mask);
          Tensor<float> nll =
              softmax_cross_entropy(trace.output, items[static_cast<size_t>(b)].action);
          nll_sum = nll_sum.defined() ? add(nll_sum, nll) : nll;
        }
        parts.total = nll_sum;
        parts.base = nll_sum.item();
      } else {
        parts = single_frame ? bc_loss<float>(net, items, cgl) : bco_loss<float>(net, items, cgl);
      }
      net.zero_grad();
      backward(parts.total);
      adam_step(net.params(), adam);
      log_step(step, parts);
      if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
          step + 1 < config.steps)
        checkpoint(net, "checkpoint_" + std::to_string(step + 1));
    }
    checkpoint(net, "checkpoint_final");
    result.activation_mass_end =
        dump_probe(net, probe, cgl.attach_layer, cgl.epsilon, probe_dir, "end");
  } else {
    LoadedTrexDataset data = load_trex_dataset(manifest);
    ConvNet<float> net = build_trex_net<float>(derive_seed(config.seed, kInitStream));
    if (data.h != net.spec().input_h || data.w != net.spec().input_w)
      throw ValidationError("dataset frames are " + std::to_string(data.h) + "x" +
                            std::to_string(data.w) + ", the trex net expects " +
                            std::to_string(net.spec().input_h) + "x" +
                            std::to_string(net.spec().input_w));
    std::vector<RankedSnippetPair<float>> pairs =
        sample_pairs(data.demos, config.pair_count, config.snippet_len,
                     derive_seed(config.seed, kPairStream), config.allow_ties);

    ProbeSet probe;
    for (const auto& demo : data.demos) {
      for (int t = 0; t < demo.length() && static_cast<int>(probe.states.size()) < config.probe_count;
           ++t) {
        if (!demo.stack_gaze[static_cast<size_t>(t)].any_positive()) continue;
        probe.states.push_back(demo.stacks[static_cast<size_t>(t)]);
        probe.gaze.push_back(demo.stack_gaze[static_cast<size_t>(t)]);
      }
      if (static_cast<int>(probe.states.size()) >= config.probe_count) break;
    }
    const std::string probe_dir = (fs::path(config.out_dir) / "probe").string();
    result.activation_mass_start =
        dump_probe(net, probe, cgl.attach_layer, cgl.epsilon, probe_dir, "start");

    setup_adam(net.params());
    const int batch = std::max(1, std::min<int>(config.effective_batch(),
                                                static_cast<int>(pairs.size())));
    for (int step = 0; step < config.steps; ++step) {
      std::vector<RankedSnippetPair<float>> slice;
      for (int b = 0; b < batch; ++b)
        slice.push_back(pairs[(static_cast<size_t>(step) * batch + b) % pairs.size()]);
      LossParts<float> parts = trex_loss<float>(net, slice, cgl);
      net.zero_grad();
      backward(parts.total);
      adam_step(net.params(), adam);
      log_step(step, parts);
      if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
          step + 1 < config.steps)
        checkpoint(net, "checkpoint_" + std::to_string(step + 1));
    }
    checkpoint(net, "checkpoint_final");
    result.activation_mass_end =
        dump_probe(net, probe, cgl.attach_layer, cgl.epsilon, probe_dir, "end");
  }

  result.final_total = last_total;
  result.final_base = last_base;
  result.final_cgl = last_cgl;
  result.final_checkpoint = (fs::path(config.out_dir) / "checkpoint_final").string();

  nlohmann::json run;
  run["format"] = "gazeloss-run-v1";
  run["config"] = config.to_json();
  run["dataset_hash"] = hex64(dataset_hash);
  run["metrics_csv"] = metrics_name;
  run["checkpoints"] = checkpoint_names;
  run["final"] = {{"total", result.final_total},
                  {"base", result.final_base},
                  {"cgl", result.final_cgl}};
  run["probe"] = {{"activation_mass_start", result.activation_mass_start},
                  {"activation_mass_end", result.activation_mass_end}};

  if (!config.eval_dataset.empty()) {
    if (is_trex) {
      RewardEval ev = evaluate_reward(result.final_checkpoint, config.eval_dataset, 50,
                                      config.snippet_len, derive_seed(config.seed, 0x9));
      result.eval_accuracy = ev.ranking_accuracy;
      result.eval_spearman = ev.spearman;
      run["eval"] = {{"ranking_accuracy", ev.ranking_accuracy},
                     {"spearman", ev.spearman},
                     {"snippets", ev.snippet_count}};
    } else {
      PolicyEval ev = evaluate_policy(result.final_checkpoint, config.eval_dataset);
      result.eval_accuracy = ev.accuracy;
      run["eval"] = {{"accuracy", ev.accuracy}, {"count", ev.count}};
    }
  }

  metrics.close();
  const std::string run_path = (fs::path(config.out_dir) / "run.json").string();
  std::ofstream os(run_path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + run_path);
  os << run.dump(2) << '\n';
  result.run_manifest = run_path;
  return result;
}

PolicyEval evaluate_policy(const std::string& checkpoint_dir, const std::string& manifest_path) {
  ConvNet<float> net = ConvNet<float>::load(checkpoint_dir);
  if (net.spec().kind != "bc" && net.spec().kind != "bco")
    throw ValidationError(checkpoint_dir + " is a '" + net.spec().kind +
                          "' checkpoint, policy evaluation needs bc or bco");
  DatasetManifest manifest = DatasetManifest::load(manifest_path);
  LoadedBcDataset data = load_bc_dataset(manifest);
  if (data.h != net.spec().input_h || data.w != net.spec().input_w)
    throw ValidationError("held-out frames are " + std::to_string(data.h) + "x" +
                          std::to_string(data.w) + ", checkpoint expects " +
                          std::to_string(net.spec().input_h) + "x" +
                          std::to_string(net.spec().input_w));
  if (data.num_actions != net.spec().output_dim)
    throw ValidationError("held-out data has " + std::to_string(data.num_actions) +
                          " actions, checkpoint has " + std::to_string(net.spec().output_dim));
  const bool single_frame = net.spec().kind == "bc";

  std::vector<int> predictions(data.size());
  parallel_for(static_cast<int64_t>(data.size()), [&](int64_t i) {
    NoGradGuard no_grad;
    Tensor<float> input = single_frame ? bc_input(data.stacks[static_cast<size_t>(i)])
                                       : data.stacks[static_cast<size_t>(i)].as_tensor();
    ForwardTrace<float> trace = net.forward(input);
    int best = 0;
    for (int a = 1; a < net.spec().output_dim; ++a)
      if (trace.output.data()[a] > trace.output.data()[best]) best = a;
    predictions[static_cast<size_t>(i)] = best;
  });

  PolicyEval ev;
  ev.count = static_cast<int64_t>(data.size());
  ev.confusion.assign(static_cast<size_t>(data.num_actions),
                      std::vector<int64_t>(static_cast<size_t>(data.num_actions), 0));
  int64_t hits = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    ev.confusion[static_cast<size_t>(data.actions[i])][static_cast<size_t>(predictions[i])]++;
    if (predictions[i] == data.actions[i]) ++hits;
  }
  ev.accuracy = static_cast<double>(hits) / static_cast<double>(data.size());
  return ev;
}

RewardEval evaluate_reward(const std::string& checkpoint_dir, const std::string& manifest_path,
                           int snippet_count, int snippet_len, uint64_t seed) {
  ConvNet<float> net = ConvNet<float>::load(checkpoint_dir);
  if (net.spec().kind != "trex")
    throw ValidationError(checkpoint_dir + " is a '" + net.spec().kind +
                          "' checkpoint, reward evaluation needs trex");
  DatasetManifest manifest = DatasetManifest::load(manifest_path);
  LoadedTrexDataset data = load_trex_dataset(manifest);
  if (snippet_count < 2) throw ContractError("evaluate_reward: need >= 2 held-out snippets");

  struct Snip {
    int traj = 0;
    int start = 0;
    double truth = 0;
    double predicted = 0;
  };
  Rng rng(seed);
  std::vector<Snip> snips;
  for (int i = 0; i < snippet_count; ++i) {
    Snip s;
    s.traj = static_cast<int>(rng.uniform_int(data.demos.size()));
    const auto& demo = data.demos[static_cast<size_t>(s.traj)];
    if (demo.length() < snippet_len)
      throw ContractError("evaluate_reward: snippet length " + std::to_string(snippet_len) +
                          " exceeds trajectory '" + demo.name + "'");
    s.start = static_cast<int>(rng.uniform_int(demo.length() - snippet_len + 1));
    s.truth = demo.source_return;
    snips.push_back(s);
  }

  parallel_for(static_cast<int64_t>(snips.size()), [&](int64_t i) {
    NoGradGuard no_grad;
    auto& s = snips[static_cast<size_t>(i)];
    const auto& demo = data.demos[static_cast<size_t>(s.traj)];
    double total = 0;
    for (int t = s.start; t < s.start + snippet_len; ++t)
      total += net.forward(demo.stacks[static_cast<size_t>(t)]).output.item();
    s.predicted = total;
  });

  RewardEval ev;
  ev.snippet_count = snippet_count;
  Rng tie_rng(derive_seed(seed, 0x11));
  int64_t pairs = 0, correct = 0;
  for (size_t i = 0; i < snips.size(); ++i)
    for (size_t j = i + 1; j < snips.size(); ++j) {
      if (snips[i].truth == snips[j].truth) continue;
      ++pairs;
      const bool truth_hi_j = snips[j].truth > snips[i].truth;
      if (snips[i].predicted == snips[j].predicted) {
        if (tie_rng.bernoulli(0.5)) ++correct;
      } else if ((snips[j].predicted > snips[i].predicted) == truth_hi_j) {
        ++correct;
      }
    }
  ev.ranking_accuracy = pairs ? static_cast<double>(correct) / static_cast<double>(pairs) : 0.0;

  std::vector<double> pred, truth;
  for (const auto& s : snips) {
    pred.push_back(s.predicted);
    truth.push_back(s.truth);
  }
  ev.spearman = spearman_correlation(pred, truth);
  return ev;
}

}  // namespace gazeloss
