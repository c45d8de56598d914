#pragma once

#include "gazeloss/dataset.hpp"
#include "gazeloss/gradcheck.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace gazeloss {

/// One training run: algorithm, attention variant, hyperparameters, data.
/// Zero-valued numeric fields fall back to the per-algorithm defaults.
struct RunConfig {
  std::string algorithm;           // bc | bco | trex
  std::string attention = "none";  // none | cgl | gmd | motion-cgl
  double alpha = 0.01;
  double epsilon = 1e-10;
  int attach_layer = 0;              // 0 = the algorithm's default tap
  std::string cgl_sign = "penalty";  // penalty | literal
  int batch_size = 0;                // bc 50, bco 32, trex 1 pair
  int steps = 100;
  double learning_rate = 0;  // bc/bco 1e-4, trex 5e-5
  uint64_t seed = 0;
  std::string dataset;
  std::string eval_dataset;  // optional held-out manifest
  std::string out_dir;
  double gmd_p_base = 0.5;
  int gmd_layer = 1;
  int checkpoint_every = 0;  // 0 = final checkpoint only
  int probe_count = 8;
  int snippet_len = 20;   // trex
  int pair_count = 200;   // trex
  bool allow_ties = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int num_actions = 0;  // 0 = take from the dataset manifest

  void validate() const;
  int effective_batch() const;
  double effective_lr() const;
  int cgl_sign_value() const { return cgl_sign == "literal" ? -1 : +1; }
  bool uses_cgl() const { return attention == "cgl" || attention == "motion-cgl"; }

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig from_json_file(const std::string& path);
  nlohmann::json to_json() const;
};

struct RunResult {
  std::string run_manifest;
  std::string final_checkpoint;
  double final_total = 0;
  double final_base = 0;
  double final_cgl = 0;
  double activation_mass_start = -1;
  double activation_mass_end = -1;
  double eval_accuracy = -1;   // policy eval on eval_dataset, when given
  double eval_spearman = -1;   // reward eval on eval_dataset, when given
};

RunResult train(const RunConfig& config);

struct PolicyEval {
  double accuracy = 0;
  std::vector<std::vector<int64_t>> confusion;  // [label][prediction]
  int64_t count = 0;
};

PolicyEval evaluate_policy(const std::string& checkpoint_dir, const std::string& manifest_path);

struct RewardEval {
  double ranking_accuracy = 0;
  double spearman = 0;
  int snippet_count = 0;
};

RewardEval evaluate_reward(const std::string& checkpoint_dir, const std::string& manifest_path,
                           int snippet_count = 50, int snippet_len = 20, uint64_t seed = 1);

/// Fraction of collapsed tap-layer activation lying inside the gaze support
/// (cells with positive resampled gaze).
double activation_mass_in_gaze(const ConvNet<float>& net, const Tensor<float>& state,
                               const GazeHeatmap<float>& gaze, int tap_layer, float epsilon);

/// Spearman rank correlation with average ranks over ties.
double spearman_correlation(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace gazeloss
