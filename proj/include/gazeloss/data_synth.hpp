#pragma once

#include "gazeloss/dataset.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace gazeloss {

/// Controls for the synthetic attention-patch tasks. The label of a BC
/// sample depends only on the stripe orientation inside one small static
/// patch; checkerboard distractors move across the stack and carry no label
/// information, so motion points away from the informative region while
/// gaze points at it.
struct SynthTaskSpec {
  int grid = 84;
  int patch = 12;
  int anchors = 3;        // patch centers snap to an anchors x anchors lattice
  int anchor_jitter = 3;  // +- pixels of anchor displacement
  double pattern_lo = 0.25;
  double pattern_hi = 0.85;
  double noise = 0.15;  // additive uniform noise amplitude, must stay below contrast
  int num_classes = 2;  // stripe orientations (2..4)
  int distractors = 3;
  int distractor_speed = 3;  // pixels per frame
  int fixations_per_state = 3;
  double fix_jitter = 2.0;     // sigma of fixation placement around the patch center
  double px_per_degree = 5.0;  // synthetic screen geometry
  uint64_t seed = 0;

  // trex task
  int raw_frames = 120;      // per trajectory; groups of 4 after frame skip
  int beacon = 10;           // reward sprite size
  double beacon_value = 0.95;

  void validate() const;
  ScreenGeometry geometry() const {
    return ScreenGeometry{static_cast<double>(grid), static_cast<double>(grid),
                          grid / px_per_degree, grid / px_per_degree};
  }

  static SynthTaskSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct BcSample {
  FrameStack<float> stack;
  int label = 0;
  std::vector<Fixation> fixations;
};

/// Renders one BC sample deterministically from (spec.seed, index).
/// distractor_stream perturbs only the distractor and noise randomness,
/// leaving the informative patch and label untouched.
BcSample synth_bc_sample(const SynthTaskSpec& spec, uint64_t index,
                         uint64_t distractor_stream = 0);

/// Generates a labeled BC dataset under out_dir and returns the manifest path.
std::string gen_bc_dataset(const SynthTaskSpec& spec, int n_samples, const std::string& out_dir);

struct TrexTrajectory {
  std::vector<GridX<float>> frames;
  std::vector<Fixation> fixations;  // frame_id = raw frame index
  std::vector<int> reward_groups;   // group indices carrying the beacon
  double trajectory_return = 0;
};

/// Renders one scripted trajectory; trajectory `index` of `n_trajectories`
/// carries a return that strictly increases with its index.
TrexTrajectory synth_trex_trajectory(const SynthTaskSpec& spec, int index, int n_trajectories,
                                     int raw_frames);

/// Generates a return-ranked trajectory dataset and returns the manifest path.
std::string gen_trex_dataset(const SynthTaskSpec& spec, int n_trajectories, int raw_frames,
                             const std::string& out_dir);

}  // namespace gazeloss
