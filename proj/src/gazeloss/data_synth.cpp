#include "gazeloss/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace gazeloss {

namespace {

namespace fs = std::filesystem;

// Sub-stream tags for per-sample seed derivation.
constexpr uint64_t kPatchStream = 0x10;
constexpr uint64_t kDistractorStream = 0x20;
constexpr uint64_t kGazeStream = 0x30;

struct Rect {
  int y = 0, x = 0, h = 0, w = 0;
  bool overlaps(const Rect& o) const {
    return y < o.y + o.h && o.y < y + h && x < o.x + o.w && o.x < x + w;
  }
};

/// Stripe/checker pattern value at (r,c) for a pattern id. Ids 0..3 are the
/// class patterns (vertical, horizontal, two diagonals); id 4 is the
/// distractor checkerboard.
double pattern_value(int id, int r, int c, double lo, double hi) {
  bool on = false;
  switch (id) {
    case 0: on = (c % 4) < 2; break;
    case 1: on = (r % 4) < 2; break;
    case 2: on = ((r + c) % 4) < 2; break;
    case 3: on = ((r - c) % 4 + 4) % 4 < 2; break;
    default: on = ((r / 2 + c / 2) % 2) == 0; break;
  }
  return on ? hi : lo;
}

void draw_pattern(GridX<float>& img, const Rect& rect, int id, double lo, double hi) {
  const int g = static_cast<int>(img.rows());
  for (int r = 0; r < rect.h; ++r)
    for (int c = 0; c < rect.w; ++c) {
      const int yy = rect.y + r, xx = rect.x + c;
      if (yy < 0 || yy >= g || xx < 0 || xx >= g) continue;
      img(yy, xx) = static_cast<float>(pattern_value(id, r, c, lo, hi));
    }
}

void draw_beacon(GridX<float>& img, int cy, int cx, int size, double value) {
  // Plus-shaped sprite, visually distinct from the stripe patterns.
  const int g = static_cast<int>(img.rows());
  const int half = size / 2;
  const int arm = std::max(1, size / 4);
  for (int r = -half; r <= half; ++r)
    for (int c = -half; c <= half; ++c) {
      if (std::abs(r) > arm && std::abs(c) > arm) continue;
      const int yy = cy + r, xx = cx + c;
      if (yy < 0 || yy >= g || xx < 0 || xx >= g) continue;
      img(yy, xx) = static_cast<float>(value);
    }
}

void add_noise(GridX<float>& img, double amp, Rng& rng) {
  if (amp <= 0) return;
  for (Eigen::Index r = 0; r < img.rows(); ++r)
    for (Eigen::Index c = 0; c < img.cols(); ++c) {
      const double v = img(r, c) + rng.uniform_in(0.0, amp);
      img(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
}

struct MovingRect {
  Rect rect;
  int vy = 0, vx = 0;
};

/// Places `count` moving distractor rectangles that never overlap `avoid`
/// in any of the four frames.
std::vector<MovingRect> place_distractors(int count, int size, int speed, int grid,
                                          const Rect& avoid, Rng& rng) {
  std::vector<MovingRect> out;
  for (int d = 0; d < count; ++d) {
    for (int attempt = 0; attempt < 128; ++attempt) {
      MovingRect m;
      m.rect = {static_cast<int>(rng.uniform_int(grid - size)),
                static_cast<int>(rng.uniform_int(grid - size)), size, size};
      m.vy = static_cast<int>(rng.uniform_int(2 * speed + 1)) - speed;
      m.vx = static_cast<int>(rng.uniform_int(2 * speed + 1)) - speed;
      if (m.vy == 0 && m.vx == 0) m.vx = speed;
      bool ok = true;
      for (int f = 0; f < 4 && ok; ++f) {
        Rect at{m.rect.y + f * m.vy, m.rect.x + f * m.vx, size, size};
        if (at.overlaps(avoid)) ok = false;
      }
      if (ok) {
        out.push_back(m);
        break;
      }
    }
  }
  return out;
}

}  // namespace

void SynthTaskSpec::validate() const {
  if (grid < 16) throw ConfigError("synth: grid must be >= 16");
  if (patch < 4 || patch + 2 * anchor_jitter >= grid)
    throw ConfigError("synth: patch (plus jitter) must fit inside the grid");
  if (anchors < 1) throw ConfigError("synth: anchors must be >= 1");
  if (num_classes < 2 || num_classes > 4) throw ConfigError("synth: num_classes must be 2..4");
  if (!(pattern_hi > pattern_lo)) throw ConfigError("synth: pattern_hi must exceed pattern_lo");
  if (noise >= pattern_hi - pattern_lo)
    throw ConfigError("synth: noise amplitude must stay below the pattern contrast");
  if (px_per_degree <= 0) throw ConfigError("synth: px_per_degree must be positive");
  if (raw_frames < 16) throw ConfigError("synth: raw_frames must be >= 16");
  if (beacon < 2 || beacon >= grid) throw ConfigError("synth: beacon size out of range");
  geometry().validate();
}

SynthTaskSpec SynthTaskSpec::from_json(const nlohmann::json& j) {
  SynthTaskSpec s;
  s.grid = j.value("grid", s.grid);
  s.patch = j.value("patch", s.patch);
  s.anchors = j.value("anchors", s.anchors);
  s.anchor_jitter = j.value("anchor_jitter", s.anchor_jitter);
  s.pattern_lo = j.value("pattern_lo", s.pattern_lo);
  s.pattern_hi = j.value("pattern_hi", s.pattern_hi);
  s.noise = j.value("noise", s.noise);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.distractors = j.value("distractors", s.distractors);
  s.distractor_speed = j.value("distractor_speed", s.distractor_speed);
  s.fixations_per_state = j.value("fixations_per_state", s.fixations_per_state);
  s.fix_jitter = j.value("fix_jitter", s.fix_jitter);
  s.px_per_degree = j.value("px_per_degree", s.px_per_degree);
  s.seed = j.value("seed", s.seed);
  s.raw_frames = j.value("raw_frames", s.raw_frames);
  s.beacon = j.value("beacon", s.beacon);
  s.beacon_value = j.value("beacon_value", s.beacon_value);
  s.validate();
  return s;
}

nlohmann::json SynthTaskSpec::to_json() const {
  return nlohmann::json{{"grid", grid},
                        {"patch", patch},
                        {"anchors", anchors},
                        {"anchor_jitter", anchor_jitter},
                        {"pattern_lo", pattern_lo},
                        {"pattern_hi", pattern_hi},
                        {"noise", noise},
                        {"num_classes", num_classes},
                        {"distractors", distractors},
                        {"distractor_speed", distractor_speed},
                        {"fixations_per_state", fixations_per_state},
                        {"fix_jitter", fix_jitter},
                        {"px_per_degree", px_per_degree},
                        {"seed", seed},
                        {"raw_frames", raw_frames},
                        {"beacon", beacon},
                        {"beacon_value", beacon_value}};
}

BcSample synth_bc_sample(const SynthTaskSpec& spec, uint64_t index, uint64_t distractor_stream) {
  spec.validate();
  const uint64_t sample_seed = derive_seed(spec.seed, index);
  Rng patch_rng(derive_seed(sample_seed, kPatchStream));
  Rng dis_rng(derive_seed(sample_seed, kDistractorStream + distractor_stream));
  Rng gaze_rng(derive_seed(sample_seed, kGazeStream));

  BcSample out;
  out.label = static_cast<int>(patch_rng.uniform_int(spec.num_classes));

  // Anchor lattice keeps the location space small enough that a flattened
  // head can cover it from a few hundred samples.
  const int margin = spec.patch / 2 + spec.anchor_jitter + 1;
  const int span = spec.grid - 2 * margin;
  const int ai = static_cast<int>(patch_rng.uniform_int(spec.anchors));
  const int aj = static_cast<int>(patch_rng.uniform_int(spec.anchors));
  auto anchor_pos = [&](int a) {
    return spec.anchors == 1 ? margin + span / 2 : margin + a * span / (spec.anchors - 1);
  };
  const int jy = static_cast<int>(patch_rng.uniform_int(2 * spec.anchor_jitter + 1)) -
                 spec.anchor_jitter;
  const int jx = static_cast<int>(patch_rng.uniform_int(2 * spec.anchor_jitter + 1)) -
                 spec.anchor_jitter;
  const int cy = anchor_pos(ai) + jy;
  const int cx = anchor_pos(aj) + jx;
  const Rect patch{cy - spec.patch / 2, cx - spec.patch / 2, spec.patch, spec.patch};

  auto distractors = place_distractors(spec.distractors, spec.patch, spec.distractor_speed,
                                       spec.grid, patch, dis_rng);
  for (int f = 0; f < 4; ++f) {
    GridX<float> img = GridX<float>::Zero(spec.grid, spec.grid);
    for (const auto& m : distractors) {
      Rect at{m.rect.y + f * m.vy, m.rect.x + f * m.vx, m.rect.h, m.rect.w};
      draw_pattern(img, at, 4, spec.pattern_lo, spec.pattern_hi);
    }
    draw_pattern(img, patch, out.label, spec.pattern_lo, spec.pattern_hi);
    add_noise(img, spec.noise, dis_rng);
    out.stack.frames[f] = std::move(img);
  }

  for (int k = 0; k < spec.fixations_per_state; ++k) {
    Fixation fx;
    fx.frame_id = 0;
    fx.x = std::clamp(cx + gaze_rng.normal() * spec.fix_jitter, 0.0, spec.grid - 1.0);
    fx.y = std::clamp(cy + gaze_rng.normal() * spec.fix_jitter, 0.0, spec.grid - 1.0);
    out.fixations.push_back(fx);
  }
  return out;
}

namespace {

void write_fixation_csv(const std::string& path, const std::vector<Fixation>& fixations) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os << "frame_id,x,y\n";
  char buf[96];
  for (const auto& f : fixations) {
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g\n", static_cast<long long>(f.frame_id), f.x,
                  f.y);
    os << buf;
  }
}

void write_stack_gzt(const std::string& path, const FrameStack<float>& st) {
  const int h = st.rows(), w = st.cols();
  std::vector<float> data(static_cast<size_t>(4) * h * w);
  for (int f = 0; f < 4; ++f)
    Eigen::Map<GridX<float>>(data.data() + static_cast<int64_t>(f) * h * w, h, w) = st.frames[f];
  write_gzt(path, Shape{4, h, w}, data.data());
}

}  // namespace

std::string gen_bc_dataset(const SynthTaskSpec& spec, int n_samples, const std::string& out_dir) {
  spec.validate();
  if (n_samples < 1) throw ConfigError("gen_bc_dataset: n_samples must be >= 1");
  fs::create_directories(out_dir);

  std::vector<BcSample> samples(static_cast<size_t>(n_samples));
  parallel_for(n_samples, [&](int64_t i) {
    samples[static_cast<size_t>(i)] = synth_bc_sample(spec, static_cast<uint64_t>(i));
  });

  DatasetManifest m;
  m.task = "bc";
  m.num_actions = spec.num_classes;
  m.screen = spec.geometry();
  m.root_dir = out_dir;
  for (int i = 0; i < n_samples; ++i) {
    const std::string stem = "sample" + std::to_string(i);
    write_stack_gzt((fs::path(out_dir) / (stem + ".gzt")).string(), samples[i].stack);
    write_fixation_csv((fs::path(out_dir) / (stem + "_gaze.csv")).string(), samples[i].fixations);
    DatasetSample ds;
    ds.frame_files = {stem + ".gzt"};
    ds.action = samples[i].label;
    ds.fixation_file = stem + "_gaze.csv";
    m.samples.push_back(std::move(ds));
  }
  const std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
  m.save(manifest_path);
  return manifest_path;
}

TrexTrajectory synth_trex_trajectory(const SynthTaskSpec& spec, int index, int n_trajectories,
                                     int raw_frames) {
  spec.validate();
  if (raw_frames < 16) throw ConfigError("synth_trex_trajectory: raw_frames must be >= 16");
  if (n_trajectories < 2) throw ConfigError("synth_trex_trajectory: need >= 2 trajectories");
  const int groups = raw_frames / 4;
  const int eligible = groups - 3;  // groups that become some stack's newest group
  if (eligible < n_trajectories)
    throw ConfigError("synth_trex_trajectory: " + std::to_string(raw_frames) +
                      " raw frames leave only " + std::to_string(eligible) +
                      " eligible groups for " + std::to_string(n_trajectories) +
                      " distinct returns");

  const uint64_t traj_seed = derive_seed(spec.seed, 0x7000 + static_cast<uint64_t>(index));
  Rng rng(traj_seed);

  // Strictly increasing beacon counts give strictly increasing returns.
  const int k = 1 + index * (eligible - 1) / (n_trajectories - 1);

  std::vector<int> eligible_groups(static_cast<size_t>(eligible));
  std::iota(eligible_groups.begin(), eligible_groups.end(), 3);
  for (size_t i = eligible_groups.size(); i > 1; --i)
    std::swap(eligible_groups[i - 1], eligible_groups[rng.uniform_int(i)]);

  TrexTrajectory out;
  out.reward_groups.assign(eligible_groups.begin(), eligible_groups.begin() + k);
  std::sort(out.reward_groups.begin(), out.reward_groups.end());
  out.trajectory_return = static_cast<double>(k);

  std::vector<int> beacon_y(static_cast<size_t>(groups), -1);
  std::vector<int> beacon_x(static_cast<size_t>(groups), -1);
  const int bmargin = spec.beacon / 2 + 1;
  for (int g : out.reward_groups) {
    beacon_y[static_cast<size_t>(g)] =
        bmargin + static_cast<int>(rng.uniform_int(spec.grid - 2 * bmargin));
    beacon_x[static_cast<size_t>(g)] =
        bmargin + static_cast<int>(rng.uniform_int(spec.grid - 2 * bmargin));
  }

  // One long-lived moving distractor field across the whole trajectory.
  std::vector<MovingRect> distractors;
  for (int d = 0; d < spec.distractors; ++d) {
    MovingRect m;
    m.rect = {static_cast<int>(rng.uniform_int(spec.grid - spec.patch)),
              static_cast<int>(rng.uniform_int(spec.grid - spec.patch)), spec.patch, spec.patch};
    m.vy = static_cast<int>(rng.uniform_int(2 * spec.distractor_speed + 1)) - spec.distractor_speed;
    m.vx = static_cast<int>(rng.uniform_int(2 * spec.distractor_speed + 1)) - spec.distractor_speed;
    if (m.vy == 0 && m.vx == 0) m.vy = spec.distractor_speed;
    distractors.push_back(m);
  }

  for (int f = 0; f < raw_frames; ++f) {
    GridX<float> img = GridX<float>::Zero(spec.grid, spec.grid);
    const int g = f / 4;
    for (const auto& m : distractors) {
      const int period = spec.grid - spec.patch;
      auto wrap = [period](int v) { return ((v % period) + period) % period; };
      Rect at{wrap(m.rect.y + f * m.vy), wrap(m.rect.x + f * m.vx), m.rect.h, m.rect.w};
      draw_pattern(img, at, 4, spec.pattern_lo, spec.pattern_hi);
    }
    if (g < groups && beacon_y[static_cast<size_t>(g)] >= 0) {
      draw_beacon(img, beacon_y[static_cast<size_t>(g)], beacon_x[static_cast<size_t>(g)],
                  spec.beacon, spec.beacon_value);
      for (int s = 0; s < spec.fixations_per_state; ++s) {
        Fixation fx;
        fx.frame_id = f;
        fx.x = std::clamp(beacon_x[static_cast<size_t>(g)] + rng.normal() * spec.fix_jitter, 0.0,
                          spec.grid - 1.0);
        fx.y = std::clamp(beacon_y[static_cast<size_t>(g)] + rng.normal() * spec.fix_jitter, 0.0,
                          spec.grid - 1.0);
        out.fixations.push_back(fx);
      }
    }
    add_noise(img, spec.noise, rng);
    out.frames.push_back(std::move(img));
  }
  return out;
}

std::string gen_trex_dataset(const SynthTaskSpec& spec, int n_trajectories, int raw_frames,
                             const std::string& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);
  std::vector<TrexTrajectory> trajs(static_cast<size_t>(n_trajectories));
  parallel_for(n_trajectories, [&](int64_t i) {
    trajs[static_cast<size_t>(i)] =
        synth_trex_trajectory(spec, static_cast<int>(i), n_trajectories, raw_frames);
  });

  DatasetManifest m;
  m.task = "trex";
  m.screen = spec.geometry();
  m.root_dir = out_dir;
  for (int i = 0; i < n_trajectories; ++i) {
    const std::string stem = "traj" + std::to_string(i);
    const int h = spec.grid, w = spec.grid;
    std::vector<float> data(static_cast<size_t>(raw_frames) * h * w);
    for (int f = 0; f < raw_frames; ++f)
      Eigen::Map<GridX<float>>(data.data() + static_cast<int64_t>(f) * h * w, h, w) =
          trajs[i].frames[static_cast<size_t>(f)];
    write_gzt((fs::path(out_dir) / (stem + ".gzt")).string(), Shape{raw_frames, h, w},
              data.data());
    write_fixation_csv((fs::path(out_dir) / (stem + "_gaze.csv")).string(), trajs[i].fixations);
    DatasetTrajectory dt;
    dt.name = stem;
    dt.frame_files = {stem + ".gzt"};
    dt.trajectory_return = trajs[i].trajectory_return;
    dt.fixation_file = stem + "_gaze.csv";
    m.trajectories.push_back(std::move(dt));
  }
  const std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
  m.save(manifest_path);
  return manifest_path;
}

}  // namespace gazeloss
