#pragma once

#include "gazeloss/gaze.hpp"
#include "gazeloss/gzt.hpp"
#include "gazeloss/losses.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace gazeloss {

/// Dataset manifest ("gazeloss-dataset-v1"): screen geometry, then either
/// labeled samples (bc task; each sample is a 4-frame stack) or ranked
/// trajectories (trex task). Frame files are GZT1 (rank-2 one frame, rank-3
/// a run of frames) or 8-bit PGM; fixation logs follow the gaze CSV format.
struct DatasetSample {
  std::vector<std::string> frame_files;
  int action = 0;
  std::string fixation_file;  // empty = no gaze recorded
};

struct DatasetTrajectory {
  std::vector<std::string> frame_files;
  double trajectory_return = 0;
  std::string fixation_file;
  std::string name;
};

struct DatasetManifest {
  std::string task;  // "bc" | "trex"
  int num_actions = 0;
  ScreenGeometry screen;
  std::vector<DatasetSample> samples;
  std::vector<DatasetTrajectory> trajectories;
  std::string root_dir;

  static DatasetManifest load(const std::string& path) {
    namespace fs = std::filesystem;
    std::ifstream is(path);
    if (!is) throw IoError("cannot open dataset manifest " + path);
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ": " + e.what());
    }
    if (j.value("format", "") != "gazeloss-dataset-v1")
      throw FormatError(path + ": unknown dataset format");
    DatasetManifest m;
    m.root_dir = fs::path(path).parent_path().string();
    m.task = j.at("task").get<std::string>();
    if (m.task != "bc" && m.task != "trex")
      throw ValidationError(path + ": task must be 'bc' or 'trex'");
    const auto& sc = j.at("screen");
    m.screen.width_px = sc.at("width_px").get<double>();
    m.screen.height_px = sc.at("height_px").get<double>();
    m.screen.width_deg = sc.at("width_deg").get<double>();
    m.screen.height_deg = sc.at("height_deg").get<double>();
    m.screen.validate();
    if (m.task == "bc") {
      m.num_actions = j.at("num_actions").get<int>();
      if (m.num_actions < 2) throw ValidationError(path + ": num_actions must be >= 2");
      for (const auto& s : j.at("samples")) {
        DatasetSample d;
        for (const auto& f : s.at("frames")) d.frame_files.push_back(f.get<std::string>());
        d.action = s.at("action").get<int>();
        if (d.action < 0 || d.action >= m.num_actions)
          throw ValidationError(path + ": sample action " + std::to_string(d.action) +
                                " out of range");
        d.fixation_file = s.value("fixations", "");
        m.samples.push_back(std::move(d));
      }
    } else {
      for (const auto& t : j.at("trajectories")) {
        DatasetTrajectory d;
        for (const auto& f : t.at("frames")) d.frame_files.push_back(f.get<std::string>());
        d.trajectory_return = t.at("return").get<double>();
        d.fixation_file = t.value("fixations", "");
        d.name = t.value("name", "traj" + std::to_string(m.trajectories.size()));
        m.trajectories.push_back(std::move(d));
      }
    }
    return m;
  }

  void save(const std::string& path) const {
    nlohmann::json j;
    j["format"] = "gazeloss-dataset-v1";
    j["task"] = task;
    j["screen"] = {{"width_px", screen.width_px},
                   {"height_px", screen.height_px},
                   {"width_deg", screen.width_deg},
                   {"height_deg", screen.height_deg}};
    if (task == "bc") {
      j["num_actions"] = num_actions;
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& s : samples) {
        nlohmann::json e;
        e["frames"] = s.frame_files;
        e["action"] = s.action;
        if (!s.fixation_file.empty()) e["fixations"] = s.fixation_file;
        arr.push_back(std::move(e));
      }
      j["samples"] = arr;
    } else {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& t : trajectories) {
        nlohmann::json e;
        e["name"] = t.name;
        e["frames"] = t.frame_files;
        e["return"] = t.trajectory_return;
        if (!t.fixation_file.empty()) e["fixations"] = t.fixation_file;
        arr.push_back(std::move(e));
      }
      j["trajectories"] = arr;
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path);
    os << j.dump(2) << '\n';
  }

  /// Content hash over the manifest file and every referenced file, in
  /// listing order.
  uint64_t content_hash(const std::string& manifest_path) const {
    namespace fs = std::filesystem;
    uint64_t h = hash_file(manifest_path, 0xcbf29ce484222325ull);
    auto visit = [&](const std::vector<std::string>& files, const std::string& fix) {
      for (const auto& f : files) h = hash_file((fs::path(root_dir) / f).string(), h);
      if (!fix.empty()) h = hash_file((fs::path(root_dir) / fix).string(), h);
    };
    for (const auto& s : samples) visit(s.frame_files, s.fixation_file);
    for (const auto& t : trajectories) visit(t.frame_files, t.fixation_file);
    return h;
  }

 private:
  static uint64_t hash_file(const std::string& path, uint64_t h) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path + " while hashing dataset");
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size(), h);
  }
};

// ---------------------------------------------------------------------------
// Frame and gaze loading.
// ---------------------------------------------------------------------------

/// Reads the listed files into a flat frame sequence. GZT1 rank-3 files
/// contribute their leading-dimension slices in order.
inline std::vector<GridX<float>> load_frames(const std::string& root,
                                             const std::vector<std::string>& files) {
  namespace fs = std::filesystem;
  std::vector<GridX<float>> out;
  for (const auto& f : files) {
    const std::string path = (fs::path(root) / f).string();
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".pgm") {
      out.push_back(read_pgm<float>(path));
      continue;
    }
    Tensor<float> t = read_gzt<float>(path);
    if (t.rank() == 2) {
      out.push_back(t.grid());
    } else if (t.rank() == 3) {
      const int d = t.dim(0), h = t.dim(1), w = t.dim(2);
      const int64_t plane = static_cast<int64_t>(h) * w;
      for (int i = 0; i < d; ++i)
        out.push_back(Eigen::Map<const GridX<float>>(t.data() + i * plane, h, w));
    } else {
      throw FormatError(path + ": frame tensors must be rank 2 or 3, got " +
                        shape_str(t.shape()));
    }
  }
  return out;
}

/// BC/BCO view of a dataset: stacks, labels, gaze rendered at input
/// resolution, and the motion-heatmap baseline per stack.
struct LoadedBcDataset {
  std::vector<FrameStack<float>> stacks;
  std::vector<int> actions;
  std::vector<GazeHeatmap<float>> gaze;
  std::vector<GazeHeatmap<float>> motion;
  int num_actions = 0;
  int h = 0, w = 0;

  size_t size() const { return stacks.size(); }
};

inline LoadedBcDataset load_bc_dataset(const DatasetManifest& m) {
  namespace fs = std::filesystem;
  if (m.task != "bc") throw ValidationError("expected a bc dataset, manifest says '" + m.task + "'");
  if (m.samples.empty()) throw ValidationError("dataset has no samples");
  LoadedBcDataset out;
  out.num_actions = m.num_actions;
  for (size_t i = 0; i < m.samples.size(); ++i) {
    const auto& s = m.samples[i];
    auto frames = load_frames(m.root_dir, s.frame_files);
    if (frames.size() != 4)
      throw ValidationError("sample " + std::to_string(i) + " lists " +
                            std::to_string(frames.size()) + " frames, expected a 4-frame stack");
    FrameStack<float> st;
    for (int k = 0; k < 4; ++k) st.frames[k] = std::move(frames[k]);
    st.validate();
    if (out.h == 0) {
      out.h = st.rows();
      out.w = st.cols();
    } else if (st.rows() != out.h || st.cols() != out.w) {
      throw ValidationError("sample " + std::to_string(i) + " resolution differs from dataset");
    }
    std::vector<Fixation> fixations;
    if (!s.fixation_file.empty()) {
      auto grouped = parse_fixation_log((fs::path(m.root_dir) / s.fixation_file).string(), m.screen);
      for (auto& [frame, fs_] : grouped)
        fixations.insert(fixations.end(), fs_.begin(), fs_.end());
    }
    out.gaze.push_back(render_heatmap<float>(fixations, m.screen, out.h, out.w));
    out.motion.push_back(motion_heatmap(st));
    out.stacks.push_back(std::move(st));
    out.actions.push_back(s.action);
  }
  return out;
}

/// T-REX view: subsampled trajectory stacks with per-stack gaze.
struct LoadedTrexDataset {
  std::vector<SubsampledTrajectory<float>> demos;
  int h = 0, w = 0;
};

inline LoadedTrexDataset load_trex_dataset(const DatasetManifest& m) {
  namespace fs = std::filesystem;
  if (m.task != "trex")
    throw ValidationError("expected a trex dataset, manifest says '" + m.task + "'");
  if (m.trajectories.size() < 2) throw ValidationError("trex dataset needs >= 2 trajectories");
  LoadedTrexDataset out;
  for (const auto& t : m.trajectories) {
    auto frames = load_frames(m.root_dir, t.frame_files);
    if (frames.empty()) throw ValidationError("trajectory '" + t.name + "' has no frames");
    const int h = static_cast<int>(frames[0].rows());
    const int w = static_cast<int>(frames[0].cols());
    if (out.h == 0) {
      out.h = h;
      out.w = w;
    } else if (h != out.h || w != out.w) {
      throw ValidationError("trajectory '" + t.name + "' resolution differs from dataset");
    }
    std::vector<GridX<float>> gaze_per_frame;
    if (!t.fixation_file.empty()) {
      auto grouped =
          parse_fixation_log((fs::path(m.root_dir) / t.fixation_file).string(), m.screen);
      gaze_per_frame.assign(frames.size(), GridX<float>::Zero(h, w));
      for (auto& [frame_id, fixes] : grouped) {
        if (frame_id >= static_cast<int64_t>(frames.size()))
          throw ValidationError("trajectory '" + t.name + "' has fixations for frame " +
                                std::to_string(frame_id) + " beyond its " +
                                std::to_string(frames.size()) + " frames");
        gaze_per_frame[static_cast<size_t>(frame_id)] =
            render_heatmap<float>(fixes, m.screen, h, w).grid;
      }
    }
    SubsampledTrajectory<float> demo = subsample_trajectory(frames, gaze_per_frame);
    demo.source_return = t.trajectory_return;
    demo.name = t.name;
    out.demos.push_back(std::move(demo));
  }
  return out;
}

}  // namespace gazeloss
