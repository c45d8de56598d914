// gazeloss command line: gaze heatmaps, the coverage loss, gradient checks,
// synthetic data, and the three training objectives.

#include "gazeloss/data_synth.hpp"
#include "gazeloss/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

namespace fs = std::filesystem;
using namespace gazeloss;

namespace {

constexpr const char* kVersion = "gazeloss 1.0.0 (formats: GZT1, gazeloss-dataset-v1, gazeloss-run-v1, gazeloss-net-v1)";

struct ToleranceFailure {};  // tolerances missed -> exit 2, not an error report

ScreenGeometry parse_screen(const std::string& s) {
  // "1280x840:44.6x28.5"
  ScreenGeometry g;
  if (std::sscanf(s.c_str(), "%lfx%lf:%lfx%lf", &g.width_px, &g.height_px, &g.width_deg,
                  &g.height_deg) != 4)
    throw ConfigError("--screen expects WxH:DEGXxDEGY, e.g. 1280x840:44.6x28.5");
  g.validate();
  return g;
}

std::pair<int, int> parse_resolution(const std::string& s) {
  int h = 0, w = 0;
  if (std::sscanf(s.c_str(), "%dx%d", &h, &w) != 2 || h < 1 || w < 1)
    throw ConfigError("--out-res expects HxW, e.g. 84x84");
  return {h, w};
}

HeatmapFormat format_for(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") return HeatmapFormat::Csv;
  return HeatmapFormat::Pgm;
}

std::string stemmed(const std::string& path, const std::string& suffix) {
  fs::path p(path);
  return (p.parent_path() / (p.stem().string() + suffix + p.extension().string())).string();
}

int run(int argc, char** argv) {
  CLI::App app{"coverage-based gaze loss toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // heatmap
  auto* heatmap = app.add_subcommand("heatmap", "render fixation logs to gaze heatmaps");
  std::string fixations_path, screen_str = "1280x840:44.6x28.5", out_res_str = "84x84", out_path;
  int64_t only_frame = -1;
  heatmap->add_option("--fixations", fixations_path, "fixation log CSV")->required();
  heatmap->add_option("--screen", screen_str, "screen geometry WxH:DEGXxDEGY");
  heatmap->add_option("--out-res", out_res_str, "output resolution HxW");
  heatmap->add_option("--out", out_path, "output file (.pgm or .csv)")->required();
  heatmap->add_option("--frame", only_frame, "render only this frame_id");
  heatmap->callback([&] {
    const ScreenGeometry geom = parse_screen(screen_str);
    const auto [h, w] = parse_resolution(out_res_str);
    auto grouped = parse_fixation_log(fixations_path, geom);
    if (only_frame >= 0) {
      auto it = grouped.find(only_frame);
      std::vector<Fixation> fixes = it == grouped.end() ? std::vector<Fixation>{} : it->second;
      export_heatmap(render_heatmap<float>(fixes, geom, h, w), out_path, format_for(out_path));
      std::cout << out_path << '\n';
      return;
    }
    if (grouped.size() <= 1) {
      std::vector<Fixation> fixes = grouped.empty() ? std::vector<Fixation>{} : grouped.begin()->second;
      export_heatmap(render_heatmap<float>(fixes, geom, h, w), out_path, format_for(out_path));
      std::cout << out_path << '\n';
      return;
    }
    for (const auto& [frame, fixes] : grouped) {
      const std::string path = stemmed(out_path, "_frame" + std::to_string(frame));
      export_heatmap(render_heatmap<float>(fixes, geom, h, w), path, format_for(path));
      std::cout << path << '\n';
    }
  });

  // motion
  auto* motion = app.add_subcommand("motion", "motion-heatmap baseline from a 4-frame stack");
  std::string frames_dir, motion_out;
  motion->add_option("--frames", frames_dir, "directory or GZT1 file with exactly 4 frames")
      ->required();
  motion->add_option("--out", motion_out, "output file (.pgm or .csv)")->required();
  motion->callback([&] {
    std::vector<std::string> files;
    std::string root;
    if (fs::is_directory(frames_dir)) {
      root = frames_dir;
      for (const auto& e : fs::directory_iterator(frames_dir)) {
        const auto ext = e.path().extension().string();
        if (ext == ".pgm" || ext == ".gzt") files.push_back(e.path().filename().string());
      }
      std::sort(files.begin(), files.end());
    } else {
      root = fs::path(frames_dir).parent_path().string();
      files.push_back(fs::path(frames_dir).filename().string());
    }
    auto frames = load_frames(root, files);
    if (frames.size() != 4)
      throw ValidationError("motion: found " + std::to_string(frames.size()) +
                            " frames, need exactly 4");
    FrameStack<float> st;
    for (int i = 0; i < 4; ++i) st.frames[i] = std::move(frames[static_cast<size_t>(i)]);
    export_heatmap(motion_heatmap(st), motion_out, format_for(motion_out));
    std::cout << motion_out << '\n';
  });

  // cgl-eval
  auto* cgl_eval = app.add_subcommand("cgl-eval", "evaluate the coverage-based gaze loss");
  std::string gaze_path, features_path;
  double epsilon = 1e-10;
  cgl_eval->add_option("--gaze", gaze_path, "gaze heatmap CSV")->required();
  cgl_eval->add_option("--features", features_path,
                       "GZT1 tensor: rank 3 = raw feature map, rank 2 = collapsed map");
  cgl_eval->add_option("--epsilon", epsilon, "smoothing constant");
  cgl_eval->callback([&] {
    GazeHeatmap<float> g{read_heatmap_csv<float>(gaze_path)};
    Tensor<float> f = read_gzt<float>(features_path);
    if (f.rank() == 2) f = reshape(f, {1, f.dim(0), f.dim(1)});
    CollapsedMap<float> cm = collapse_normalize(f, static_cast<float>(epsilon));
    Tensor<float> loss = cgl_loss(g, cm);
    std::printf("%.6f\n", static_cast<double>(loss.item()));
  });

  // grad-check
  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient verification");
  std::string op = "cgl";
  uint64_t gc_seed = 0;
  int gc_seeds = 1;
  bool use_f64 = false;
  double tol = 0;
  grad->add_option("--op", op, "cgl|conv|softmax|bc-loss|bco-loss|trex-loss|all");
  grad->add_option("--seed", gc_seed, "base seed");
  grad->add_option("--seeds", gc_seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);
  grad->add_flag("--f64", use_f64, "check the double-precision instantiation");
  grad->add_option("--tol", tol, "override the pass tolerance");
  grad->callback([&] {
    const double tolerance = tol > 0 ? tol : (use_f64 ? 1e-6 : 1e-3);
    std::vector<std::string> ops =
        op == "all" ? grad_check_ops() : std::vector<std::string>{op};
    double worst = 0;
    for (const auto& o : ops)
      for (int s = 0; s < gc_seeds; ++s) {
        GradCheckReport r = use_f64 ? run_grad_check<double>(o, gc_seed + s, 1e-5)
                                    : run_grad_check<float>(o, gc_seed + s, 1e-3);
        worst = std::max(worst, r.max_rel_err);
        std::printf("%s seed=%llu max_rel_err=%.3e checked=%lld kink_skipped=%lld unconverged=%lld\n",
                    o.c_str(), static_cast<unsigned long long>(gc_seed + s), r.max_rel_err,
                    static_cast<long long>(r.checked), static_cast<long long>(r.skipped_kink),
                    static_cast<long long>(r.skipped_unconverged));
      }
    std::printf("max_rel_err=%.3e tolerance=%.1e\n", worst, tolerance);
    if (worst >= tolerance) throw ToleranceFailure{};
  });

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_task, spec_path, gen_out;
  int gen_n = 0, gen_raw_frames = 0;
  gen->add_option("task", gen_task, "bc|trex")->required();
  gen->add_option("--spec", spec_path, "task spec JSON (defaults apply when omitted)");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", gen_n, "samples (bc) or trajectories (trex)");
  gen->add_option("--raw-frames", gen_raw_frames, "raw frames per trex trajectory");
  gen->callback([&] {
    SynthTaskSpec spec;
    if (!spec_path.empty()) {
      std::ifstream is(spec_path);
      if (!is) throw IoError("cannot open spec " + spec_path);
      nlohmann::json j;
      try {
        is >> j;
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(spec_path + ": " + e.what());
      }
      spec = SynthTaskSpec::from_json(j);
    }
    spec.validate();
    std::string manifest;
    if (gen_task == "bc") {
      manifest = gen_bc_dataset(spec, gen_n > 0 ? gen_n : 200, gen_out);
    } else if (gen_task == "trex") {
      manifest = gen_trex_dataset(spec, gen_n > 0 ? gen_n : 10,
                                  gen_raw_frames > 0 ? gen_raw_frames : spec.raw_frames, gen_out);
    } else {
      throw ConfigError("gen-data task must be bc or trex");
    }
    std::cout << manifest << '\n';
  });

  // train
  auto* tr = app.add_subcommand("train", "run a training configuration");
  std::string train_algo, config_path;
  std::vector<std::string> overrides;
  tr->add_option("algorithm", train_algo, "bc|bco|trex")->required();
  tr->add_option("--config", config_path, "run config JSON")->required();
  tr->add_option("--set", overrides, "config overrides as key=value (repeatable)");
  tr->callback([&] {
    RunConfig cfg = RunConfig::from_json_file(config_path);
    cfg.algorithm = train_algo;
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      nlohmann::json patch = cfg.to_json();
      const std::string key = kv.substr(0, eq);
      const std::string value = kv.substr(eq + 1);
      if (!patch.contains(key)) throw ConfigError("unknown config key '" + key + "'");
      if (patch[key].is_string())
        patch[key] = value;
      else if (patch[key].is_boolean())
        patch[key] = (value == "true" || value == "1");
      else if (patch[key].is_number_integer() || patch[key].is_number_unsigned())
        patch[key] = std::stoll(value);
      else
        patch[key] = std::stod(value);
      cfg = RunConfig::from_json(patch);
    }
    RunResult r = train(cfg);
    std::cout << r.run_manifest << '\n';
  });

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on held-out data");
  std::string eval_kind, ckpt_path, data_path;
  int eval_snippets = 50, eval_snippet_len = 20;
  uint64_t eval_seed = 1;
  ev->add_option("kind", eval_kind, "policy|reward")->required();
  ev->add_option("--checkpoint", ckpt_path, "checkpoint directory")->required();
  ev->add_option("--data", data_path, "held-out dataset manifest")->required();
  ev->add_option("--snippets", eval_snippets, "held-out snippet count (reward)");
  ev->add_option("--snippet-len", eval_snippet_len, "held-out snippet length (reward)");
  ev->add_option("--seed", eval_seed, "snippet sampling seed (reward)");
  ev->callback([&] {
    nlohmann::json out;
    if (eval_kind == "policy") {
      PolicyEval pe = evaluate_policy(ckpt_path, data_path);
      out["accuracy"] = pe.accuracy;
      out["count"] = pe.count;
      out["confusion"] = pe.confusion;
    } else if (eval_kind == "reward") {
      RewardEval re = evaluate_reward(ckpt_path, data_path, eval_snippets, eval_snippet_len,
                                      eval_seed);
      out["ranking_accuracy"] = re.ranking_accuracy;
      out["spearman"] = re.spearman;
      out["snippets"] = re.snippet_count;
    } else {
      throw ConfigError("eval kind must be policy or reward");
    }
    std::cout << out.dump(2) << '\n';
  });

  // export-activations
  auto* ex = app.add_subcommand("export-activations",
                                "collapsed activation heatmap of a checkpoint layer");
  std::string ex_ckpt, ex_input, ex_out;
  int ex_layer = 0;
  double ex_eps = 1e-10;
  ex->add_option("--checkpoint", ex_ckpt, "checkpoint directory")->required();
  ex->add_option("--input", ex_input, "input tensor (GZT1, [C,H,W])")->required();
  ex->add_option("--layer", ex_layer, "1-based conv layer (default: the tap layer)");
  ex->add_option("--out", ex_out, "output file (.pgm or .csv)")->required();
  ex->add_option("--epsilon", ex_eps, "smoothing constant");
  ex->callback([&] {
    ConvNet<float> net = ConvNet<float>::load(ex_ckpt);
    Tensor<float> input = read_gzt<float>(ex_input);
    if (input.rank() == 2) input = reshape(input, {1, input.dim(0), input.dim(1)});
    NoGradGuard no_grad;
    ForwardTrace<float> trace = net.forward(input);
    const int layer = ex_layer > 0 ? ex_layer : net.default_tap();
    GazeHeatmap<float> act = activation_heatmap(trace.layer(layer), static_cast<float>(ex_eps));
    export_heatmap(act, ex_out, format_for(ex_out));
    std::cout << ex_out << '\n';
  });

  CLI11_PARSE(app, argc, argv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ToleranceFailure&) {
    return 2;
  } catch (const Error& e) {
    std::cerr << e.code() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "E_INTERNAL: " << e.what() << '\n';
    return 1;
  }
}
