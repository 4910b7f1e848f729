// panokit command-line front end: synth / train / track / eval / gradcheck.
//
// Exit codes: 0 success, 1 invalid input (flags, config, files), 2 runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "panokit/panokit.hpp"

namespace fs = std::filesystem;
using namespace panokit;

namespace {

constexpr int kInvalid = 1;
constexpr int kFailure = 2;

std::string indexed(const char* prefix, std::size_t k, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04zu.%s", prefix, k, ext);
  return buf;
}

// Sorted files in `dir` named <prefix>_*.<ext>.
std::vector<fs::path> list_files(const std::string& dir, const std::string& prefix, const std::string& ext) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.rfind(prefix + "_", 0) == 0 && e.path().extension() == "." + ext)
      out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

RunConfig config_or_default(const std::string& path) {
  RunConfig c;
  if (!path.empty()) return load_run_config(path);
  apply_env_overrides(c);
  return c;
}

SceneKind parse_kind(const std::string& s) {
  if (s == "mixed") return SceneKind::Mixed;
  if (s == "seam") return SceneKind::SeamCrossing;
  if (s == "occlusion") return SceneKind::Occlusion;
  throw ConfigError("unknown scene kind \"" + s + "\"");
}

void write_json(const std::string& path, const nlohmann::ordered_json& j) { write_file(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string config, out, kind = "mixed";
  std::size_t frames = 0;
  std::optional<std::uint64_t> seed;
};

int run_synth(const SynthArgs& a) {
  const RunConfig cfg = config_or_default(a.config);
  const std::uint64_t seed = a.seed ? *a.seed : cfg.seed;
  const std::size_t n = a.frames ? a.frames : cfg.train.clip_length;
  Rng rng(seed);
  const SceneConfig sc = sample_scene_config(parse_kind(a.kind), cfg.data.sampling(n), rng);
  const VideoSequence<double> v = synth_scene(sc, rng.fork_seed());
  fs::create_directories(a.out);
  std::vector<IndexedMask> rle;
  for (std::size_t t = 0; t < v.size(); ++t) {
    write_file((fs::path(a.out) / indexed("frame", t, "ppm")).string(), encode_ppm(v.frames[t]));
    write_pgm((fs::path(a.out) / indexed("mask", t, "pgm")).string(), v.gt[t]);
    rle.push_back({t, v.gt[t]});
  }
  write_file((fs::path(a.out) / "masks.rle.json").string(), encode_rle_json(rle));
  nlohmann::ordered_json meta;
  meta["kind"] = a.kind;
  meta["seed"] = seed;
  meta["h"] = sc.grid.height;
  meta["w"] = sc.grid.width;
  meta["n_frames"] = v.size();
  meta["target_radius_deg"] = sc.target.radius * 180.0 / kPi;
  meta["occlusion_gt"] = v.occlusion_gt;
  write_json((fs::path(a.out) / "meta.json").string(), meta);
  std::cout << "wrote " << v.size() << " frames to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, out, loss_curve;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  RunConfig cfg = config_or_default(a.config);
  const std::string ckpt = a.out.empty() ? cfg.io.checkpoint : a.out;
  if (ckpt.empty()) throw ConfigError("train: no checkpoint path (--out or io.checkpoint)");
  const std::string curve = a.loss_curve.empty() ? cfg.io.loss_curve : a.loss_curve;
  Model<float> model(model_config(cfg));
  std::size_t last_epoch = static_cast<std::size_t>(-1);
  double sum = 0.0;
  const TrainResult r = train_toy(model, cfg, [&](const TrainProgress& p) {
    if (p.epoch != last_epoch) sum = 0.0;
    last_epoch = p.epoch;
    sum += p.loss;
    if (!a.quiet && p.clip + 1 == cfg.train.clips_per_epoch)
      std::cerr << "epoch " << p.epoch + 1 << "/" << cfg.train.epochs << " loss "
                << sum / static_cast<double>(cfg.train.clips_per_epoch) << "\n";
  });
  save_model(ckpt, model, cfg);
  nlohmann::ordered_json j;
  j["epoch_loss"] = r.epoch_loss;
  j["smoothed"] = r.smoothed;
  j["steps"] = r.steps;
  j["silent_params"] = r.silent_params;
  if (!curve.empty()) write_json(curve, j);
  if (!r.silent_params.empty())
    std::cerr << "warning: " << r.silent_params.size() << " tensors received no gradient in epoch 1\n";
  std::cout << "final loss " << r.epoch_loss.back() << ", checkpoint " << ckpt << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrackArgs {
  std::string ckpt, video, prompt, out;
  std::optional<std::size_t> long_term;
  std::optional<std::uint64_t> seed;
};

int run_track(const TrackArgs& a) {
  LoadedModel<float> lm = load_model<float>(a.ckpt);
  RunConfig& cfg = lm.config;
  apply_env_overrides(cfg);
  const auto paths = list_files(a.video, "frame", "ppm");
  if (paths.empty()) throw ConfigError("track: no frame_*.ppm files in " + a.video);
  std::vector<Tensor<double>> frames;
  for (const auto& p : paths) frames.push_back(decode_ppm(read_file(p.string())));
  const BinaryMask prompt = read_pgm(a.prompt);
  TrackOptions opt;
  opt.long_term = a.long_term ? *a.long_term : cfg.model.lsmm.long_term;
  opt.seed = a.seed ? *a.seed : cfg.seed;
  const auto masks = run_vos(lm.model, frames, prompt, opt);
  fs::create_directories(a.out);
  std::vector<IndexedMask> rle;
  for (std::size_t t = 0; t < masks.size(); ++t) {
    write_pgm((fs::path(a.out) / indexed("mask", t, "pgm")).string(), masks[t]);
    rle.push_back({t, masks[t]});
  }
  write_file((fs::path(a.out) / "masks.rle.json").string(), encode_rle_json(rle));
  std::cout << "tracked " << masks.size() << " frames into " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, report;
};

int run_eval(const EvalArgs& a) {
  const auto pp = list_files(a.pred, "mask", "pgm"), gp = list_files(a.gt, "mask", "pgm");
  if (gp.empty()) throw ConfigError("eval: no mask_*.pgm files in " + a.gt);
  if (pp.size() != gp.size())
    throw DimensionError("eval: " + std::to_string(pp.size()) + " predicted masks for " + std::to_string(gp.size()) +
                         " ground-truth masks");
  VideoSequence<double> gt;
  std::vector<BinaryMask> pred;
  for (std::size_t k = 0; k < gp.size(); ++k) {
    if (pp[k].filename() != gp[k].filename())
      throw ConfigError("eval: " + pp[k].filename().string() + " has no counterpart " + gp[k].filename().string());
    pred.push_back(read_pgm(pp[k].string()));
    gt.gt.push_back(read_pgm(gp[k].string()));
  }
  const MetricsReport r = evaluate(pred, gt.gt);
  nlohmann::ordered_json j;
  j["n_frames"] = pred.size();
  j["j_mean"] = r.j_mean;
  j["f_mean"] = r.f_mean;
  j["jf"] = r.jf;
  const fs::path meta = fs::path(a.gt) / "meta.json";
  if (fs::exists(meta)) {
    const auto m = nlohmann::json::parse(read_file(meta.string()));
    if (m.contains("occlusion_gt") && m["occlusion_gt"].size() == pred.size()) {
      gt.occlusion_gt = m["occlusion_gt"].get<std::vector<int>>();
      gt.frames.resize(pred.size());
      if (const auto rec = recovery_j(pred, gt)) j["recovery_j"] = *rec;
    }
  }
  j["j"] = r.j;
  j["f"] = r.f;
  write_json(a.report, j);
  std::cout << "J " << r.j_mean << "  F " << r.f_mean << "  J&F " << r.jf << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct GradArgs {
  std::size_t instances = 10;
  std::uint64_t seed = 1;
};

int run_gradcheck(const GradArgs& a) {
  if (a.instances == 0) throw ConfigError("gradcheck: --instances must be positive");
  const GradcheckReport r = loss_gradcheck(a.instances, a.seed);
  const double tol = 1e-4;
  std::printf("weighted_bce  max rel err %.3e\n", r.weighted_bce);
  std::printf("dice_loss     max rel err %.3e\n", r.dice);
  std::printf("total_loss    max rel err %.3e\n", r.total);
  const bool ok = r.worst() < tol;
  std::printf("%s (%zu instances, tolerance %.0e)\n", ok ? "ok" : "FAILED", r.instances, tol);
  return ok ? 0 : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"panokit: seam-aware 360-degree video object segmentation toolkit"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "render a synthetic panoramic clip with ground truth");
  synth->add_option("--config", sa.config, "run config JSON")->check(CLI::ExistingFile);
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--kind", sa.kind, "mixed, seam or occlusion")->check(CLI::IsMember({"mixed", "seam", "occlusion"}));
  synth->add_option("--frames", sa.frames, "number of frames (default: train.clip_length)");
  synth->add_option("--seed", sa.seed, "scene seed (default: config seed)");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train the toy model on synthetic clips");
  train->add_option("--config", ta.config, "run config JSON")->check(CLI::ExistingFile);
  train->add_option("--out", ta.out, "checkpoint path (default: io.checkpoint)");
  train->add_option("--loss-curve", ta.loss_curve, "loss record JSON (default: io.loss_curve)");
  train->add_flag("--quiet", ta.quiet, "no per-epoch progress");

  TrackArgs ka;
  auto* track = app.add_subcommand("track", "track the prompted object through a frame directory");
  track->add_option("--ckpt", ka.ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  track->add_option("--video", ka.video, "directory of frame_XXXX.ppm")->required()->check(CLI::ExistingDirectory);
  track->add_option("--prompt", ka.prompt, "first-frame mask (PGM)")->required()->check(CLI::ExistingFile);
  track->add_option("--out", ka.out, "output directory")->required();
  track->add_option("--long-term", ka.long_term, "long-term memory slots (default: model.long_term)");
  track->add_option("--seed", ka.seed, "memory sampling seed (default: config seed)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "score predicted masks against ground truth");
  eval->add_option("--pred", ea.pred, "directory of predicted mask_XXXX.pgm")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--gt", ea.gt, "directory of ground-truth mask_XXXX.pgm")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--report", ea.report, "report JSON path")->required();

  GradArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the loss gradients");
  grad->add_option("--instances", ga.instances, "random 16x32 instances");
  grad->add_option("--seed", ga.seed, "instance seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kInvalid;
  }

  try {
    if (*synth) return run_synth(sa);
    if (*train) return run_train(ta);
    if (*track) return run_track(ka);
    if (*eval) return run_eval(ea);
    if (*grad) return run_gradcheck(ga);
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const EmptyMaskError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::invalid_argument& e) {  // config, dimension and projection errors
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
