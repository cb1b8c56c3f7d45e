// daefuse: train, fuse, evaluate and ablate from the command line.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
// single line "daefuse: error: <Category>: <message>" on stderr.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "daefuse/daefuse.hpp"

namespace fs = std::filesystem;
using namespace daefuse;

namespace {

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string resume;
  bool video = false;
  bool verbose = false;
};

struct FuseArgs {
  std::string ckpt, a, b, out;
};

struct FuseVideoArgs {
  std::string ckpt, a, b, out;
  std::optional<double> tau;
};

struct EvalArgs {
  std::string fused, a, b, report;
};

struct AblateArgs {
  TrainArgs train;
  std::string preset;
  std::string eval_data;
};

TrainingConfig config_from(const std::string& path) {
  TrainingConfig c = path.empty() ? TrainingConfig{} : load_config(path);
  if (const char* env = std::getenv("DAEFUSE_SEED")) {
    const std::string text = env;
    std::size_t used = 0;
    unsigned long long seed = 0;
    try {
      seed = std::stoull(text, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (text.empty() || used != text.size() || text.front() == '-') {
      fail(ErrorKind::ConfigError, "DAEFUSE_SEED must be a non-negative integer, got '" + text + "'");
    }
    c.seed = seed;
  }
  c.validate();
  return c;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::IOError, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json manifest(const std::string& verb, const std::vector<std::string>& args, const TrainingConfig* config) {
  json j = {{"artifact_version", kVersion}, {"command", verb}, {"arguments", args}, {"metric_variants", metric_variants()}};
  if (config) {
    j["config"] = *config;
    j["config_hash"] = config_hash(*config);
    j["seed"] = config->seed;
  }
  return j;
}

TrainingSet load_training_set(const TrainArgs& t) {
  const fs::path root(t.data);
  if (t.video) return TrainingSet::from_video(load_video_sequence(root / "a", root / "b"));
  return TrainingSet::from_pairs(load_pair_dataset(root));
}

TrainResult run_train(const TrainArgs& t, TrainingConfig config) {
  const TrainingSet data = load_training_set(t);
  TrainOptions options;
  options.out_dir = t.out;
  if (t.verbose) options.on_step = [](const StepRecord& r) { std::cout << json(r).dump() << "\n"; };
  if (!t.resume.empty()) return resume(t.resume, data, options);
  return run_training(start_training(config), data, options);
}

void report_run(const TrainResult& r, const fs::path& out) {
  std::cout << "trained " << r.state.step << " steps; checkpoints in " << out.string() << "\n";
}

int cmd_train(const TrainArgs& t, const std::vector<std::string>& args) {
  const TrainingConfig config =
      t.resume.empty() ? config_from(t.config) : load_checkpoint(t.resume).config;
  fs::create_directories(t.out);
  write_json(fs::path(t.out) / "run_manifest.json", manifest("train", args, &config));
  report_run(run_train(t, config), t.out);
  return 0;
}

int cmd_fuse(const FuseArgs& f, const std::vector<std::string>& args) {
  const TrainerState state = load_checkpoint(f.ckpt);
  const ImagePair pair(load_image(f.a), load_image(f.b));
  save_image(f.out, fuse_pair(state.model, pair));
  write_json(f.out + ".manifest.json", manifest("fuse", args, &state.config));
  std::cout << "wrote " << f.out << "\n";
  return 0;
}

int cmd_fuse_video(const FuseVideoArgs& f, const std::vector<std::string>& args) {
  const TrainerState state = load_checkpoint(f.ckpt);
  const VideoSequence seq = load_video_sequence(f.a, f.b);
  const double tau = f.tau.value_or(state.config.feature_ema_tau);
  const auto frames = fuse_video(state.model, seq, tau);
  fs::create_directories(f.out);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    save_image(fs::path(f.out) / seq.frames[i].a.source_id(), frames[i]);
  }
  json m = manifest("fuse-video", args, &state.config);
  m["feature_ema_tau"] = tau;
  write_json(fs::path(f.out) / "run_manifest.json", m);
  std::cout << "wrote " << frames.size() << " frames to " << f.out << "\n";
  return 0;
}

void print_aggregate(const MetricReport& r) {
  for (const auto& m : metric_names()) {
    const auto& v = r.aggregate.at(m);
    std::cout << m << " " << (v ? std::to_string(*v) : std::string("n/a")) << "\n";
  }
}

int cmd_eval(const EvalArgs& e, const std::vector<std::string>& args) {
  const MetricReport r = evaluate(e.fused, e.a, e.b);
  write_report(e.report, r);
  write_json(fs::path(e.report) / "run_manifest.json", manifest("eval", args, nullptr));
  print_aggregate(r);
  return 0;
}

// Fuses every pair of `data` with the run's final model and scores it.
MetricReport score_run(const ModelParameters& model, const fs::path& data, const fs::path& out) {
  const auto pairs = load_pair_dataset(data);
  for (const auto& p : pairs) save_image(out / "fused" / p.a.source_id(), fuse_pair(model, p));
  const MetricReport r = evaluate(out / "fused", data / "a", data / "b");
  write_report(out / "report", r);
  return r;
}

int cmd_ablate(const AblateArgs& a, const std::vector<std::string>& args) {
  const TrainingConfig base = config_from(a.train.config);
  std::vector<std::string> presets;
  if (a.preset == "all") {
    presets = {"baseline"};
    presets.insert(presets.end(), ablation_presets().begin(), ablation_presets().end());
  } else {
    presets = {a.preset};
  }
  const fs::path root(a.train.out);
  const fs::path eval_data = a.eval_data.empty() ? fs::path(a.train.data) : fs::path(a.eval_data);
  std::ostringstream table;
  table << "preset";
  for (const auto& m : metric_names()) table << "," << m;
  table << "\n";
  for (const auto& preset : presets) {
    const TrainingConfig config = preset == "baseline" ? base : ablate(preset, base);
    TrainArgs t = a.train;
    t.out = (presets.size() == 1 ? root : root / preset).string();
    fs::create_directories(t.out);
    json m = manifest("ablate", args, &config);
    m["preset"] = preset;
    write_json(fs::path(t.out) / "run_manifest.json", m);
    const TrainResult run = run_train(t, config);
    report_run(run, t.out);
    const MetricReport r = score_run(run.state.model, eval_data, t.out);
    table << preset;
    for (const auto& name : metric_names()) {
      const auto& v = r.aggregate.at(name);
      table << "," << (v ? std::to_string(*v) : std::string());
    }
    table << "\n";
  }
  std::ofstream(root / "ablation.csv") << table.str();
  std::cout << table.str();
  return 0;
}

void add_train_options(CLI::App& cmd, TrainArgs& t, bool config_required) {
  auto* config = cmd.add_option("--config", t.config, "JSON training config");
  if (config_required) config->required();
  cmd.add_option("--data", t.data, "dataset root with a/ and b/ subdirectories")->required();
  cmd.add_option("--out", t.out, "output directory")->required();
  cmd.add_flag("--video", t.video, "treat a/ and b/ as frame sequences and train with temporal pairs");
  cmd.add_flag("--verbose", t.verbose, "print every step record");
}

[[noreturn]] void die(int code, std::string_view category, const std::string& message) {
  std::cerr << "daefuse: error: " << category << ": " << message << "\n";
  std::exit(code);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-phase discriminative autoencoder image fusion"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "run both training phases");
  add_train_options(*train_cmd, train_args, false);
  train_cmd->add_option("--resume", train_args.resume, "continue from a checkpoint")->check(CLI::ExistingFile);

  FuseArgs fuse_args;
  auto* fuse_cmd = app.add_subcommand("fuse", "fuse one registered pair");
  fuse_cmd->add_option("--ckpt", fuse_args.ckpt, "phase-two checkpoint")->required();
  fuse_cmd->add_option("--a", fuse_args.a, "modality A image")->required();
  fuse_cmd->add_option("--b", fuse_args.b, "modality B image")->required();
  fuse_cmd->add_option("--out", fuse_args.out, "fused image path")->required();

  FuseVideoArgs video_args;
  auto* video_cmd = app.add_subcommand("fuse-video", "fuse two frame directories in order");
  video_cmd->add_option("--ckpt", video_args.ckpt, "phase-two checkpoint")->required();
  video_cmd->add_option("--a", video_args.a, "modality A frame directory")->required();
  video_cmd->add_option("--b", video_args.b, "modality B frame directory")->required();
  video_cmd->add_option("--out", video_args.out, "output frame directory")->required();
  video_cmd->add_option("--tau", video_args.tau, "feature EMA weight in [0,1)");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "score fused images against their sources");
  eval_cmd->add_option("--fused", eval_args.fused, "fused image directory")->required();
  eval_cmd->add_option("--a", eval_args.a, "modality A directory")->required();
  eval_cmd->add_option("--b", eval_args.b, "modality B directory")->required();
  eval_cmd->add_option("--report", eval_args.report, "report directory")->required();

  AblateArgs ablate_args;
  auto* ablate_cmd = app.add_subcommand("ablate", "train and score an ablation preset");
  add_train_options(*ablate_cmd, ablate_args.train, false);
  std::vector<std::string> choices{"all", "baseline"};
  choices.insert(choices.end(), ablation_presets().begin(), ablation_presets().end());
  ablate_cmd->add_option("--preset", ablate_args.preset, "preset name or 'all'")
      ->required()
      ->check(CLI::IsMember(choices));
  ablate_cmd->add_option("--eval-data", ablate_args.eval_data, "dataset to score (default: --data)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    die(2, "UsageError", e.what());
  }

  const std::vector<std::string> args(argv + 1, argv + argc);
  try {
    if (*train_cmd) return cmd_train(train_args, args);
    if (*fuse_cmd) return cmd_fuse(fuse_args, args);
    if (*video_cmd) return cmd_fuse_video(video_args, args);
    if (*eval_cmd) return cmd_eval(eval_args, args);
    if (*ablate_cmd) return cmd_ablate(ablate_args, args);
  } catch (const Error& e) {
    die(e.kind() == ErrorKind::UsageError ? 2 : 1, to_string(e.kind()), e.what());
  } catch (const fs::filesystem_error& e) {
    die(1, "IOError", e.what());
  } catch (const std::exception& e) {
    die(1, "InternalError", e.what());
  }
  return 0;
}
