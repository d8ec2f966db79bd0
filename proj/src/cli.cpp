#include "volnet/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "volnet/arch.hpp"
#include "volnet/eval.hpp"
#include "volnet/train.hpp"

namespace volnet {

namespace fs = std::filesystem;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::IoError: return kExitIo;
    case ErrorCode::NumericError: return kExitNumeric;
    default: return kExitUsage;
  }
}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorCode::IoError, "cannot write " + path.string());
  f << text;
  if (!f) fail(ErrorCode::IoError, "cannot write " + path.string());
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
}

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

// ------------------------------------------------------------------ synth

struct SynthArgs {
  std::string out;
  int classes = 2;
  Index per_class = 40;
  std::uint64_t seed = 7;
  double noise = 0.1;
};

void cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.classes != 2 && a.classes != 3) fail(ErrorCode::InvalidConfig, "--classes must be 2 or 3");
  if (a.per_class < kTestPerClass + 1)
    fail(ErrorCode::InvalidConfig, "--per-class must be at least " + std::to_string(kTestPerClass + 1));
  if (!(a.noise >= 0.0)) fail(ErrorCode::InvalidConfig, "--noise must be >= 0");
  PhantomConfig pc;
  pc.classes = default_phantom_classes(a.classes);
  pc.per_class = a.per_class;
  pc.seed = a.seed;
  pc.noise = a.noise;
  const Manifest m = generate_phantoms(pc, a.out);
  out << "manifest " << m.path.string() << "\n";
  for (const auto& [label, ids] : m.ids_by_label()) out << to_string(label) << " " << ids.size() << "\n";
}

// ------------------------------------------------------------------ train

struct RunConfig {
  TrainConfig train;
  fs::path manifest;
  std::optional<fs::path> split;
};

RunConfig load_run_config(const fs::path& path) {
  const std::string text = read_text(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
  if (!doc.is_object()) fail(ErrorCode::InvalidConfig, path.string() + ": expected a JSON object");
  // Paths are relative to the configuration file.
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& key) {
    const auto& v = doc.at(key);
    if (!v.is_string()) fail(ErrorCode::InvalidConfig, "'" + key + "' must be a path string");
    const fs::path p = v.get<std::string>();
    return p.is_absolute() ? p : base / p;
  };
  RunConfig rc;
  if (!doc.contains("manifest")) fail(ErrorCode::InvalidConfig, path.string() + ": missing 'manifest'");
  rc.manifest = resolve("manifest");
  if (doc.contains("split")) rc.split = resolve("split");
  doc.erase("manifest");
  doc.erase("split");
  rc.train = config_from_json(doc);
  return rc;
}

// The split is frozen next to the manifest by the first run and reused, so
// every experiment on one dataset sees the same test subjects.
DatasetSplit frozen_split(const RunConfig& rc, const Manifest& manifest, std::ostream& out) {
  if (rc.split) {
    DatasetSplit s = load_split(*rc.split);
    check_split(s, manifest);
    return s;
  }
  const fs::path frozen = manifest.path.parent_path() / "split.json";
  if (fs::exists(frozen)) {
    DatasetSplit s = load_split(frozen);
    check_split(s, manifest);
    out << "using frozen split " << frozen.string() << "\n";
    return s;
  }
  DatasetSplit s = split_dataset(manifest, rc.train.seed);
  save_split(s, frozen);
  out << "froze split " << frozen.string() << "\n";
  return s;
}

void cmd_train(const fs::path& config_path, const fs::path& out_dir, const std::optional<fs::path>& resume,
               std::ostream& out) {
  const RunConfig rc = load_run_config(config_path);
  const TrainConfig& config = rc.train;
  const Manifest manifest = load_manifest(rc.manifest);
  make_dirs(out_dir);
  const DatasetSplit split = frozen_split(rc, manifest, out);
  save_split(split, out_dir / "split.json");

  Network<float> net(network_for(config));
  std::optional<Checkpoint> start;
  if (resume) {
    start = load_checkpoint(*resume, net);
    if (start->meta.value("config_digest", "") != config_digest(config))
      fail(ErrorCode::InvalidConfig, resume->string() + " was written with a different configuration");
    out << "resuming after epoch " << start->state.epoch << "\n";
  }

  TrainHooks hooks;
  hooks.log = [&](const std::string& line) { out << line << "\n" << std::flush; };
  hooks.on_epoch = [&](const TrainState& state, bool improved) {
    save_checkpoint(out_dir / "last.ckpt", config, state);
    if (improved) {
      TrainState best = state;
      best.params = state.best;
      save_checkpoint(out_dir / "best.ckpt", config, best);
    }
    write_text(out_dir / "history.csv", history_csv(state.history));
  };
  const TrainResult result = train_loop(config, manifest, split, hooks, start ? &start->state : nullptr);
  if (result.best_epoch == 0 && !fs::exists(out_dir / "best.ckpt")) {
    // No epoch ran (or none improved): the initialization is the best model.
    TrainState init = result.final_state;
    init.params = result.best;
    save_checkpoint(out_dir / "best.ckpt", config, init);
  }
  write_text(out_dir / "history.csv", history_csv(result.history));

  net.restore(result.best);
  VolumeCache cache(manifest);
  const auto labels = task_labels(config.task);
  EvalReport report = evaluate(net, cache, split.subset("test", labels), config.task, "test");
  nlohmann::json j = report_to_json(report);
  j["best_epoch"] = result.best_epoch;
  j["epochs"] = result.history.epochs.size();
  write_text(out_dir / "report.json", j.dump(2) + "\n");
  write_text(out_dir / "summary.csv", summary_csv_header() + "\n" + summary_csv_row(report) + "\n");
  out << summary_line(report) << "\n";
}

// ------------------------------------------------------------------ inspect

void cmd_inspect(const std::vector<std::string>& presets, int f0, int classes, bool json, std::ostream& out) {
  if (presets.empty() || presets.size() > 2) fail(ErrorCode::InvalidConfig, "give one or two --preset values");
  if (f0 < 4) fail(ErrorCode::InvalidConfig, "--f0 must be >= 4");
  std::vector<Index> totals;
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& name : presets) {
    PresetOptions options;
    options.width = f0;
    options.classes = classes;
    const NetworkSpec spec = make_preset(name, options);
    const auto layers = describe(spec);
    Index total = count_parameters(spec).total;
    totals.push_back(total);
    if (json) {
      doc.push_back(architecture_json(spec));
      continue;
    }
    out << spec.name << "\n";
    for (const auto& l : layers) {
      std::string shape;
      for (std::size_t i = 0; i < l.output_shape.size(); ++i)
        shape += (i ? "x" : "") + std::to_string(l.output_shape[i]);
      out << "  " << std::left << std::setw(36) << l.name << std::setw(16) << l.kind << std::setw(16) << shape
          << std::right << std::setw(10) << l.params << "\n";
    }
    out << "  total parameters " << total << "\n";
  }
  // Larger total over smaller, whatever the flag order.
  std::optional<double> ratio;
  std::size_t big = 0;
  if (totals.size() == 2) {
    big = totals[1] > totals[0] ? 1 : 0;
    ratio = double(totals[big]) / double(totals[1 - big]);
  }
  if (json) {
    nlohmann::json j{{"networks", doc}};
    if (ratio) j["ratio"] = {{"numerator", presets[big]}, {"denominator", presets[1 - big]}, {"value", *ratio}};
    out << j.dump(2) << "\n";
  } else if (ratio) {
    out << "ratio " << presets[big] << " / " << presets[1 - big] << " = " << fmt("%.2f", *ratio) << "\n";
  }
}

// ------------------------------------------------------------------ ci

void cmd_ci(double value, Index n, double theta, std::ostream& out) {
  const double h = confidence_interval(value, n, theta);
  out << fmt("%.3f", value) << " ±" << fmt("%.3f", h) << " [" << fmt("%.3f", value - h) << ", "
      << fmt("%.3f", value + h) << "]\n";
}

// ------------------------------------------------------------------ eval

void cmd_eval(const fs::path& checkpoint, const fs::path& manifest_path, const fs::path& split_path,
              const std::string& subset, const std::optional<fs::path>& out_path, std::ostream& out) {
  if (subset != "train" && subset != "validation" && subset != "val" && subset != "test")
    fail(ErrorCode::InvalidConfig, "unknown subset '" + subset + "'");
  const Checkpoint header = load_checkpoint(checkpoint);
  const TrainConfig config = checkpoint_config(header);
  Network<float> net(network_for(config));
  const Checkpoint cp = load_checkpoint(checkpoint, net);
  net.restore(cp.state.params);
  const Manifest manifest = load_manifest(manifest_path);
  const DatasetSplit split = load_split(split_path);
  check_split(split, manifest);
  VolumeCache cache(manifest);
  const auto ids = split.subset(subset, task_labels(config.task));
  const EvalReport report = evaluate(net, cache, ids, config.task, subset == "val" ? "validation" : subset);
  const std::string text = report_to_json(report).dump(2) + "\n";
  if (out_path) write_text(*out_path, text);
  out << text << summary_line(report) << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"3D inception networks on volumetric ROIs", "volnet"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic phantom dataset");
  synth_cmd->add_option("--out", synth.out, "output directory")->required();
  synth_cmd->add_option("--classes", synth.classes, "2 (AD, NC) or 3 (AD, MCI, NC)");
  synth_cmd->add_option("--per-class", synth.per_class, "subjects per class");
  synth_cmd->add_option("--seed", synth.seed, "master seed");
  synth_cmd->add_option("--noise", synth.noise, "Gaussian noise sigma");

  std::string train_config, train_out, train_resume;
  auto* train_cmd = app.add_subcommand("train", "train a preset and evaluate it on the frozen test set");
  train_cmd->add_option("--config", train_config, "run configuration (JSON)")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--resume", train_resume, "checkpoint to continue from");

  std::vector<std::string> presets;
  int f0 = 8, classes = 2;
  bool as_json = false;
  auto* inspect_cmd = app.add_subcommand("inspect", "per-layer shapes and parameter counts");
  inspect_cmd->add_option("--preset", presets, "preset name; give two to print their ratio")->required();
  inspect_cmd->add_option("--f0", f0, "base width");
  inspect_cmd->add_option("--classes", classes, "output classes");
  inspect_cmd->add_flag("--json", as_json, "machine-readable output");

  double value = 0.0, theta = kDefaultTheta;
  Index n = 0;
  auto* ci_cmd = app.add_subcommand("ci", "normal-approximation confidence interval");
  ci_cmd->add_option("--value", value, "observed proportion")->required();
  ci_cmd->add_option("--n", n, "sample count")->required();
  ci_cmd->add_option("--theta", theta, "normal quantile");

  std::string eval_checkpoint, eval_manifest, eval_split, eval_subset = "test", eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on one subset");
  eval_cmd->add_option("--checkpoint", eval_checkpoint)->required();
  eval_cmd->add_option("--manifest", eval_manifest)->required();
  eval_cmd->add_option("--split", eval_split)->required();
  eval_cmd->add_option("--subset", eval_subset, "train, validation or test");
  eval_cmd->add_option("--out", eval_out, "also write the report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (*synth_cmd) cmd_synth(synth, out);
    else if (*train_cmd)
      cmd_train(train_config, train_out,
                train_resume.empty() ? std::nullopt : std::optional<fs::path>(train_resume), out);
    else if (*inspect_cmd) cmd_inspect(presets, f0, classes, as_json, out);
    else if (*ci_cmd) cmd_ci(value, n, theta, out);
    else if (*eval_cmd)
      cmd_eval(eval_checkpoint, eval_manifest, eval_split, eval_subset,
               eval_out.empty() ? std::nullopt : std::optional<fs::path>(eval_out), out);
  } catch (const Error& e) {
    err << "volnet: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const nlohmann::json::exception& e) {
    err << "volnet: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "volnet: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitOk;
}

}  // namespace volnet
