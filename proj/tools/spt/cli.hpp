// SPDX-License-Identifier: Apache-2.0
#pragma once

// Subcommands of the `spt` tool. Everything lives in this header so the test
// suite can drive the commands in-process through spt::cli::run().

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "spt/checkpoint.hpp"
#include "spt/model.hpp"
#include "spt/random.hpp"
#include "spt/seqdata.hpp"
#include "spt/seqscore.hpp"
#include "spt/trainer.hpp"
#include "spt/xaieval.hpp"

namespace spt::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const char* kManifestName = "classes.txt";
inline const char* kConfigName = "config.json";
inline const char* kMetricsName = "metrics.csv";
inline const char* kModelName = "model.ckpt";

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

inline json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open config " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("config " + p.string() + ": " + e.what());
  }
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
}

/// Explicit manifest, else the one stored next to the checkpoint, else none.
inline std::optional<std::vector<std::string>> resolve_manifest(const std::string& manifest,
                                                                const std::string& checkpoint) {
  if (!manifest.empty()) return load_manifest(manifest);
  if (!checkpoint.empty()) {
    const fs::path beside = fs::path(checkpoint).parent_path() / kManifestName;
    if (fs::exists(beside)) return load_manifest(beside);
  }
  return std::nullopt;
}

inline std::string safe_file_stem(const std::string& id) {
  std::string s = id;
  for (char& ch : s) {
    const bool ok = std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.';
    if (!ok) ch = '_';
  }
  if (s.empty() || s == "." || s == "..") s = "record";
  return s;
}

struct CommonOptions {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

inline void add_common(CLI::App* sub, CommonOptions& c) {
  sub->add_option("--seed", c.seed, "Root random seed");
  sub->add_option("--workers", c.workers, "Threads for record-level evaluation")->check(CLI::PositiveNumber);
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  CommonOptions common;
  std::string config_path, preset = "tiny", data, val, manifest, out;
  std::size_t layers = 0, hidden = 0, heads = 0, mlp_size = 0, max_len = 0;
  bool no_positional = false, truncate = false, force = false;
  double drop_path = 0, lr = 0, min_lr = 0, weight_decay = 0, layer_decay = 0, label_smoothing = 0;
  std::size_t epochs = 0, warmup = 0, batch_size = 0, checkpoint_every = 0;
  std::string padding = "none";
};

struct TrainOptionHandles {
  std::vector<std::pair<std::string, CLI::Option*>> opts;
  bool given(const std::string& name) const {
    for (const auto& [n, o] : opts) {
      if (n == name) return o->count() > 0;
    }
    return false;
  }
};

inline TrainOptionHandles add_train(CLI::App* sub, TrainArgs& a) {
  TrainOptionHandles h;
  auto reg = [&](const std::string& name, CLI::Option* o) { h.opts.emplace_back(name, o); };
  add_common(sub, a.common);
  reg("seed", sub->get_option("--seed"));
  reg("config", sub->add_option("--config", a.config_path, "JSON config file"));
  reg("preset", sub->add_option("--preset", a.preset, "Model preset")->check(CLI::IsMember({"tiny", "small", "base"})));
  reg("data", sub->add_option("--data", a.data, "Training dataset (.jsonl or .fasta)"));
  reg("val", sub->add_option("--val", a.val, "Validation dataset"));
  reg("manifest", sub->add_option("--manifest", a.manifest, "Class manifest, one label per line"));
  reg("out", sub->add_option("--out", a.out, "Run directory"));
  reg("layers", sub->add_option("--layers", a.layers));
  reg("hidden", sub->add_option("--hidden", a.hidden));
  reg("heads", sub->add_option("--heads", a.heads));
  reg("mlp_size", sub->add_option("--mlp-size", a.mlp_size));
  reg("max_len", sub->add_option("--max-len", a.max_len));
  reg("no_positional", sub->add_flag("--no-positional", a.no_positional, "Disable the positional embedding"));
  reg("drop_path", sub->add_option("--drop-path", a.drop_path));
  reg("epochs", sub->add_option("--epochs", a.epochs));
  reg("warmup", sub->add_option("--warmup", a.warmup, "Warmup epochs"));
  reg("lr", sub->add_option("--lr", a.lr, "Base learning rate"));
  reg("min_lr", sub->add_option("--min-lr", a.min_lr));
  reg("weight_decay", sub->add_option("--weight-decay", a.weight_decay));
  reg("layer_decay", sub->add_option("--layer-decay", a.layer_decay));
  reg("label_smoothing", sub->add_option("--label-smoothing", a.label_smoothing));
  reg("batch_size", sub->add_option("--batch-size", a.batch_size));
  reg("padding", sub->add_option("--padding", a.padding)->check(CLI::IsMember({"none", "pad_batch"})));
  reg("checkpoint_every", sub->add_option("--checkpoint-every", a.checkpoint_every, "Epochs between checkpoints (0: final only)"));
  reg("truncate", sub->add_flag("--truncate", a.truncate, "Cut sequences longer than max_len instead of failing"));
  sub->add_flag("--force", a.force, "Reuse an existing run directory");
  return h;
}

/// Resolved run configuration: flag > config file > preset.
inline json resolve_run_config(const TrainArgs& a, const TrainOptionHandles& h) {
  json file = json::object();
  if (!a.config_path.empty()) file = read_json_file(a.config_path);
  if (!file.is_object()) throw UsageError("config file must hold a JSON object");

  const std::string preset = h.given("preset") ? a.preset : file.value("preset", a.preset);
  json model = ModelConfig::preset(preset);
  TrainConfig train_defaults;
  json train = train_defaults;
  if (file.contains("model")) model.merge_patch(file["model"]);
  if (file.contains("train")) train.merge_patch(file["train"]);

  auto pick = [&](const char* key, const std::string& flag_value, const char* flag) -> std::string {
    if (h.given(flag)) return flag_value;
    return file.value(key, std::string());
  };
  json run;
  run["preset"] = preset;
  run["data"] = pick("data", a.data, "data");
  run["val"] = pick("val", a.val, "val");
  run["manifest"] = pick("manifest", a.manifest, "manifest");
  run["out"] = pick("out", a.out, "out");
  run["seed"] = h.given("seed") ? a.common.seed : file.value("seed", a.common.seed);
  run["truncate"] = h.given("truncate") ? a.truncate : file.value("truncate", false);
  run["checkpoint_every"] = h.given("checkpoint_every") ? a.checkpoint_every : file.value("checkpoint_every", std::size_t{0});

  if (h.given("layers")) model["layers"] = a.layers;
  if (h.given("hidden")) model["hidden"] = a.hidden;
  if (h.given("heads")) model["heads"] = a.heads;
  if (h.given("mlp_size")) model["mlp_size"] = a.mlp_size;
  if (h.given("max_len")) model["max_len"] = a.max_len;
  if (h.given("no_positional")) model["use_positional"] = false;
  if (h.given("drop_path")) {
    model["drop_path_rate"] = a.drop_path;
    train["drop_path"] = a.drop_path;
  }
  if (h.given("epochs")) train["epochs"] = a.epochs;
  if (h.given("warmup")) train["warmup_epochs"] = a.warmup;
  if (h.given("lr")) train["base_lr"] = a.lr;
  if (h.given("min_lr")) train["min_lr"] = a.min_lr;
  if (h.given("weight_decay")) train["weight_decay"] = a.weight_decay;
  if (h.given("layer_decay")) train["layer_decay"] = a.layer_decay;
  if (h.given("label_smoothing")) train["label_smoothing"] = a.label_smoothing;
  if (h.given("batch_size")) train["batch_size"] = a.batch_size;
  if (h.given("padding")) train["padding"] = a.padding;
  train["rng_seed"] = run["seed"];
  run["model"] = model;
  run["train"] = train;
  return run;
}

inline Dataset prepare_split(Dataset ds, std::size_t max_len, bool truncate, const std::string& what) {
  for (auto& r : ds.records) {
    if (r.length() <= max_len) continue;
    if (!truncate) {
      throw DataError(what + ": record '" + r.id + "' has " + std::to_string(r.length()) +
                      " residues, more than max_len " + std::to_string(max_len) + " (use --truncate)");
    }
    r.sequence.resize(max_len);
  }
  return ds;
}

inline int cmd_train(const TrainArgs& a, const TrainOptionHandles& h, std::ostream& out) {
  json run = resolve_run_config(a, h);
  const std::string data = run["data"], val = run["val"], manifest_path = run["manifest"], out_dir = run["out"];
  if (data.empty()) throw UsageError("train: --data is required");
  if (out_dir.empty()) throw UsageError("train: --out is required");

  // Load and check every input before touching the run directory.
  std::optional<std::vector<std::string>> manifest;
  if (!manifest_path.empty()) manifest = load_manifest(manifest_path);
  Dataset train_ds = load_dataset(data, manifest, Split::train);
  std::optional<Dataset> val_ds;
  if (!val.empty()) val_ds = load_dataset(val, train_ds.class_names, Split::test);

  ModelConfig mc = run["model"].get<ModelConfig>();
  if (!a.config_path.empty()) {
    const json file_model = read_json_file(a.config_path).value("model", json::object());
    if (file_model.contains("num_classes") && file_model["num_classes"].get<std::size_t>() != train_ds.num_classes()) {
      throw DataError("config asks for " + file_model["num_classes"].dump() + " classes but the data has " +
                      std::to_string(train_ds.num_classes()));
    }
  }
  mc.num_classes = train_ds.num_classes();
  run["model"] = mc;
  TrainConfig tc = run["train"].get<TrainConfig>();
  tc.workers = a.common.workers;
  mc.validate();
  tc.validate();
  const bool truncate = run["truncate"];
  train_ds = prepare_split(std::move(train_ds), mc.max_len, truncate, data);
  if (val_ds) val_ds = prepare_split(std::move(*val_ds), mc.max_len, truncate, val);

  const fs::path dir(out_dir);
  if (fs::exists(dir / kConfigName) && !a.force) {
    throw UsageError("run directory " + dir.string() + " already holds a run (use --force)");
  }
  fs::create_directories(dir);
  write_text(dir / kConfigName, run.dump(2) + "\n");
  save_manifest(train_ds.class_names, dir / kManifestName);

  const std::size_t every = run["checkpoint_every"];
  const std::uint64_t seed = run["seed"];
  SPTModel<float> model = build_model<float>(mc, derive_seed(seed, "cli.init"));
  out << "model: " << param_count(model) << " parameters, " << train_ds.size() << " training records\n";
  std::vector<EpochMetrics> history;
  train(model, train_ds, val_ds ? &*val_ds : nullptr, tc, [&](const EpochMetrics& m) {
    history.push_back(m);
    std::ostringstream csv;
    write_metrics_csv(history, csv);
    write_text(dir / kMetricsName, csv.str());
    out << "epoch " << m.epoch << " loss " << format_metric(m.train_loss) << " train_err "
        << format_metric(m.train_err);
    if (val_ds) out << " val_err " << format_metric(m.val_err);
    out << '\n';
    if (every > 0 && m.epoch % every == 0) {
      fs::create_directories(dir / "checkpoints");
      save_checkpoint(model, dir / "checkpoints" / ("epoch_" + std::to_string(m.epoch) + ".ckpt"));
    }
  });
  save_checkpoint(model, dir / kModelName);
  out << "wrote " << (dir / kModelName).string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  CommonOptions common;
  std::string checkpoint, data, manifest, out;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const SPTModel<float> model = load_checkpoint<float>(a.checkpoint);
  const auto manifest = resolve_manifest(a.manifest, a.checkpoint);
  const Dataset ds = load_dataset(a.data, manifest, Split::test);
  if (ds.num_classes() > model.config.num_classes) {
    throw DataError("dataset has more classes than the model");
  }
  const EvalResult r = evaluate(model, ds, a.common.workers);
  json j;
  j["records"] = ds.size();
  j["error_rate"] = r.error_rate;
  json per = json::object();
  for (std::size_t c = 0; c < r.per_class_accuracy.size(); ++c) {
    const double v = r.per_class_accuracy[c];
    per[ds.class_names.at(c)] = std::isnan(v) ? json(nullptr) : json(v);
  }
  j["per_class_accuracy"] = per;
  out << "error_rate " << format_metric(r.error_rate) << " over " << ds.size() << " records\n";
  if (!a.out.empty()) write_text(a.out, j.dump(2) + "\n");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// explain
// ---------------------------------------------------------------------------

struct ExplainArgs {
  CommonOptions common;
  std::string checkpoint, input, manifest, out, format = "csv";
  std::optional<std::size_t> class_index;
  std::size_t block = 0;
};

inline int cmd_explain(const ExplainArgs& a, std::ostream& out, std::ostream& err) {
  const SPTModel<float> model = load_checkpoint<float>(a.checkpoint);
  if (a.class_index && *a.class_index >= model.config.num_classes) {
    throw UsageError("--class " + std::to_string(*a.class_index) + " outside 0.." +
                     std::to_string(model.config.num_classes - 1));
  }
  if (a.block > model.config.layers) {
    throw UsageError("--block " + std::to_string(a.block) + " outside 1.." + std::to_string(model.config.layers));
  }
  const auto manifest = resolve_manifest(a.manifest, a.checkpoint);
  // Labels in the input are metadata only, so unknown ones are tolerated.
  const Dataset ds = load_dataset(a.input, std::nullopt, Split::test);
  fs::create_directories(a.out);

  struct Outcome {
    std::string file, error;
    std::size_t class_index = 0;
  };
  std::vector<Outcome> outcomes(ds.size());
  std::vector<std::string> stems(ds.size());
  {
    std::map<std::string, std::size_t> seen;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      std::string s = safe_file_stem(ds.records[i].id);
      if (seen[s]++ > 0) s += "_" + std::to_string(i);
      stems[i] = s;
    }
  }
  const std::vector<std::string> names = manifest ? *manifest : std::vector<std::string>{};
  parallel_for(ds.size(), a.common.workers, [&](std::size_t i) {
    const ProteinRecord& r = ds.records[i];
    try {
      const ImportanceScores s = a.class_index ? sequence_score(model, r, *a.class_index, a.block)
                                               : explain_prediction(model, r, a.block);
      std::ostringstream buf;
      if (a.format == "json") {
        buf << scores_to_json(s, r, names).dump(2) << '\n';
      } else {
        write_scores_csv(s, r, buf);
      }
      const fs::path file = fs::path(a.out) / (stems[i] + "." + a.format);
      write_text(file, buf.str());
      outcomes[i].file = file.string();
      outcomes[i].class_index = s.class_index;
    } catch (const std::exception& e) {
      outcomes[i].error = e.what();
    }
  });

  json summary = json::array();
  std::size_t ok = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    json e;
    e["id"] = ds.records[i].id;
    if (outcomes[i].error.empty()) {
      ++ok;
      e["status"] = "ok";
      e["class_index"] = outcomes[i].class_index;
      e["file"] = outcomes[i].file;
    } else {
      e["status"] = "error";
      e["error"] = outcomes[i].error;
      err << "explain: " << ds.records[i].id << ": " << outcomes[i].error << '\n';
    }
    summary.push_back(e);
  }
  write_text(fs::path(a.out) / "summary.json", summary.dump(2) + "\n");
  out << "explained " << ok << " of " << ds.size() << " records\n";
  return ok > 0 ? kExitOk : kExitFailure;
}

// ---------------------------------------------------------------------------
// faithfulness
// ---------------------------------------------------------------------------

struct FaithfulnessArgs {
  CommonOptions common;
  std::string checkpoint, data, manifest, out, mode;
  std::vector<double> ratios;
  std::vector<std::size_t> counts;
  std::size_t block = 0;
};

inline std::string amount_label(const Amount& a) {
  std::ostringstream os;
  if (a.is_ratio) {
    os << a.value * 100.0 << "%";
  } else {
    os << static_cast<std::size_t>(a.value) << " residues";
  }
  return os.str();
}

inline int cmd_faithfulness(const FaithfulnessArgs& a, std::ostream& out) {
  std::vector<Amount> amounts;
  for (double r : a.ratios) {
    if (!(r > 0.0 && r <= 1.0)) throw UsageError("--ratios values must be in (0, 1]");
    amounts.push_back(Amount::ratio(r));
  }
  for (std::size_t k : a.counts) amounts.push_back(Amount::count(k));
  if (amounts.empty()) throw UsageError("faithfulness: give --ratios or --counts");
  if (!a.ratios.empty() && !a.counts.empty()) throw UsageError("faithfulness: --ratios and --counts are exclusive");

  const SPTModel<float> model = load_checkpoint<float>(a.checkpoint);
  const auto manifest = resolve_manifest(a.manifest, a.checkpoint);
  const Dataset ds = load_dataset(a.data, manifest, Split::test);
  const PerturbMode mode = a.mode == "mutate" ? PerturbMode::mutate : PerturbMode::remove;
  const FaithfulnessCurve curve = faithfulness_curve(model, ds, sequence_scorer<float>(a.block), amounts, mode,
                                                     derive_seed(a.common.seed, "cli.faithfulness"), a.common.workers);
  std::ostringstream csv;
  write_curve_csv(curve, csv);
  write_text(a.out, csv.str());
  const std::size_t last = amounts.size() - 1;
  out << std::fixed << std::setprecision(2) << "gap at " << amount_label(amounts[last]) << ": "
      << 100.0 * curve.gap(last) << " points (top " << 100.0 * curve.accuracy_top[last] << "%, bottom "
      << 100.0 * curve.accuracy_bottom[last] << "%, random " << 100.0 * curve.accuracy_random[last]
      << "%, baseline " << 100.0 * curve.baseline_accuracy << "%)\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// stability
// ---------------------------------------------------------------------------

struct StabilityArgs {
  CommonOptions common;
  std::string checkpoint, data, manifest, out;
  std::size_t pairs = 100, substitutions = 1, block = 0;
};

inline int cmd_stability(const StabilityArgs& a, std::ostream& out) {
  const SPTModel<float> model = load_checkpoint<float>(a.checkpoint);
  const auto manifest = resolve_manifest(a.manifest, a.checkpoint);
  const Dataset ds = load_dataset(a.data, manifest, Split::test);
  const auto pairs = make_stability_pairs(ds, a.pairs, a.substitutions, derive_seed(a.common.seed, "cli.stability"));
  const StabilityReport rep = stability_report(model, sequence_scorer<float>(a.block), pairs, a.common.workers);
  write_text(a.out, stability_to_json(rep).dump(2) + "\n");
  out << "median rank correlation " << format_metric(rep.median) << " over " << rep.n << " pairs ("
      << rep.n_undefined << " undefined)\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// timing
// ---------------------------------------------------------------------------

struct TimingArgs {
  CommonOptions common;
  std::string checkpoint, out;
  std::size_t hidden = 64, repeats = 21;
  std::vector<std::size_t> lengths = {256, 512, 1024, 2048};
};

inline int cmd_timing(const TimingArgs& a, std::ostream& out) {
  std::size_t hidden = a.hidden;
  if (!a.checkpoint.empty()) hidden = load_checkpoint<float>(a.checkpoint).config.hidden;
  const auto entries = timing_scaling(hidden, a.lengths, a.repeats, derive_seed(a.common.seed, "cli.timing"));
  std::ostringstream csv;
  csv << "length,median_seconds,ratio_to_previous\n";
  csv.precision(17);
  out << "length  median_us  ratio\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const double ratio = i == 0 ? std::nan("") : entries[i].median_seconds / entries[i - 1].median_seconds;
    csv << entries[i].length << ',' << entries[i].median_seconds << ',' << format_metric(ratio) << '\n';
    out << std::setw(6) << entries[i].length << "  " << std::setw(9) << std::fixed << std::setprecision(2)
        << entries[i].median_seconds * 1e6 << "  ";
    if (i > 0) out << std::setprecision(3) << ratio;
    out << '\n';
    out.unsetf(std::ios::fixed);
  }
  if (!a.out.empty()) write_text(a.out, csv.str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gen-synthetic
// ---------------------------------------------------------------------------

struct GenArgs {
  CommonOptions common;
  std::string out, format = "jsonl";
  std::size_t classes = 6, motif_length = 5, min_length = 80, max_length = 120;
  std::size_t train_per_class = 500, test_per_class = 100;
};

inline int cmd_gen_synthetic(const GenArgs& a, std::ostream& out) {
  SyntheticSpec spec;
  spec.num_classes = a.classes;
  spec.motif_length = a.motif_length;
  spec.min_length = a.min_length;
  spec.max_length = a.max_length;
  spec.n_per_class = a.train_per_class + a.test_per_class;
  spec.seed = a.common.seed;
  const auto [train_ds, test_ds] = split_per_class(generate_synthetic(spec), a.test_per_class);
  fs::create_directories(a.out);
  const std::string ext = a.format == "fasta" ? ".fasta" : ".jsonl";
  const fs::path dir(a.out);
  if (a.format == "fasta") {
    save_fasta(train_ds, dir / ("train" + ext));
    save_fasta(test_ds, dir / ("test" + ext));
  } else {
    save_jsonl(train_ds, dir / ("train" + ext));
    save_jsonl(test_ds, dir / ("test" + ext));
  }
  save_manifest(train_ds.class_names, dir / kManifestName);
  out << "wrote " << train_ds.size() << " training and " << test_ds.size() << " test records to " << a.out << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sequence protein transformer: training and residue-level explanations", "spt"};
  app.require_subcommand(1);

  TrainArgs train_a;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a run directory");
  const TrainOptionHandles train_h = add_train(train_cmd, train_a);

  EvalArgs eval_a;
  auto* eval_cmd = app.add_subcommand("eval", "Report top-1 error and per-class accuracy");
  add_common(eval_cmd, eval_a.common);
  eval_cmd->add_option("--checkpoint", eval_a.checkpoint)->required();
  eval_cmd->add_option("--data", eval_a.data)->required();
  eval_cmd->add_option("--manifest", eval_a.manifest);
  eval_cmd->add_option("--out", eval_a.out, "Optional JSON report");

  ExplainArgs explain_a;
  auto* explain_cmd = app.add_subcommand("explain", "Write per-residue Sequence Scores");
  add_common(explain_cmd, explain_a.common);
  explain_cmd->add_option("--checkpoint", explain_a.checkpoint)->required();
  explain_cmd->add_option("--input", explain_a.input)->required();
  explain_cmd->add_option("--manifest", explain_a.manifest);
  explain_cmd->add_option("--out", explain_a.out, "Output directory")->required();
  explain_cmd->add_option("--class", explain_a.class_index, "Class index (default: predicted)");
  explain_cmd->add_option("--block", explain_a.block, "1-based block (default: last)");
  explain_cmd->add_option("--format", explain_a.format)->check(CLI::IsMember({"csv", "json"}));

  FaithfulnessArgs faith_a;
  auto* faith_cmd = app.add_subcommand("faithfulness", "Deletion or mutation faithfulness curve");
  add_common(faith_cmd, faith_a.common);
  faith_cmd->add_option("--checkpoint", faith_a.checkpoint)->required();
  faith_cmd->add_option("--data", faith_a.data)->required();
  faith_cmd->add_option("--manifest", faith_a.manifest);
  faith_cmd->add_option("--mode", faith_a.mode)->required()->check(CLI::IsMember({"delete", "mutate"}));
  faith_cmd->add_option("--ratios", faith_a.ratios, "Comma-separated fractions")->delimiter(',');
  faith_cmd->add_option("--counts", faith_a.counts, "Comma-separated residue counts")->delimiter(',');
  faith_cmd->add_option("--block", faith_a.block);
  faith_cmd->add_option("--out", faith_a.out, "Curve CSV")->required();

  StabilityArgs stab_a;
  auto* stab_cmd = app.add_subcommand("stability", "Rank correlation of scores under single substitutions");
  add_common(stab_cmd, stab_a.common);
  stab_cmd->add_option("--checkpoint", stab_a.checkpoint)->required();
  stab_cmd->add_option("--data", stab_a.data)->required();
  stab_cmd->add_option("--manifest", stab_a.manifest);
  stab_cmd->add_option("--pairs", stab_a.pairs);
  stab_cmd->add_option("--substitutions", stab_a.substitutions);
  stab_cmd->add_option("--block", stab_a.block);
  stab_cmd->add_option("--out", stab_a.out, "Report JSON")->required();

  TimingArgs time_a;
  auto* time_cmd = app.add_subcommand("timing", "Time the score stage against sequence length");
  add_common(time_cmd, time_a.common);
  time_cmd->add_option("--checkpoint", time_a.checkpoint, "Take the hidden size from a checkpoint");
  time_cmd->add_option("--hidden", time_a.hidden);
  time_cmd->add_option("--lengths", time_a.lengths)->delimiter(',');
  time_cmd->add_option("--repeats", time_a.repeats)->check(CLI::PositiveNumber);
  time_cmd->add_option("--out", time_a.out, "Optional CSV");

  GenArgs gen_a;
  auto* gen_cmd = app.add_subcommand("gen-synthetic", "Write the planted-motif benchmark");
  add_common(gen_cmd, gen_a.common);
  gen_cmd->add_option("--out", gen_a.out, "Output directory")->required();
  gen_cmd->add_option("--classes", gen_a.classes);
  gen_cmd->add_option("--motif-length", gen_a.motif_length);
  gen_cmd->add_option("--min-length", gen_a.min_length);
  gen_cmd->add_option("--max-length", gen_a.max_length);
  gen_cmd->add_option("--train-per-class", gen_a.train_per_class);
  gen_cmd->add_option("--test-per-class", gen_a.test_per_class);
  gen_cmd->add_option("--format", gen_a.format)->check(CLI::IsMember({"jsonl", "fasta"}));

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*train_cmd) return cmd_train(train_a, train_h, out);
    if (*eval_cmd) return cmd_eval(eval_a, out);
    if (*explain_cmd) return cmd_explain(explain_a, out, err);
    if (*faith_cmd) return cmd_faithfulness(faith_a, out);
    if (*stab_cmd) return cmd_stability(stab_a, out);
    if (*time_cmd) return cmd_timing(time_a, out);
    if (*gen_cmd) return cmd_gen_synthetic(gen_a, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace spt::cli
