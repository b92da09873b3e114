// unimatch_cli: split / train / eval / ablate / compare.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime abort.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "unimatch/experiments.hpp"
#include "unimatch/unimatch.hpp"

namespace {

using namespace unimatch;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
  cmd->add_option("--config", c.config, "JSON config file (partial documents are merged over defaults)");
  cmd->add_option("--set", c.sets, "Override a config key, e.g. --set augment.p_gray=0.1")->allow_extra_args(false);
  cmd->add_option("--out", c.out, out_help);
  cmd->add_flag("--deterministic", c.deterministic, "Force in-thread, bit-reproducible execution");
}

json load_doc(const std::string& path) {
  if (path.empty()) return json();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed config " + path + ": " + e.what());
  }
}

std::vector<std::string> overrides(const Common& c) {
  auto o = c.sets;
  if (c.deterministic) o.push_back("engine.deterministic=true");
  return o;
}

TrainConfig resolve(const Common& c) {
  TrainConfig cfg = resolve_config(load_doc(c.config), overrides(c));
  if (auto errs = validate_config(cfg); !errs.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

// ---------------------------------------------------------------------------

int cmd_split(const Common& c) {
  const TrainConfig cfg = resolve(c);
  const TrainData data = [&] {
    TrainConfig no_manifest = cfg;
    no_manifest.data.manifest.clear();
    return prepare_data(no_manifest);
  }();
  const json doc = data.manifest;
  const std::string text = doc.dump(2) + "\n";
  if (c.out.empty()) {
    std::cout << text;
  } else {
    std::ofstream out(c.out, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + c.out);
    std::cout << "wrote " << c.out << ": " << data.manifest.labeled_ids.size() << " labeled, "
              << data.manifest.unlabeled_ids.size() << " unlabeled\n";
  }
  return kExitOk;
}

int cmd_train(const Common& c) {
  const TrainConfig cfg = resolve(c);
  const fs::path dir = c.out.empty() ? unique_run_dir(run_root(), cfg) : fs::path(c.out);
  std::cout << "run directory " << dir.string() << "\n";
  const RunArtifacts a = run_training(cfg, dir, &std::cout);
  std::printf("final teacher mIoU %.2f  student mIoU %.2f  best teacher %.2f\n", 100.0 * a.final_teacher_miou,
              100.0 * a.final_student_miou, 100.0 * a.best_teacher_miou);
  return kExitOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint) {
  const json meta = checkpoint_metadata(checkpoint);
  json doc = meta.at("config");
  if (!c.config.empty()) merge_known(doc, load_doc(c.config));
  TrainConfig cfg = resolve_config(doc, overrides(c));
  const ToyNetSpec spec = meta.at("spec").get<ToyNetSpec>();
  Rng rng(0);
  ToyModel model = build_toy_model(spec, rng);
  load_checkpoint(checkpoint, model);
  const TrainData data = prepare_data(cfg);
  const MiouResult r = evaluate(model, data.eval, cfg, data.train.mean(), data.train.stddev());
  const std::string role = meta.value("role", "model");
  std::cout << format_miou(r, role + " checkpoint " + checkpoint);
  json rec{{"type", "eval_checkpoint"}, {"checkpoint", fs::path(checkpoint).filename().string()}, {"role", role}};
  rec.update(miou_json(r));
  const fs::path log = c.out.empty() ? fs::path(checkpoint).parent_path() / "metrics.jsonl" : fs::path(c.out);
  if (fs::exists(log) || !c.out.empty()) std::ofstream(log, std::ios::app) << rec.dump() << "\n";
  return kExitOk;
}

int cmd_ablate(const Common& c, const std::string& axis, const std::string& values_text, const std::string& seeds_text) {
  const json doc = load_doc(c.config);
  const auto values = values_text.empty() ? default_axis_values(axis) : split_list(values_text);
  default_axis_values(axis);  // rejects unknown axes
  std::vector<std::pair<std::string, std::vector<std::string>>> cells;
  for (const auto& v : values) cells.emplace_back(v, axis_overrides(axis, v));
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(seeds_text)) seeds.push_back(std::stoull(s));
  if (seeds.empty()) seeds.push_back(resolve_config(doc, overrides(c)).seed);

  const TrainConfig base = resolve_config(doc, overrides(c));
  const fs::path parent = c.out.empty() ? run_root() / ("ablate-" + axis + "-" + hex64(config_hash(base)) + "-" + utc_timestamp())
                                        : fs::path(c.out);
  const auto rows = run_grid(doc, overrides(c), cells, seeds, parent, &std::cout);
  const std::string table = format_table(axis, rows);
  write_summary(parent, summary_json("ablate", axis, rows), table);
  std::cout << table << "summary " << (parent / "summary.json").string() << "\n";
  return kExitOk;
}

int cmd_compare(const Common& c, const std::string& frameworks_text, const std::string& seeds_text) {
  const json doc = load_doc(c.config);
  const auto frameworks = split_list(frameworks_text);
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(seeds_text)) seeds.push_back(std::stoull(s));
  if (frameworks.empty() || seeds.empty()) throw ConfigError("compare needs non-empty --frameworks and --seeds");
  std::vector<std::pair<std::string, std::vector<std::string>>> cells;
  for (const auto& f : frameworks) {
    parse_framework(f);
    cells.emplace_back(f, std::vector<std::string>{"framework=" + f});
  }
  const TrainConfig base = resolve_config(doc, overrides(c));
  const fs::path parent =
      c.out.empty() ? run_root() / ("compare-" + hex64(config_hash(base)) + "-" + utc_timestamp()) : fs::path(c.out);
  const auto rows = run_grid(doc, overrides(c), cells, seeds, parent, &std::cout);
  const std::string table = format_table("framework", rows);
  write_summary(parent, summary_json("compare", "framework", rows), table);
  std::cout << table << "summary " << (parent / "summary.json").string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Semi-supervised segmentation with weak-to-strong consistency and complementary feature dropout"};
  app.require_subcommand(1);

  Common split_c, train_c, eval_c, ablate_c, compare_c;
  auto* split = app.add_subcommand("split", "Write a labeled/unlabeled split manifest");
  add_common(split, split_c, "Manifest path (stdout when omitted)");
  std::string ratio;
  std::uint64_t split_seed = 0;
  bool have_seed = false;
  split->add_option("--ratio", ratio, "Labeled fraction, e.g. 1/16");
  split->add_option("--seed", split_seed, "Split seed")->each([&](const std::string&) { have_seed = true; });

  auto* train = app.add_subcommand("train", "Train one configuration");
  add_common(train, train_c, "Run directory (default: $UNIMATCH_RUN_ROOT/<hash>-<time>)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out set");
  add_common(eval, eval_c, "Metrics log to append to (default: the checkpoint's metrics.jsonl)");
  std::string checkpoint;
  eval->add_option("checkpoint", checkpoint, "Checkpoint file")->required();

  auto* ablate = app.add_subcommand("ablate", "Sweep one axis and tabulate mIoU");
  add_common(ablate, ablate_c, "Sweep directory");
  std::string axis, values, ablate_seeds;
  ablate->add_option("axis", axis, "tau | lambda | variant | frozen | dropout_position")->required();
  ablate->add_option("values", values, "Comma-separated values (default: the standard sweep)");
  ablate->add_option("--seeds", ablate_seeds, "Comma-separated seeds (default: config seed)");

  auto* compare = app.add_subcommand("compare", "Frameworks x seeds, median mIoU per framework");
  add_common(compare, compare_c, "Comparison directory");
  std::string frameworks = "labeled_only,fixmatch,unimatch_v1,unimatch_v2", compare_seeds = "0,1,2";
  compare->add_option("--frameworks", frameworks, "Comma-separated frameworks");
  compare->add_option("--seeds", compare_seeds, "Comma-separated seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*split) {
      if (!ratio.empty()) split_c.sets.push_back("data.split_ratio=" + ratio);
      if (have_seed) split_c.sets.push_back("data.seed=" + std::to_string(split_seed));
      return cmd_split(split_c);
    }
    if (*train) return cmd_train(train_c);
    if (*eval) return cmd_eval(eval_c, checkpoint);
    if (*ablate) return cmd_ablate(ablate_c, axis, values, ablate_seeds);
    if (*compare) return cmd_compare(compare_c, frameworks, compare_seeds);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalAbort& e) {
    std::cerr << "aborted: " << e.what() << "\ndiagnostics: " << e.dump_path.string() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
