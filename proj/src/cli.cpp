#include "nhl/cli.hpp"

#include "nhl/checkpoint.hpp"
#include "nhl/features.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace nhl {

namespace {

namespace fs = std::filesystem;

// Input problems detected before any work starts.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

nlohmann::json run_echo(const std::string& command, const RunConfig& cfg) {
  return {{"command", command}, {"config", cfg.values()}, {"version", kVersion}};
}

void require_file(const std::string& key, const std::string& path) {
  if (!fs::is_regular_file(path)) throw InputError(key + ": no such file '" + path + "'");
}

DatasetHandle load_split(const RunConfig& cfg, bool train) {
  const std::string kind = cfg.get<std::string>("dataset");
  const std::string split = train ? "train" : "test";
  if (kind == "idx") {
    const auto images = cfg.get<std::string>(split + "_images"), labels = cfg.get<std::string>(split + "_labels");
    require_file(split + "_images", images);
    require_file(split + "_labels", labels);
    return load_idx(images, labels);
  }
  if (kind == "file") {
    const auto path = cfg.get<std::string>(split + "_file");
    require_file(split + "_file", path);
    return load_dataset(path);
  }
  return make_synthetic_dataset(cfg.get<int>("classes"), cfg.get<Index>(train ? "train_per_class" : "test_per_class"),
                                cfg.get<Index>("image_size"),
                                cfg.get<std::uint64_t>(train ? "data_seed" : "test_data_seed"));
}

ModelCheckpoint load_source(const RunConfig& cfg) {
  const auto path = cfg.get<std::string>("checkpoint");
  require_file("checkpoint", path);
  return load_checkpoint(path);
}

fs::path output_dir(const RunConfig& cfg) {
  fs::path dir = cfg.get<std::string>("out_dir");
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_file(path, j.dump(2) + "\n"); }

nlohmann::json dataset_summary(const DatasetHandle& d) {
  return {{"size", d.size()}, {"shape", d.images.shape()}, {"num_classes", d.num_classes}, {"provenance", d.provenance}};
}

int cmd_make_dataset(const RunConfig& cfg, std::ostream& log) {
  const nlohmann::json echo = run_echo("make-dataset", cfg);
  const DatasetHandle train = load_split(cfg, true);
  const DatasetHandle test = load_split(cfg, false);
  const fs::path dir = output_dir(cfg);
  save_dataset(dir / "train.nhld", train, echo);
  save_dataset(dir / "test.nhld", test, echo);
  nlohmann::json meta = echo;
  meta["train"] = dataset_summary(train);
  meta["test"] = dataset_summary(test);
  write_json(dir / "dataset.json", meta);
  log << "wrote " << (dir / "train.nhld").string() << " (" << train.size() << ") and "
      << (dir / "test.nhld").string() << " (" << test.size() << ")\n";
  return kExitOk;
}

int cmd_train_source(const RunConfig& cfg, std::ostream& log) {
  const nlohmann::json echo = run_echo("train-source", cfg);
  const DatasetHandle train = load_split(cfg, true);
  const DatasetHandle test = load_split(cfg, false);
  const ArchitectureDescriptor arch = cfg.architecture(train.images.dim(1), train.images.dim(2), train.images.dim(3),
                                                       std::max(train.num_classes, test.num_classes));
  const TrainConfig tc = cfg.train_config();
  Rng init(tc.seed);
  const ModelCheckpoint fresh = build_model(arch, init);
  TrainLog tlog;
  ModelCheckpoint model = train_source(fresh, train, tc, &test, &tlog);
  model.extra_config["run"] = echo;

  const fs::path dir = output_dir(cfg);
  const fs::path ckpt = cfg.get<std::string>("checkpoint");
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  save_checkpoint(ckpt, model);

  nlohmann::json epochs = nlohmann::json::array();
  for (const EpochLog& e : tlog.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"mean_loss", e.mean_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"learning_rate", e.learning_rate}});
    log << "epoch " << e.epoch << " loss " << e.mean_loss << " train acc " << e.train_accuracy << "\n";
  }
  nlohmann::json out = echo;
  out["architecture"] = arch;
  out["train"] = dataset_summary(train);
  out["test"] = dataset_summary(test);
  out["epochs"] = std::move(epochs);
  out["clean_test_accuracy"] = tlog.test_accuracy ? nlohmann::json(*tlog.test_accuracy) : nlohmann::json(nullptr);
  out["checkpoint"] = ckpt.string();
  write_json(dir / "train_log.json", out);
  if (tlog.test_accuracy) log << "clean test accuracy " << *tlog.test_accuracy << "\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, std::ostream& log) {
  const nlohmann::json echo = run_echo("eval", cfg);
  const ModelCheckpoint model = load_source(cfg);
  const DatasetHandle test = load_split(cfg, false);
  const Index batch = cfg.get<Index>("batch_size");

  nlohmann::json rows = nlohmann::json::array();
  std::string csv = "corruption,severity,seed,top1_error\n";
  for (const SuiteCorruption& c : cfg.corruptions())
    for (std::uint64_t seed : cfg.seeds()) {
      Index wrong = 0, total = 0;
      for (const Batch& b : make_target_stream(test, c, seed, batch, cfg.get<bool>("shuffle"))) {
        const std::vector<int> pred = argmax_rows(forward(model, b.images, NormMode::source_stats).logits);
        for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != b.labels[i] ? 1 : 0;
        total += b.size();
      }
      const double err = 100.0 * static_cast<double>(wrong) / static_cast<double>(total);
      rows.push_back({{"corruption", to_string(c.kind)}, {"severity", c.severity}, {"seed", seed}, {"top1_error", err}});
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f", err);
      csv += to_string(c.kind) + "," + std::to_string(c.severity) + "," + std::to_string(seed) + "," + buf + "\n";
      log << to_string(c.kind) << ":" << c.severity << " seed " << seed << " error " << buf << "%\n";
    }
  const double clean_err = 100.0 * (1.0 - evaluate_accuracy(model, test, NormMode::source_stats, batch));

  const fs::path dir = output_dir(cfg);
  nlohmann::json out = echo;
  out["clean_top1_error"] = clean_err;
  out["results"] = std::move(rows);
  write_json(dir / "eval.json", out);
  write_file(dir / "eval.csv", csv);
  return kExitOk;
}

// Selection globs are checked against the checkpoint before any work so that
// a bad glob is a configuration error, not a failed run.
void check_methods(const std::vector<MethodSpec>& methods, const ModelCheckpoint& model) {
  std::vector<std::string> problems;
  for (const MethodSpec& m : methods) {
    if (!m.uses_modulator()) continue;
    ModulatorParamSet probe = m.modulator;
    try {
      probe.bind(model);
    } catch (const std::exception& e) {
      problems.push_back("modulator_selection: " + std::string(e.what()));
    }
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

int cmd_adapt(const RunConfig& cfg, std::ostream& log) {
  const nlohmann::json echo = run_echo("adapt", cfg);
  const ModelCheckpoint model = load_source(cfg);
  const std::vector<MethodSpec> methods = cfg.methods();
  check_methods(methods, model);
  const DatasetHandle test = load_split(cfg, false);
  const auto corruptions = cfg.corruptions();
  const auto seeds = cfg.seeds();
  const fs::path dir = output_dir(cfg);

  SuiteOptions opts;
  opts.batch_size = cfg.get<Index>("batch_size");
  opts.shuffle = cfg.get<bool>("shuffle");
  opts.config_echo = echo;

  SuiteResult suite;
  if (methods.size() == 1 && corruptions.size() == 1 && seeds.size() == 1) {
    // Single run: also keep the adapted model.
    SuiteCell cell;
    cell.method = methods[0].name();
    cell.corruption = to_string(corruptions[0].kind);
    cell.severity = corruptions[0].severity;
    cell.seed = seeds[0];
    AdaptOptions ao;
    ao.config_echo = echo;
    ao.config_echo["corruption"] = cell.corruption + ":" + std::to_string(cell.severity);
    ao.config_echo["seed"] = cell.seed;
    AdaptationResult r = run_adaptation(
        model, methods[0], make_target_stream(test, corruptions[0], seeds[0], opts.batch_size, opts.shuffle), ao);
    cell.report = std::move(r.report);
    cell.failed = !cell.report.complete;
    r.model.extra_config["run"] = ao.config_echo;
    save_checkpoint(dir / "adapted.ckpt", r.model);
    suite.cells.push_back(std::move(cell));
  } else {
    suite = run_ablation_suite(model, test, corruptions, methods, seeds, opts);
  }

  nlohmann::json out = to_json(suite);
  out["config"] = echo;
  write_json(dir / "report.json", out);
  write_file(dir / "results.csv", suite_csv(suite));

  bool failed = false;
  for (const SuiteCell& c : suite.cells) {
    if (c.failed) {
      failed = true;
      log << c.method << " " << c.corruption << ":" << c.severity << " seed " << c.seed << " FAILED: " << c.report.failure
          << "\n";
    }
  }
  for (const SuiteMean& m : suite.means())
    log << m.method << " " << m.corruption << ":" << m.severity << " top-1 error " << m.top1_error << "% over "
        << m.seeds << " seed(s)\n";
  return failed ? kExitRuntime : kExitOk;
}

int cmd_export_features(const RunConfig& cfg, std::ostream& log) {
  const nlohmann::json echo = run_echo("export-features", cfg);
  const ModelCheckpoint model = load_source(cfg);
  const MethodSpec method = cfg.method_spec(parse_method(cfg.get<std::string>("method")));
  check_methods({method}, model);
  const DatasetHandle test = load_split(cfg, false);
  const auto taps = cfg.get<std::vector<std::string>>("taps");
  const fs::path dir = output_dir(cfg);

  nlohmann::json runs = nlohmann::json::array();
  Container maps;
  maps.header["kind"] = "feature_maps";
  maps.header["run"] = echo;
  bool failed = false;
  std::size_t index = 0;
  for (const SuiteCorruption& c : cfg.corruptions())
    for (std::uint64_t seed : cfg.seeds()) {
      const FeatureExport fx = export_features(model, test, c, seed, method, taps, cfg.get<Index>("batch_size"),
                                               cfg.get<bool>("shuffle"), cfg.get<Index>("max_maps"), echo);
      nlohmann::json tap_json = nlohmann::json::object();
      for (const auto& [tap, cmp] : fx.taps) {
        tap_json[tap] = {{"clean", cmp.clean.to_json()},
                         {"corrupted", cmp.corrupted.to_json()},
                         {"adapted", cmp.adapted.to_json()},
                         {"l1_corrupted_vs_clean", cmp.l1_corrupted},
                         {"l1_adapted_vs_clean", cmp.l1_adapted}};
        log << to_string(c.kind) << ":" << c.severity << " seed " << seed << " " << tap << " L1 corrupted "
            << cmp.l1_corrupted << " adapted " << cmp.l1_adapted << "\n";
      }
      runs.push_back({{"corruption", to_string(c.kind)},
                      {"severity", c.severity},
                      {"seed", seed},
                      {"method", method.name()},
                      {"complete", fx.report.complete},
                      {"adapted_top1_error",
                       fx.report.top1_error ? nlohmann::json(*fx.report.top1_error) : nlohmann::json(nullptr)},
                      {"taps", std::move(tap_json)}});
      failed = failed || !fx.report.complete;
      const std::string prefix = "run" + std::to_string(index++) + ".";
      for (const auto& [name, t] : {std::pair{"clean", &fx.clean_maps}, std::pair{"corrupted", &fx.corrupted_maps},
                                    std::pair{"adapted", &fx.adapted_maps}})
        if (!t->empty()) maps.entries.push_back({prefix + name, "conv1_maps", *t});
    }
  nlohmann::json out = echo;
  out["bins"] = kHistogramBins;
  out["runs"] = std::move(runs);
  write_json(dir / "features.json", out);
  write_file(dir / "conv1_maps.nhlf", encode_container(maps));
  return failed ? kExitRuntime : kExitOk;
}

std::string flag_name(const std::string& key) {
  std::string s = "--" + key;
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

}  // namespace

int run_command(const std::string& command, const RunConfig& config, std::ostream& log) {
  try {
    if (command == "make-dataset") return cmd_make_dataset(config, log);
    if (command == "train-source") return cmd_train_source(config, log);
    if (command == "eval") return cmd_eval(config, log);
    if (command == "adapt") return cmd_adapt(config, log);
    if (command == "export-features") return cmd_export_features(config, log);
    log << "error: unknown command '" << command << "'\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    log << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InputError& e) {
    log << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Neuro-modulated Hebbian test-time adaptation"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path, "flat JSON run configuration; flags override its values");
  FlagValues flags;
  for (const ConfigField& f : config_fields()) {
    std::vector<std::string>& slot = flags[f.key];
    const std::string help = f.help + " (default " + f.default_value.dump() + ")";
    if (f.type == FieldType::boolean) {
      app.add_flag(flag_name(f.key) + "{true}", slot, help);
    } else {
      CLI::Option* opt = app.add_option(flag_name(f.key), slot, help);
      if (f.is_list()) opt->delimiter(',');
      else opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
  }
  const std::vector<std::pair<std::string, std::string>> commands{
      {"make-dataset", "write train/test dataset caches"},
      {"train-source", "train the source model and write its checkpoint"},
      {"eval", "evaluate the source model on corrupted test streams"},
      {"adapt", "run test-time adaptation (one method, or --suite paper-ablation)"},
      {"export-features", "per-channel feature histograms for clean, corrupted and adapted runs"}};
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  nlohmann::json file;
  if (!config_path.empty()) {
    try {
      file = nlohmann::json::parse(read_file(config_path));
    } catch (const std::exception& e) {
      std::cerr << "error: config file " << config_path << ": " << e.what() << "\n";
      return kExitConfig;
    }
  }
  // Options that were not given leave their slot empty.
  for (auto it = flags.begin(); it != flags.end();) it = it->second.empty() ? flags.erase(it) : std::next(it);

  RunConfig cfg;
  try {
    cfg = RunConfig::merge(file, flags);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return run_command(app.get_subcommands().front()->get_name(), cfg, std::cerr);
}

}  // namespace nhl
