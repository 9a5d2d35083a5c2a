#include "varan/cli.hpp"

#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "varan/container.hpp"
#include "varan/distributions.hpp"
#include "varan/gradcheck.hpp"
#include "varan/training.hpp"

namespace varan::cli {

namespace {

std::map<std::string, std::string> parse_overrides(const std::vector<std::string>& extras) {
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& tok = extras[i];
    if (tok.rfind("--", 0) != 0 || tok.size() < 3) throw ConfigError("unexpected argument '" + tok + "'");
    std::string key = tok.substr(2);
    std::string value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.resize(eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("missing value for --" + key);
      value = extras[++i];
    }
    out[key] = value;
  }
  return out;
}

void require_path(const std::string& value, const char* key) {
  if (value.empty()) throw ConfigError(std::string("paths.") + key + " must be set for this subcommand");
}

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& doc) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << doc.dump(2) << '\n';
}

std::unique_ptr<std::ofstream> open_metrics(const std::filesystem::path& path) {
  if (path.empty()) return nullptr;
  auto f = std::make_unique<std::ofstream>(path);
  if (!*f) throw std::runtime_error("cannot write " + path.string());
  return f;
}


int cmd_gen_data(const RunConfig& config, std::ostream& out) {
  require_path(config.paths.dataset, "dataset");
  const SynthDataset ds = generate_dataset(config.synth_spec());
  save_dataset(config.paths.dataset, ds);
  out << "wrote " << config.paths.dataset << " (" << ds.train.size() << '/' << ds.val.size() << '/'
      << ds.test.size() << " samples)\n";
  return kExitOk;
}

int cmd_train(const RunConfig& config, std::ostream& out) {
  require_path(config.paths.checkpoint, "checkpoint");
  const SynthDataset ds = dataset_for(config);
  auto metrics = open_metrics(config.paths.metrics);
  const TrainResult r = train(config, ds, config.model.kind, metrics.get());
  save_checkpoint(config.paths.checkpoint, r.checkpoint);
  out << "test " << metrics_record(r.checkpoint.step, "test", r.test).dump() << '\n';
  return kExitOk;
}

int cmd_eval(const RunConfig& config, const std::string& split_name, std::ostream& out) {
  require_path(config.paths.checkpoint, "checkpoint");
  const SynthDataset ds = dataset_for(config);
  const SplitData& split = ds.split(split_name);
  const Checkpoint ckpt = load_checkpoint(config.paths.checkpoint, config.model.kind);
  const EvalResult r = evaluate(config, ckpt.state, split);
  out << metrics_record(ckpt.step, split_name, r.metrics).dump() << '\n';
  if (!config.paths.exports.empty() && ckpt.state.kind == ModelKind::varan) {
    export_weight_analysis(config, ckpt, split, config.paths.exports);
    out << "wrote " << config.paths.exports << '\n';
  }
  return kExitOk;
}

int cmd_compare(const RunConfig& config, std::ostream& out) {
  require_path(config.paths.report, "report");
  const SynthDataset ds = dataset_for(config);
  const auto report = run_compare(config, ds, &out);
  out << report.dump(2) << '\n';
  return kExitOk;
}

int cmd_plot_prior(double df, std::size_t layers, const std::string& path, std::ostream& out) {
  if (path.empty()) throw ConfigError("--out must be set");
  const Categorical prior = discretized_reversed_chi2(PriorSpec{df, layers});
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  write_pmf_csv(f, prior);
  out << "wrote " << path << '\n';
  return kExitOk;
}

int cmd_grad_check(int seeds, std::ostream& out) {
  bool ok = true;
  for (const auto& r : run_gradient_suite(seeds)) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-28s %s  seeds=%d failures=%d worst_rel=%.3e\n", r.name.c_str(),
                  r.passed() ? "ok  " : "FAIL", r.seeds, r.failures, r.worst_rel_error);
    out << buf;
    ok = ok && r.passed();
  }
  out << (ok ? "all gradient checks passed\n" : "gradient check FAILED\n");
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace

std::filesystem::path tagged_path(const std::filesystem::path& base, const std::string& tag) {
  std::filesystem::path p = base;
  p.replace_filename(base.stem().string() + "_" + tag + base.extension().string());
  return p;
}

SynthDataset dataset_for(const RunConfig& config) {
  if (!config.paths.dataset.empty() && std::filesystem::exists(config.paths.dataset)) {
    SynthDataset ds = load_dataset(config.paths.dataset);
    return ds;
  }
  return generate_dataset(config.synth_spec());
}

nlohmann::ordered_json run_compare(const RunConfig& config, const SynthDataset& data, std::ostream* log) {
  const std::filesystem::path report_path = config.paths.report;
  std::filesystem::path exports = config.paths.exports;
  if (exports.empty()) exports = tagged_path(report_path, "weights").replace_extension(".csv");

  nlohmann::ordered_json report;
  report["seed"] = config.seed;
  report["dataset"] = to_json(data.spec);
  report["models"] = nlohmann::ordered_json::array();
  for (ModelKind kind : {ModelKind::varan, ModelKind::weighted_sum, ModelKind::last_layer}) {
    const std::string name = to_string(kind);
    std::unique_ptr<std::ofstream> metrics;
    if (!config.paths.metrics.empty()) metrics = open_metrics(tagged_path(config.paths.metrics, name));
    const TrainResult r = train(config, data, kind, metrics.get());
    if (!config.paths.checkpoint.empty()) save_checkpoint(tagged_path(config.paths.checkpoint, name), r.checkpoint);

    nlohmann::ordered_json entry;
    entry["kind"] = name;
    entry["test_accuracy"] = r.test.accuracy;
    entry["weighted_f1"] = r.test.weighted_f1;
    if (kind == ModelKind::varan) {
      export_weight_analysis(config, r.checkpoint, data.test, exports);
      entry["weights_export"] = exports.string();
    } else {
      entry["weights_export"] = nullptr;
    }
    entry["best_step"] = r.checkpoint.step;
    entry["best_val_accuracy"] = r.checkpoint.best_val_metric;
    if (log) *log << name << ": test accuracy " << r.test.accuracy << ", weighted F1 " << r.test.weighted_f1 << '\n';
    report["models"].push_back(std::move(entry));
  }
  write_json(report_path, report);
  return report;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Input-dependent aggregation of encoder layers with a learned posterior over layers"};
  app.require_subcommand(1);
  app.footer("Config keys (set in --config JSON or as --key value):\n" + config_help());

  std::string config_file;
  std::string split_name = "test";
  double df = 3.0;
  std::size_t layers = 12;
  std::string out_path;
  int seeds = 50;

  auto add_run = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_file, "JSON config file");
    sub->allow_extras();
    sub->footer("Any config key may be passed as --key value; see `varan --help`.");
    return sub;
  };
  auto* gen = add_run("gen-data", "Generate the synthetic regime-switching dataset");
  auto* trn = add_run("train", "Train one model kind (model.kind)");
  auto* evl = add_run("eval", "Evaluate a checkpoint; varan checkpoints also export per-sample weights");
  evl->add_option("--split", split_name, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  auto* cmp = add_run("compare", "Train varan and both static baselines, then write a report");
  auto* plot = app.add_subcommand("plot-prior", "Write the discretized reversed chi-squared prior as CSV");
  plot->add_option("--df", df, "Degrees of freedom")->check(CLI::PositiveNumber);
  plot->add_option("--layers", layers, "Number of layers")->check(CLI::PositiveNumber);
  plot->add_option("--out", out_path, "Output CSV")->required();
  auto* grad = app.add_subcommand("grad-check", "Run the finite-difference gradient suite");
  grad->add_option("--seeds", seeds, "Random draws per case")->check(CLI::PositiveNumber);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitValidation;
  }

  try {
    if (plot->parsed()) return cmd_plot_prior(df, layers, out_path, out);
    if (grad->parsed()) return cmd_grad_check(seeds, out);

    CLI::App* sub = app.get_subcommands().front();
    const auto overrides = parse_overrides(sub->remaining());
    RunConfig config = resolve_config(config_file, overrides, &err);
    config.task = sub->get_name();
    config.validate();
    if (sub == gen) return cmd_gen_data(config, out);
    if (sub == trn) return cmd_train(config, out);
    if (sub == evl) return cmd_eval(config, split_name, out);
    if (sub == cmp) return cmd_compare(config, out);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitRuntime;
}

}  // namespace varan::cli
