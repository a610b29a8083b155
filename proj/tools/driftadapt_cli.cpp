// driftadapt: synthesize degraded domains, train a source model, run continual
// adaptation and summarize results.

#include "driftadapt/dataset.hpp"
#include "driftadapt/error.hpp"
#include "driftadapt/experiment.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <iostream>
#include <optional>

namespace da = driftadapt;

namespace {

struct Overrides {
  std::string config;
  std::string clean_root, sequence_root, output_dir, source_checkpoint;
  std::string degradation, method, grad_norm, backbone, buffer_policy;
  std::optional<double> eta0;
  std::optional<std::size_t> buffer_size;
  std::optional<int> chunk_size, epochs_per_chunk, minibatch_size, source_epochs;
  std::optional<std::uint64_t> degradation_seed;
  std::vector<std::uint64_t> seeds;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "experiment config (JSON)");
  cmd->add_option("--clean-root", o.clean_root, "clean dataset, root/<class>/<images>");
  cmd->add_option("--sequence-root", o.sequence_root, "synthesized domain sequence directory");
  cmd->add_option("--output-dir", o.output_dir, "results directory");
  cmd->add_option("--source-checkpoint", o.source_checkpoint, "source model checkpoint path");
}

void add_adaptation(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--method", o.method, "adaptation method")->check(CLI::IsMember({"cshot", "conda", "uclgv"}));
  cmd->add_option("--grad-norm", o.grad_norm, "gradient normalization")->check(CLI::IsMember({"on", "off", "both"}));
  cmd->add_option("--eta0", o.eta0, "initial learning rate");
  cmd->add_option("--buffer-size", o.buffer_size, "replay buffer capacity");
  cmd->add_option("--buffer-policy", o.buffer_policy, "buffer retention policy")
      ->check(CLI::IsMember({"confidence", "random"}));
  cmd->add_option("--chunk-size", o.chunk_size, "samples per incoming chunk");
  cmd->add_option("--epochs-per-chunk", o.epochs_per_chunk, "passes over chunk plus buffer");
  cmd->add_option("--minibatch-size", o.minibatch_size, "minibatch size");
  cmd->add_option("--seed", o.seeds, "run seed (repeatable)");
}

da::ExperimentConfig resolve(const Overrides& o) {
  auto doc = o.config.empty() ? da::ExperimentConfig{}.to_json() : da::ExperimentConfig::load(o.config).to_json();
  auto set = [&](const char* key, const std::string& v) {
    if (!v.empty()) doc[key] = v;
  };
  set("clean_root", o.clean_root);
  set("sequence_root", o.sequence_root);
  set("output_dir", o.output_dir);
  set("source_checkpoint", o.source_checkpoint);
  set("degradation", o.degradation);
  if (o.degradation_seed) doc["degradation_seed"] = *o.degradation_seed;
  if (!o.degradation.empty() && doc.contains("schedule")) doc.erase("schedule");
  if (!o.backbone.empty()) doc["source"]["backbone"] = o.backbone;
  if (o.source_epochs) doc["source"]["epochs"] = *o.source_epochs;
  auto& a = doc["adaptation"];
  if (!o.method.empty()) {
    a["method"] = o.method;
    if (o.buffer_policy.empty()) a.erase("buffer_policy");
  }
  if (!o.buffer_policy.empty()) a["buffer_policy"] = o.buffer_policy;
  if (o.eta0) a["eta0"] = *o.eta0;
  if (o.buffer_size) a["buffer_capacity"] = *o.buffer_size;
  if (o.chunk_size) a["chunk_size"] = *o.chunk_size;
  if (o.epochs_per_chunk) a["epochs_per_chunk"] = *o.epochs_per_chunk;
  if (o.minibatch_size) a["minibatch_size"] = *o.minibatch_size;
  if (o.grad_norm == "both") doc["grad_norm"] = {"on", "off"};
  else if (!o.grad_norm.empty()) doc["grad_norm"] = {o.grad_norm};
  if (!o.seeds.empty()) doc["seeds"] = o.seeds;
  return da::ExperimentConfig::from_json(doc);
}

int fail(const std::string& category, const std::string& message, int code) {
  std::cerr << nlohmann::json{{"error", category}, {"message", message}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual source-free adaptation under gradually degrading weather"};
  app.require_subcommand(1);
  Overrides o;

  auto* shapes = app.add_subcommand("make-shapes", "write the built-in 4-class shapes dataset");
  std::string shapes_out;
  int per_class = 125, size = 32;
  std::uint64_t shapes_seed = 0;
  shapes->add_option("output", shapes_out, "output root")->required();
  shapes->add_option("--per-class", per_class, "images per class");
  shapes->add_option("--size", size, "image side in pixels");
  shapes->add_option("--seed", shapes_seed, "generator seed");

  auto* synth = app.add_subcommand("synthesize", "build degraded intermediate and target domains");
  add_common(synth, o);
  synth->add_option("--degradation", o.degradation, "degradation kind")
      ->check(CLI::IsMember({"cloud_cover", "snowfall"}));
  synth->add_option("--degradation-seed", o.degradation_seed, "degradation seed");

  auto* train = app.add_subcommand("train-source", "train the source model");
  add_common(train, o);
  train->add_option("--backbone", o.backbone, "backbone registry key");
  train->add_option("--epochs", o.source_epochs, "training epochs");

  auto* adapt = app.add_subcommand("adapt", "run continual adaptation for every seed and grad-norm setting");
  add_common(adapt, o);
  add_adaptation(adapt, o);
  bool resume = false, quiet = false;
  adapt->add_flag("--resume", resume, "continue from per-run engine checkpoints");
  adapt->add_flag("-q,--quiet", quiet, "no per-chunk progress");

  auto* report = app.add_subcommand("report", "aggregate results.csv files");
  std::vector<std::string> results;
  std::string report_csv;
  report->add_option("results", results, "results.csv files")->required();
  report->add_option("--csv", report_csv, "write the aggregated table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("input", e.what(), da::exit_code(da::ErrorCategory::input));
  }

  try {
    if (*shapes) {
      da::save_class_folders(shapes_out, da::make_shapes_dataset(per_class, size, shapes_seed));
      std::cout << "wrote " << 4 * per_class << " images to " << shapes_out << '\n';
    } else if (*synth) {
      const auto config = resolve(o);
      const auto hash = da::cmd_synthesize(config);
      std::cout << "sequence written to " << config.sequence_root.string() << " (manifest " << hash << ")\n";
    } else if (*train) {
      const auto config = resolve(o);
      const auto log = da::cmd_train_source(config);
      std::cout << "source model written to " << config.source_checkpoint_path().string()
                << " (train accuracy " << log.train_accuracy << ")\n";
    } else if (*adapt) {
      const auto config = resolve(o);
      const auto rows = da::cmd_adapt(config, {resume, quiet});
      for (const auto& r : rows) {
        std::cout << r.run_id << ": source " << r.source_accuracy << " -> final " << r.final_accuracy
                  << " (max chunk drop " << r.max_chunk_drop << ")\n";
      }
      std::cout << "results in " << (config.output_dir / "results.csv").string() << '\n';
    } else if (*report) {
      std::vector<std::filesystem::path> paths(results.begin(), results.end());
      std::cout << da::format_report(da::cmd_report(paths, report_csv));
    }
  } catch (const da::Error& e) {
    return fail(std::string(da::to_string(e.category())), e.what(), da::exit_code(e.category()));
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
