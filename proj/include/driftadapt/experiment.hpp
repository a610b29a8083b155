#pragma once

#include "driftadapt/degradation.hpp"
#include "driftadapt/engine.hpp"
#include "driftadapt/model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace driftadapt {

/// Everything one experiment needs. Paths are taken relative to the working
/// directory. `from_json` rejects unknown keys at every level.
struct ExperimentConfig {
  std::filesystem::path clean_root;     // root/<class>/<images>
  std::vector<std::string> classes;     // optional; when set every class folder must exist
  std::filesystem::path sequence_root;  // synthesized domains plus manifest.json
  std::filesystem::path output_dir = "runs";
  std::filesystem::path source_checkpoint;  // defaults to output_dir/source.ckpt

  DegradationKind degradation = DegradationKind::snowfall;
  std::uint64_t degradation_seed = 0;
  std::optional<DegradationSchedule> schedule;  // overrides the default table

  SourceTrainingConfig source;
  AdaptationConfig adaptation;  // grad_norm and seed are set per run
  std::vector<bool> grad_norm_settings = {true, false};
  std::vector<std::uint64_t> seeds = {0};

  std::filesystem::path source_checkpoint_path() const;
  DegradationSchedule effective_schedule() const;
  void validate() const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& doc);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// Writes the degraded sequence; returns the manifest hash.
std::string cmd_synthesize(const ExperimentConfig& config);

/// Trains on the sequence's source domain and writes the checkpoint.
SourceTrainingLog cmd_train_source(const ExperimentConfig& config);

/// One row of the results table.
struct RunResult {
  std::string run_id;
  std::string method;
  std::string backbone;
  double eta0 = 0.0;
  bool grad_norm = false;
  std::uint64_t seed = 0;
  double source_accuracy = 0.0;
  double final_accuracy = 0.0;
  double max_chunk_drop = 0.0;
  std::vector<double> chunk_accuracies;
};

/// Fixed header of results.csv.
const std::vector<std::string>& results_columns();
void write_results_csv(const std::filesystem::path& path, const std::vector<RunResult>& rows);
std::vector<RunResult> read_results_csv(const std::filesystem::path& path);

/// Largest decrease between consecutive entries (0 when accuracy never drops).
/// The source-only accuracy, when given, counts as the entry before the first chunk.
double max_chunk_drop(const std::vector<double>& accuracies, std::optional<double> before = {});

struct RunOptions {
  bool resume = false;  // continue from per-run engine checkpoints when present
  bool quiet = false;
};

/// Runs every (seed x grad-norm setting). Writes under output_dir:
/// config.json, results.csv, summary.json, runs/<id>/{trace.jsonl,summary.json,engine.ckpt}
/// and plots/seed_<s>.svg.
std::vector<RunResult> cmd_adapt(const ExperimentConfig& config, const RunOptions& options = {});

struct ReportRow {
  std::string method;
  std::string backbone;
  double eta0 = 0.0;
  bool grad_norm = false;
  std::size_t runs = 0;
  double mean = 0.0;
  double stdev = 0.0;  // sample standard deviation, 0 for a single run
  int rank = 0;        // 1 best, 2 second within its grad-norm column, else 0
};

std::vector<ReportRow> aggregate_results(const std::vector<RunResult>& rows);
std::string format_report(const std::vector<ReportRow>& rows);
void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows);

/// Aggregates one or more results.csv files; throws ValidationError on schema mismatch.
std::vector<ReportRow> cmd_report(const std::vector<std::filesystem::path>& results,
                                  const std::filesystem::path& csv_out = {});

/// Accuracy-vs-chunk line plot, one series per label.
void write_accuracy_svg(const std::filesystem::path& path, const std::string& title,
                        const std::vector<std::pair<std::string, std::vector<double>>>& series);

}  // namespace driftadapt
