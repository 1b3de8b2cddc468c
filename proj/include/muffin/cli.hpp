#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "muffin/data.hpp"
#include "muffin/eval.hpp"
#include "muffin/model.hpp"
#include "muffin/training.hpp"

namespace muffin::cli {

// Everything a run needs. Parsed from a flat INI file with [data], [model],
// [train] and [run] sections; unknown sections or keys are rejected.
struct RunConfig {
  std::filesystem::path dataset;  // sequence cache or raw TSV log
  std::string profile = "default";
  std::size_t min_core = 5;  // applied when `dataset` is a raw log
  model::ModelConfig model;  // num_items comes from the dataset
  bool dropout_explicit = false;
  training::TrainConfig train;
  std::vector<std::uint64_t> seeds = {42};
  std::vector<std::size_t> ks = {5, 10, 20};
  std::filesystem::path output = "runs/default";

  // Checks every field that does not depend on the dataset.
  void validate() const;
};

// ml-1m trains with dropout 0.1, every other profile with 0.4.
double profile_dropout(const std::string& profile);

RunConfig parse_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(std::istream& in, const std::string& source);
// Effective configuration with every default spelled out; parses back to an
// identical RunConfig.
std::string format_run_config(const RunConfig& config);

// Loads a cache written by save_dataset, or ingests a raw log (dedupe,
// k-core filter, sequence construction).
data::SequenceDataset load_any_dataset(const std::filesystem::path& path, std::size_t min_core,
                                       std::ostream* log = nullptr);

// Ablation variants in report order. "full" leaves the config untouched.
const std::vector<std::string>& variant_names();
void apply_variant(const std::string& name, RunConfig& config);
// Rejects unknown names and variants whose config is invalid, before any compute.
void check_variants(const RunConfig& config, const std::vector<std::string>& variants);
std::vector<std::string> parse_list(const std::string& text);

struct RunOutcome {
  std::uint64_t seed = 0;
  training::TrainResult trained;
  eval::EvalReport test;
};

// Trains one seed and evaluates the best checkpoint on the test split. With a
// non-empty out_dir, writes history.jsonl, model.ckpt and report.tsv there.
RunOutcome run_seed(const RunConfig& config, const data::SequenceDataset& ds, std::uint64_t seed,
                    const std::filesystem::path& out_dir, std::ostream* log = nullptr);

struct VariantResult {
  std::string variant;
  std::vector<eval::EvalReport> reports;  // one per seed
  std::vector<eval::MetricSummary> summary;
};

struct ComparisonRow {
  std::string variant;
  std::string metric;
  std::size_t k = 0;
  double mean = 0.0;
  double std = 0.0;
  double delta = 0.0;       // full minus this variant, mean over seeds
  double delta_std = 0.0;   // sample std of the per-seed differences
  double p_value = 1.0;     // one-tailed paired test that full is better
};

std::vector<VariantResult> ablate(const RunConfig& config, const data::SequenceDataset& ds,
                                  const std::vector<std::string>& variants, std::ostream* log = nullptr);
// Requires "full" among the results.
std::vector<ComparisonRow> compare_to_full(const std::vector<VariantResult>& results);
void write_comparison(std::ostream& out, const std::vector<ComparisonRow>& rows);

// Sweepable parameters: K, alpha, beta, c.
struct SweepRow {
  std::string param;
  std::string value;
  std::vector<eval::MetricSummary> summary;
};
void apply_sweep_value(RunConfig& config, const std::string& param, const std::string& value);
void check_sweep_grid(const RunConfig& config, const std::string& param, const std::vector<std::string>& grid);
std::vector<SweepRow> sweep(const RunConfig& config, const data::SequenceDataset& ds,
                            const std::string& param, const std::vector<std::string>& grid,
                            std::ostream* log = nullptr);
void write_sweep(std::ostream& out, const std::vector<SweepRow>& rows);

// Per (user, branch, bin): feature-mean amplitude of the effective filter of
// one layer, with the mean and population std of that bin across users.
struct FilterRow {
  std::string user;
  std::string branch;  // "global" or "local"
  std::size_t bin = 0;
  double amplitude = 0.0;
  double cross_user_mean = 0.0;
  double cross_user_std = 0.0;
};
// layer is 0-based. Unknown users are skipped and reported to `warnings`.
std::vector<FilterRow> inspect_filters(model::ModelParams& params, const data::SequenceDataset& ds,
                                       const std::vector<std::string>& users, std::size_t layer,
                                       std::vector<std::string>* warnings = nullptr);
void write_filter_csv(std::ostream& out, const std::vector<FilterRow>& rows);

// Mean gate probability per band over a split; one row per layer.
std::vector<std::vector<double>> gate_means(model::ModelParams& params, const data::SequenceDataset& ds,
                                            data::Split split, std::size_t batch_size = 256);
void write_gate_csv(std::ostream& out, const std::vector<std::vector<double>>& rows);
// max_t p_t - min_t p_t of the layer-averaged gate means.
double gate_spread(const std::vector<std::vector<double>>& rows);

// Subcommand entry point; returns the process exit code.
int run(int argc, char** argv);

}  // namespace muffin::cli
