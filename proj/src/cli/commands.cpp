#include <CLI11.hpp>
#include <algorithm>
#include <fstream>
#include <iostream>
#include <limits>

#include "muffin/cli.hpp"
#include "muffin/error.hpp"

namespace muffin::cli {

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void echo_config(const RunConfig& config) {
  std::filesystem::create_directories(config.output);
  open_output(config.output / "config.ini") << format_run_config(config);
}

std::vector<std::size_t> parse_cutoffs(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& item : parse_list(text)) {
    if (item.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("cutoff '" + item + "' is not a positive integer");
    out.push_back(std::stoul(item));
  }
  if (out.empty()) throw ConfigError("--ks needs at least one cutoff");
  return out;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Data: return 3;
    case ErrorKind::Io: return 4;
    case ErrorKind::Numeric: return 5;
    default: return 1;
  }
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Frequency-domain sequential recommender: data preparation, training and analysis"};
  app.require_subcommand(1);

  std::string input, output, spec, config_path, checkpoint, dataset, split = "test", variants, users, param, grid;
  std::string ks_text = "5,10,20", baseline;
  std::size_t min_core = 5, layer = 1, threads = 1, first_users = 0, context = 50;

  auto* pre = app.add_subcommand("preprocess", "Filter a raw log and build the sequence cache");
  pre->add_option("--input", input, "TSV log: user, item, timestamp")->required();
  pre->add_option("--output", output, "Sequence cache path")->required();
  pre->add_option("--min-core", min_core, "Minimum interactions per user and item")->capture_default_str();

  auto* syn = app.add_subcommand("synth", "Generate a synthetic interaction log");
  syn->add_option("--spec", spec, "INI spec ([synth] section)")->required();
  syn->add_option("--output", output, "TSV log path")->required();

  auto* tr = app.add_subcommand("train", "Train every configured seed and report test metrics");
  tr->add_option("--config", config_path, "Run config")->required();
  tr->add_option("--output", output, "Override [run] output");

  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint or a baseline on one split");
  ev->add_option("--checkpoint", checkpoint, "Model checkpoint");
  ev->add_option("--baseline", baseline, "Baseline instead of a checkpoint")->check(CLI::IsMember({"popularity"}));
  ev->add_option("--dataset", dataset, "Sequence cache or TSV log")->required();
  ev->add_option("--split", split, "valid or test")->capture_default_str();
  ev->add_option("--ks", ks_text, "Comma-separated cutoffs")->capture_default_str();
  ev->add_option("--n", context, "Context length for baselines")->capture_default_str();
  ev->add_option("--threads", threads, "Evaluation threads")->capture_default_str();
  ev->add_option("--output", output, "Report path (stdout when absent)");

  auto* ab = app.add_subcommand("ablate", "Train each variant over the shared seeds and compare");
  ab->add_option("--config", config_path, "Run config")->required();
  ab->add_option("--variants", variants, "Comma-separated variant names (default: all)");
  ab->add_option("--output", output, "Override [run] output");

  auto* inf = app.add_subcommand("inspect-filters", "Dump per-user effective filter amplitudes");
  inf->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  inf->add_option("--dataset", dataset, "Sequence cache or TSV log")->required();
  inf->add_option("--users", users, "Comma-separated user ids");
  inf->add_option("--first-users", first_users, "Use the first N users of the dataset");
  inf->add_option("--layer", layer, "Layer, counted from 1")->capture_default_str();
  inf->add_option("--output", output, "CSV path")->required();

  auto* ing = app.add_subcommand("inspect-gates", "Dump mean gate probability per band");
  ing->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  ing->add_option("--dataset", dataset, "Sequence cache or TSV log")->required();
  ing->add_option("--split", split, "valid or test")->capture_default_str();
  ing->add_option("--output", output, "CSV path")->required();

  auto* sw = app.add_subcommand("sweep", "Train one run per grid value and seed");
  sw->add_option("--config", config_path, "Run config")->required();
  sw->add_option("--param", param, "K, alpha, beta or c")->required();
  sw->add_option("--grid", grid, "Comma-separated values")->required();
  sw->add_option("--output", output, "Override [run] output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_prefix(ErrorKind::Config) << e.what() << '\n';
    return exit_code(ErrorKind::Config);
  }

  auto load_config = [&]() {
    RunConfig c = parse_run_config(config_path);
    if (!output.empty()) c.output = output;
    return c;
  };

  try {
    if (*pre) {
      const data::InteractionLog raw = data::deduplicate(data::read_log(input));
      const data::InteractionLog core = min_core > 1 ? data::five_core(raw, min_core) : raw;
      std::vector<std::string> warnings;
      const data::SequenceDataset ds = data::build_sequences(core, &warnings);
      for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
      if (std::filesystem::path(output).has_parent_path())
        std::filesystem::create_directories(std::filesystem::path(output).parent_path());
      data::save_dataset(ds, output);
      std::cout << data::format_stats(data::dataset_stats(ds));
    } else if (*syn) {
      const data::SynthSpec s = data::parse_synth_spec(std::filesystem::path(spec));
      const data::InteractionLog log = data::synth_generate(s);
      if (std::filesystem::path(output).has_parent_path())
        std::filesystem::create_directories(std::filesystem::path(output).parent_path());
      data::write_log(log, output);
      const auto counts = data::population_counts(s);
      std::cout << "records\t" << log.records.size() << "\nslow\t" << counts[0] << "\nmulti\t" << counts[1]
                << "\nrapid\t" << counts[2] << '\n';
    } else if (*tr) {
      const RunConfig c = load_config();
      const data::SequenceDataset ds = load_any_dataset(c.dataset, c.min_core, &std::cerr);
      echo_config(c);
      std::vector<eval::EvalReport> reports;
      for (std::uint64_t seed : c.seeds)
        reports.push_back(run_seed(c, ds, seed, c.output / ("seed-" + std::to_string(seed)), &std::cerr).test);
      const auto summary = eval::aggregate(reports);
      eval::write_report(std::cout, summary);
      auto out = open_output(c.output / "report.tsv");
      eval::write_report(out, summary);
    } else if (*ev) {
      if (checkpoint.empty() == baseline.empty()) throw ConfigError("give exactly one of --checkpoint or --baseline");
      const data::SequenceDataset ds = load_any_dataset(dataset, 5, &std::cerr);
      eval::EvalOptions opt;
      opt.ks = parse_cutoffs(ks_text);
      opt.threads = threads;
      eval::Scorer scorer;
      model::ModelParams params;
      if (!checkpoint.empty()) {
        params = model::load_checkpoint(checkpoint);
        opt.n = params.config.n;
        if (params.config.num_items != ds.num_items()) throw DataError("checkpoint vocabulary does not match the dataset");
        scorer = eval::model_scorer(params);
      } else {
        opt.n = context;
        scorer = eval::popularity_scorer(ds);
      }
      const eval::EvalReport report = eval::evaluate(scorer, ds, data::parse_split(split), opt);
      if (!eval::monotone_in_k(report)) throw NumericError("metrics are not monotone in K");
      if (output.empty()) {
        std::cout << eval::format_report(report);
      } else {
        open_output(output) << eval::format_report(report);
      }
    } else if (*ab) {
      const RunConfig c = load_config();
      const auto names = variants.empty() ? variant_names() : parse_list(variants);
      check_variants(c, names);
      const data::SequenceDataset ds = load_any_dataset(c.dataset, c.min_core, &std::cerr);
      echo_config(c);
      const auto results = ablate(c, ds, names, &std::cerr);
      std::vector<ComparisonRow> rows;
      if (std::find(names.begin(), names.end(), "full") != names.end()) {
        rows = compare_to_full(results);
      } else {
        for (const auto& r : results)
          for (const auto& s : r.summary)
            rows.push_back({r.variant, s.metric, s.k, s.mean, s.std, 0.0, 0.0, std::numeric_limits<double>::quiet_NaN()});
      }
      write_comparison(std::cout, rows);
      auto out = open_output(c.output / "ablation.tsv");
      write_comparison(out, rows);
    } else if (*inf) {
      if (layer < 1) throw ConfigError("--layer counts from 1");
      model::ModelParams params = model::load_checkpoint(checkpoint);
      const data::SequenceDataset ds = load_any_dataset(dataset, 5, &std::cerr);
      std::vector<std::string> names = parse_list(users);
      for (std::size_t u = 0; u < std::min(first_users, ds.num_users()); ++u) names.push_back(ds.user_ids[u]);
      if (names.empty()) throw ConfigError("give --users or --first-users");
      std::vector<std::string> warnings;
      const auto rows = inspect_filters(params, ds, names, layer - 1, &warnings);
      for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
      auto out = open_output(output);
      write_filter_csv(out, rows);
    } else if (*ing) {
      model::ModelParams params = model::load_checkpoint(checkpoint);
      const data::SequenceDataset ds = load_any_dataset(dataset, 5, &std::cerr);
      const auto rows = gate_means(params, ds, data::parse_split(split));
      auto out = open_output(output);
      write_gate_csv(out, rows);
      std::cout << "spread\t" << gate_spread(rows) << '\n';
    } else if (*sw) {
      const RunConfig c = load_config();
      const auto values = parse_list(grid);
      check_sweep_grid(c, param, values);
      const data::SequenceDataset ds = load_any_dataset(c.dataset, c.min_core, &std::cerr);
      echo_config(c);
      const auto rows = sweep(c, ds, param, values, &std::cerr);
      write_sweep(std::cout, rows);
      auto out = open_output(c.output / ("sweep_" + param + ".tsv"));
      write_sweep(out, rows);
    }
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << error_prefix(ErrorKind::Io) << e.what() << '\n';
    return exit_code(ErrorKind::Io);
  }
  return 0;
}

}  // namespace muffin::cli
