#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>

#include "muffin/cli.hpp"
#include "muffin/error.hpp"

namespace muffin::cli {

namespace {

eval::EvalOptions eval_options(const RunConfig& c, std::uint64_t seed) {
  eval::EvalOptions opt;
  opt.ks = c.ks;
  opt.n = c.model.n;
  opt.batch_size = c.train.batch_size;
  opt.threads = c.train.threads;
  opt.seed = seed;
  return opt;
}

std::filesystem::path seed_dir(const std::filesystem::path& base, std::uint64_t seed) {
  return base.empty() ? base : base / ("seed-" + std::to_string(seed));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write to " + path.string() + " failed");
}

std::vector<double> per_seed(const VariantResult& r, const std::string& metric, std::size_t k) {
  std::vector<double> out;
  for (const auto& rep : r.reports) out.push_back(rep.metric(metric, k));
  return out;
}

}  // namespace

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {"full", "wo-uaf", "wo-gfm", "wo-lfm", "wo-aux", "wo-bal", "mlp-uaf"};
  return names;
}

void apply_variant(const std::string& name, RunConfig& c) {
  if (name == "full") return;
  if (name == "wo-uaf") {
    c.model.use_uaf = false;
  } else if (name == "wo-gfm") {
    c.model.use_gfm = false;
  } else if (name == "wo-lfm") {
    c.model.use_lfm = false;
  } else if (name == "wo-aux") {
    c.train.alpha = 0.0;
  } else if (name == "wo-bal") {
    c.train.beta = 0.0;
  } else if (name == "mlp-uaf") {
    c.model.uaf_as_mlp = true;
  } else {
    std::string known;
    for (const auto& v : variant_names()) known += (known.empty() ? "" : ", ") + v;
    throw ConfigError("unknown variant '" + name + "' (known: " + known + ")");
  }
}

void check_variants(const RunConfig& config, const std::vector<std::string>& variants) {
  if (variants.empty()) throw ConfigError("no variants requested");
  for (const auto& v : variants) {
    RunConfig c = config;
    apply_variant(v, c);
    c.validate();
  }
}

void check_sweep_grid(const RunConfig& config, const std::string& param, const std::vector<std::string>& grid) {
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  for (const auto& value : grid) {
    RunConfig c = config;
    apply_sweep_value(c, param, value);
    try {
      c.validate();
    } catch (const ConfigError& e) {
      const std::string reason = std::string(e.what()).substr(error_prefix(ErrorKind::Config).size());
      throw ConfigError(param + " = " + value + " rejected: " + reason);
    }
  }
}

RunOutcome run_seed(const RunConfig& config, const data::SequenceDataset& ds, std::uint64_t seed,
                    const std::filesystem::path& out_dir, std::ostream* log) {
  model::ModelConfig mc = config.model;
  mc.num_items = ds.num_items();
  training::TrainConfig tc = config.train;
  tc.seed = seed;

  RunOutcome outcome;
  outcome.seed = seed;
  outcome.trained = training::train(ds, mc, tc, [&](const training::EpochRecord& e) {
    if (!log) return;
    char buf[160];
    std::snprintf(buf, sizeof buf, "seed %llu epoch %zu loss %.5f valid N@20 %.5f%s\n",
                  static_cast<unsigned long long>(seed), e.epoch, e.total, e.valid_ndcg20, e.improved ? " *" : "");
    *log << buf << std::flush;
  });
  outcome.test = eval::evaluate(eval::model_scorer(outcome.trained.best), ds, data::Split::Test, eval_options(config, seed));

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    training::write_history(outcome.trained.history, out_dir / "history.jsonl");
    model::save_checkpoint(outcome.trained.best, out_dir / "model.ckpt");
    write_text(out_dir / "report.tsv", eval::format_report(outcome.test));
  }
  return outcome;
}

std::vector<VariantResult> ablate(const RunConfig& config, const data::SequenceDataset& ds,
                                  const std::vector<std::string>& variants, std::ostream* log) {
  check_variants(config, variants);
  std::vector<RunConfig> configs;
  for (const auto& v : variants) {
    RunConfig c = config;
    apply_variant(v, c);
    configs.push_back(std::move(c));
  }
  std::vector<VariantResult> out;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    VariantResult r;
    r.variant = variants[i];
    const auto base = config.output.empty() ? config.output : config.output / variants[i];
    for (std::uint64_t seed : config.seeds) {
      if (log) *log << "variant " << variants[i] << " seed " << seed << '\n';
      r.reports.push_back(run_seed(configs[i], ds, seed, seed_dir(base, seed), nullptr).test);
    }
    r.summary = eval::aggregate(r.reports);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ComparisonRow> compare_to_full(const std::vector<VariantResult>& results) {
  const VariantResult* full = nullptr;
  for (const auto& r : results)
    if (r.variant == "full") full = &r;
  if (!full) throw ConfigError("comparison needs the full variant");
  std::vector<ComparisonRow> rows;
  for (const auto& r : results) {
    if (r.reports.size() != full->reports.size()) throw ContractError("variants ran on different seed lists");
    for (const auto& s : r.summary) {
      ComparisonRow row;
      row.variant = r.variant;
      row.metric = s.metric;
      row.k = s.k;
      row.mean = s.mean;
      row.std = s.std;
      const auto a = per_seed(*full, s.metric, s.k), b = per_seed(r, s.metric, s.k);
      double sum = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] - b[i];
      row.delta = sum / static_cast<double>(a.size());
      if (a.size() > 1) {
        double sq = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) sq += std::pow(a[i] - b[i] - row.delta, 2);
        row.delta_std = std::sqrt(sq / static_cast<double>(a.size() - 1));
      }
      row.p_value = r.variant == "full" || a.size() < 2 ? std::numeric_limits<double>::quiet_NaN()
                                                        : eval::paired_t_test(a, b).p_value;
      rows.push_back(row);
    }
  }
  return rows;
}

void write_comparison(std::ostream& out, const std::vector<ComparisonRow>& rows) {
  out << "variant\tmetric\tK\tmean\tstd\tdelta_vs_full\tdelta_std\tp_value\n";
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s\t%s\t%zu\t%.6f\t%.6f\t%+.6f\t%.6f\t%.4g\n", r.variant.c_str(), r.metric.c_str(),
                  r.k, r.mean, r.std, r.delta, r.delta_std, r.p_value);
    out << buf;
  }
}

void apply_sweep_value(RunConfig& c, const std::string& param, const std::string& value) {
  auto number = [&]() {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != value.size() || value.empty()) throw ConfigError("grid value '" + value + "' is not a number");
    return v;
  };
  auto whole = [&]() {
    const double v = number();
    if (v < 0 || v != std::floor(v)) throw ConfigError("grid value '" + value + "' for " + param + " must be a whole number");
    return static_cast<std::size_t>(v);
  };
  if (param == "K") {
    c.model.bands = whole();
  } else if (param == "c") {
    c.model.kernel = whole();
  } else if (param == "alpha") {
    c.train.alpha = number();
  } else if (param == "beta") {
    c.train.beta = number();
  } else {
    throw ConfigError("unknown sweep parameter '" + param + "' (known: K, alpha, beta, c)");
  }
}

std::vector<SweepRow> sweep(const RunConfig& config, const data::SequenceDataset& ds, const std::string& param,
                            const std::vector<std::string>& grid, std::ostream* log) {
  check_sweep_grid(config, param, grid);
  std::vector<RunConfig> configs;
  for (const auto& value : grid) {
    RunConfig c = config;
    apply_sweep_value(c, param, value);
    configs.push_back(std::move(c));
  }
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::vector<eval::EvalReport> reports;
    const auto base = config.output.empty() ? config.output : config.output / (param + "-" + grid[i]);
    for (std::uint64_t seed : config.seeds) {
      if (log) *log << param << " = " << grid[i] << " seed " << seed << '\n';
      reports.push_back(run_seed(configs[i], ds, seed, seed_dir(base, seed), nullptr).test);
    }
    rows.push_back({param, grid[i], eval::aggregate(reports)});
  }
  return rows;
}

void write_sweep(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "param\tvalue\tmetric\tK\tmean\tstd\tseeds\n";
  for (const auto& r : rows)
    for (const auto& s : r.summary) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s\t%s\t%s\t%zu\t%.6f\t%.6f\t%zu\n", r.param.c_str(), r.value.c_str(),
                    s.metric.c_str(), s.k, s.mean, s.std, s.seeds.size());
      out << buf;
    }
}

}  // namespace muffin::cli
