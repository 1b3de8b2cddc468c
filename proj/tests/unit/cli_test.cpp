#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "muffin/cli.hpp"
#include "muffin/error.hpp"

using namespace muffin;
using namespace muffin::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "muffin_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void put(const fs::path& path, const std::string& text) { std::ofstream(path) << text; }

int invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "muffin");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run(static_cast<int>(argv.size()), argv.data());
}

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_run_config(in, "test.ini");
}

// Small corpus plus a fast run config in `dir`.
void write_corpus(const fs::path& dir, const std::string& extra_model = "") {
  put(dir / "synth.ini", "[synth]\nnum_users = 60\nnum_items = 40\ngenres = 4\nmin_length = 8\nmax_length = 16\n");
  REQUIRE(invoke({"synth", "--spec", (dir / "synth.ini").string(), "--output", (dir / "log.tsv").string()}) == 0);
  REQUIRE(invoke({"preprocess", "--input", (dir / "log.tsv").string(), "--output", (dir / "ds.bin").string()}) == 0);
  put(dir / "run.ini", "[data]\ndataset = ds.bin\n[model]\nd = 8\nn = 10\nbands = 2\n" + extra_model +
                           "[train]\nmax_epochs = 2\nbatch_size = 32\nseeds = 3\n[run]\noutput = out\n");
}

}  // namespace

TEST_CASE("run config defaults, profiles and rejection of unknown keys") {
  const RunConfig c = parse("[data]\ndataset = x.bin\n");
  CHECK(c.model.d == 64);
  CHECK(c.model.n == 50);
  CHECK(c.model.layers == 2);
  CHECK(c.train.lr == 0.001);
  CHECK(c.train.batch_size == 256);
  CHECK(c.train.patience == 15);
  CHECK(c.model.dropout == 0.4);
  CHECK(parse("[data]\ndataset = x\nprofile = ml-1m\n").model.dropout == 0.1);
  CHECK(parse("[data]\ndataset = x\nprofile = ml-1m\n[model]\ndropout = 0.25\n").model.dropout == 0.25);

  CHECK_THROWS_AS(parse("[data]\ndataset = x\n[model]\ncolour = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse("[data]\ndataset = x\n[extras]\nk = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse("stray = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse("[data]\ndataset = x\n[model]\nbands = 30\n"), ConfigError);
  CHECK_THROWS_AS(parse("[data]\ndataset = x\n[train]\nalpha = -1\n"), ConfigError);
  CHECK_THROWS_AS(parse("[data]\ndataset = x\n[train]\nseeds = 1,x\n"), ConfigError);
  CHECK_THROWS_AS(parse("[model]\nd = 8\n"), ConfigError);  // dataset missing
}

TEST_CASE("effective config round-trips") {
  const RunConfig c = parse(
      "[data]\ndataset = d.bin\nprofile = beauty\n[model]\nd = 12\nbands = 3\nuse_uaf = false\n"
      "[train]\nlr = 0.0025\nseeds = 4,5,6\nalpha = 0.05\n[eval]\nks = 1,10\n[run]\noutput = o\n");
  const std::string text = format_run_config(c);
  const RunConfig back = parse(text);
  CHECK(format_run_config(back) == text);
  CHECK(back.seeds == std::vector<std::uint64_t>{4, 5, 6});
  CHECK(back.ks == std::vector<std::size_t>{1, 10});
  CHECK_FALSE(back.model.use_uaf);
  CHECK(back.train.lr == 0.0025);
  CHECK(back.model.dropout == 0.4);
}

TEST_CASE("variants change exactly one setting") {
  const RunConfig base = parse("[data]\ndataset = x\n");
  const std::string reference = format_run_config(base);
  for (const auto& name : variant_names()) {
    RunConfig c = base;
    apply_variant(name, c);
    CHECK_NOTHROW(c.validate());
    std::istringstream a(reference), b(format_run_config(c));
    std::string la, lb;
    int differing = 0;
    while (std::getline(a, la) && std::getline(b, lb)) differing += la != lb;
    CAPTURE(name);
    CHECK(differing == (name == "full" ? 0 : 1));
  }
  RunConfig c = base;
  apply_variant("wo-uaf", c);
  CHECK_FALSE(c.model.use_uaf);
  CHECK_THROWS_AS(apply_variant("wo-everything", c), ConfigError);
  CHECK_THROWS_AS(check_variants(base, {}), ConfigError);
}

TEST_CASE("sweep grid validation") {
  RunConfig c = parse("[data]\ndataset = x\n");
  CHECK_NOTHROW(check_sweep_grid(c, "K", {"2", "4", "6", "8", "10"}));
  CHECK_NOTHROW(check_sweep_grid(c, "alpha", {"0.05", "0.1", "0.2", "0.5", "1"}));
  CHECK_NOTHROW(check_sweep_grid(c, "c", {"3", "5", "7"}));
  CHECK_THROWS_AS(check_sweep_grid(c, "K", {"2", "27"}), ConfigError);  // m = 26
  CHECK_THROWS_AS(check_sweep_grid(c, "c", {"4"}), ConfigError);
  CHECK_THROWS_AS(check_sweep_grid(c, "beta", {"-0.5"}), ConfigError);
  CHECK_THROWS_AS(check_sweep_grid(c, "lr", {"0.1"}), ConfigError);
  CHECK_THROWS_AS(check_sweep_grid(c, "K", {"two"}), ConfigError);
}

TEST_CASE("preprocess builds a stable cache and reports statistics") {
  const fs::path dir = scratch("preprocess");
  std::string log = "user\titem\ttimestamp\n";
  // Five users over five items, each user touching every item once.
  for (int u = 0; u < 5; ++u)
    for (int i = 0; i < 5; ++i) log += "u" + std::to_string(u) + "\ti" + std::to_string(i) + "\t" + std::to_string(10 * u + i) + "\n";
  log += "loner\ti0\t99\n";
  put(dir / "log.tsv", log);
  const auto args = [&](const std::string& out, const std::string& core) {
    return std::vector<std::string>{"preprocess", "--input", (dir / "log.tsv").string(), "--output", (dir / out).string(),
                                    "--min-core", core};
  };
  REQUIRE(invoke(args("a.bin", "5")) == 0);
  REQUIRE(invoke(args("b.bin", "5")) == 0);
  CHECK(slurp(dir / "a.bin") == slurp(dir / "b.bin"));
  const data::SequenceDataset ds = data::load_dataset(dir / "a.bin");
  CHECK(ds.num_users() == 5);
  CHECK(ds.num_items() == 5);

  REQUIRE(invoke(args("c.bin", "1")) == 0);
  const data::SequenceDataset all = data::load_dataset(dir / "c.bin");
  CHECK(all.num_items() == 5);
  CHECK(all.num_users() == 5);  // the single-record user cannot form a split
  CHECK(all.num_interactions() == 25);

  CHECK(invoke({"preprocess", "--input", (dir / "missing.tsv").string(), "--output", (dir / "x.bin").string()}) == 4);
}

TEST_CASE("synth and train are deterministic and echo their config") {
  const fs::path dir = scratch("train");
  write_corpus(dir);
  const std::string first_log = slurp(dir / "log.tsv");
  REQUIRE(invoke({"synth", "--spec", (dir / "synth.ini").string(), "--output", (dir / "log2.tsv").string()}) == 0);
  CHECK(slurp(dir / "log2.tsv") == first_log);

  REQUIRE(invoke({"train", "--config", (dir / "run.ini").string(), "--output", (dir / "a").string()}) == 0);
  REQUIRE(invoke({"train", "--config", (dir / "run.ini").string(), "--output", (dir / "b").string()}) == 0);
  for (const char* file : {"seed-3/history.jsonl", "seed-3/model.ckpt", "seed-3/report.tsv", "report.tsv"}) {
    CAPTURE(file);
    REQUIRE(fs::exists(dir / "a" / file));
    CHECK(slurp(dir / "a" / file) == slurp(dir / "b" / file));
  }
  const RunConfig echoed = parse_run_config(dir / "a" / "config.ini");
  CHECK(echoed.model.d == 8);
  CHECK(echoed.model.dropout == 0.4);
  CHECK(echoed.seeds == std::vector<std::uint64_t>{3});
}

TEST_CASE("zero loss weights reduce training to the recommendation loss") {
  const fs::path dir = scratch("weights");
  write_corpus(dir);
  RunConfig c = parse_run_config(dir / "run.ini");
  apply_variant("wo-aux", c);
  apply_variant("wo-bal", c);
  const data::SequenceDataset ds = load_any_dataset(c.dataset, c.min_core);
  const RunOutcome r = run_seed(c, ds, 3, {});
  for (const auto& e : r.trained.history) {
    CHECK(e.aux == 0.0);
    CHECK(e.bal == 0.0);
    CHECK(e.total == e.rec);
  }
}

TEST_CASE("filter and gate inspection") {
  const fs::path dir = scratch("inspect");
  write_corpus(dir);
  const RunConfig base = parse_run_config(dir / "run.ini");
  const data::SequenceDataset ds = load_any_dataset(base.dataset, base.min_core);
  std::vector<std::string> users(ds.user_ids.begin(), ds.user_ids.begin() + 5);
  users.push_back("ghost");

  for (const char* variant : {"full", "wo-uaf"}) {
    RunConfig c = base;
    apply_variant(variant, c);
    RunOutcome r = run_seed(c, ds, 3, {});
    std::vector<std::string> warnings;
    const auto rows = inspect_filters(r.trained.best, ds, users, 1, &warnings);
    CHECK(warnings.size() == 1);
    const std::size_t m = c.model.bins();
    REQUIRE(rows.size() == 5 * 2 * m);
    double max_std = 0.0;
    for (const auto& row : rows) {
      CHECK(row.amplitude >= 0.0);
      max_std = std::max(max_std, row.cross_user_std);
    }
    CAPTURE(variant);
    if (std::string(variant) == "full")
      CHECK(max_std > 0.0);
    else
      CHECK(max_std == 0.0);
    std::ostringstream csv;
    write_filter_csv(csv, rows);
    CHECK(csv.str().rfind("user,branch,bin,amplitude,cross_user_mean,cross_user_std\n", 0) == 0);
    CHECK_THROWS_AS(inspect_filters(r.trained.best, ds, users, 2), ConfigError);
  }

  model::ModelConfig mc = base.model;
  mc.num_items = ds.num_items();
  mc.bands = 3;
  model::ModelParams p = model::ModelParams::init(mc, 1);
  for (auto& layer : p.local_layers) {
    for (double& v : layer.gate.w3.mutable_values()) v = 0.0;
    for (double& v : layer.gate.b3.mutable_values()) v = 0.0;
  }
  const auto gates = gate_means(p, ds, data::Split::Test);
  REQUIRE(gates.size() == mc.layers);
  for (const auto& row : gates) {
    REQUIRE(row.size() == 3);
    for (double v : row) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  CHECK(gate_spread(gates) < 1e-15);

  const RunOutcome trained = run_seed(base, ds, 4, dir / "ckpt");
  REQUIRE(invoke({"inspect-gates", "--checkpoint", (dir / "ckpt" / "model.ckpt").string(), "--dataset",
                  (dir / "ds.bin").string(), "--output", (dir / "gates.csv").string()}) == 0);
  std::istringstream csv(slurp(dir / "gates.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "layer,band_1,band_2");
  while (std::getline(csv, line)) {
    std::istringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    double sum = 0.0;
    while (std::getline(cells, cell, ',')) sum += std::stod(cell);
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
  REQUIRE(invoke({"inspect-filters", "--checkpoint", (dir / "ckpt" / "model.ckpt").string(), "--dataset",
                  (dir / "ds.bin").string(), "--first-users", "4", "--output", (dir / "filters.csv").string()}) == 0);
  std::istringstream rows(slurp(dir / "filters.csv"));
  std::size_t count = 0;
  while (std::getline(rows, line)) ++count;
  CHECK(count == 1 + 4 * 2 * base.model.bins());
}

TEST_CASE("ablation rows follow the requested variants") {
  const fs::path dir = scratch("ablate");
  write_corpus(dir);
  RunConfig c = parse_run_config(dir / "run.ini");
  c.seeds = {1, 2};
  c.output.clear();
  const data::SequenceDataset ds = load_any_dataset(c.dataset, c.min_core);
  const auto results = ablate(c, ds, {"full", "wo-uaf"});
  REQUIRE(results.size() == 2);
  CHECK(results[1].variant == "wo-uaf");
  const auto rows = compare_to_full(results);
  REQUIRE(rows.size() == 2 * 2 * c.ks.size());
  for (const auto& r : rows) {
    if (r.variant == "full") {
      CHECK(r.delta == 0.0);
      CHECK(std::isnan(r.p_value));
    } else {
      CHECK(r.delta == doctest::Approx(rows[&r - rows.data() - 2 * c.ks.size()].mean - r.mean));
    }
  }
  std::ostringstream out;
  write_comparison(out, rows);
  CHECK(out.str().rfind("variant\tmetric\tK\tmean\tstd\tdelta_vs_full\tdelta_std\tp_value\n", 0) == 0);
}

TEST_CASE("command errors map to categories and exit codes") {
  const fs::path dir = scratch("errors");
  put(dir / "bad.ini", "[model]\ncolour = 3\n");
  CHECK(invoke({"train", "--config", (dir / "bad.ini").string()}) == 2);
  CHECK(invoke({"train", "--config", (dir / "absent.ini").string()}) == 4);
  CHECK(invoke({"evaluate", "--baseline", "popularity", "--dataset", (dir / "absent.bin").string()}) == 4);
  CHECK(invoke({"frobnicate"}) == 2);
  put(dir / "empty.tsv", "user\titem\ttimestamp\n");
  CHECK(invoke({"preprocess", "--input", (dir / "empty.tsv").string(), "--output", (dir / "e.bin").string()}) == 3);
  write_corpus(dir);
  CHECK(invoke({"sweep", "--config", (dir / "run.ini").string(), "--param", "K", "--grid", "2,9"}) == 2);
  CHECK(invoke({"ablate", "--config", (dir / "run.ini").string(), "--variants", "full,bogus"}) == 2);
  CHECK(invoke({"evaluate", "--baseline", "popularity", "--dataset", (dir / "ds.bin").string(), "--ks", "5,x"}) == 2);
}
