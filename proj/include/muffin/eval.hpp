#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "muffin/batch.hpp"
#include "muffin/data.hpp"
#include "muffin/model.hpp"

namespace muffin::eval {

// 1 + number of non-padding items other than target scoring at least as high
// as target, so ties count against the target. Index 0 is never ranked.
std::size_t rank_target(std::span<const double> scores, std::size_t target);

double recall_at_k(std::size_t rank, std::size_t k);
double ndcg_at_k(std::size_t rank, std::size_t k);

// Row-major (rows, vocab) scores for a batch.
using Scorer = std::function<std::vector<double>(const SequenceBatch&)>;

struct EvalReport {
  std::string split;
  std::uint64_t seed = 0;
  std::vector<std::size_t> ks;
  std::vector<double> recall;  // per k, mean over users
  std::vector<double> ndcg;
  std::vector<std::size_t> ranks;  // per user, dataset order
  double seconds = 0.0;

  std::size_t users() const noexcept { return ranks.size(); }
  double metric(const std::string& name, std::size_t k) const;  // "recall" or "ndcg"
};

struct EvalOptions {
  std::vector<std::size_t> ks = {5, 10, 20};
  std::size_t n = 50;
  std::size_t batch_size = 256;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

// Scorer must be safe to call concurrently when threads > 1.
EvalReport evaluate(const Scorer& scorer, const data::SequenceDataset& ds, data::Split split,
                    const EvalOptions& options);
// Recomputes every mean from ranks; the result does not depend on sharding.
void summarize(EvalReport& report);

// Eval-mode forward pass: no dropout, batch-norm running statistics.
Scorer model_scorer(model::ModelParams& params);
// Item frequency over the train inputs, identical for every user.
Scorer popularity_scorer(const data::SequenceDataset& ds);

struct MetricSummary {
  std::string metric;
  std::size_t k = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation across seeds, 0 for one seed
  std::size_t users = 0;
  std::vector<std::uint64_t> seeds;
};
std::vector<MetricSummary> aggregate(std::span<const EvalReport> runs);

// One-tailed paired t-test that a's per-seed values exceed b's.
struct PairedTest {
  double mean_difference = 0.0;
  double t = 0.0;
  double p_value = 1.0;
  std::size_t pairs = 0;
};
PairedTest paired_t_test(std::span<const double> a, std::span<const double> b);

// metric@5 <= metric@10 <= ... for every metric.
bool monotone_in_k(const EvalReport& report);

// Tab-separated: metric, K, mean, std, n_users, seeds.
void write_report(std::ostream& out, std::span<const MetricSummary> rows);
std::string format_report(const EvalReport& report);

}  // namespace muffin::eval
