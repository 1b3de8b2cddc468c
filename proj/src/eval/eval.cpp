#include "muffin/eval.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>
#include <thread>

#include "muffin/error.hpp"

namespace muffin::eval {

namespace {

// Neumaier compensated sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      carry_ += (sum_ - t) + x;
    else
      carry_ += (x - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + carry_; }

 private:
  double sum_ = 0.0;
  double carry_ = 0.0;
};

void check_k(std::size_t k) {
  if (k < 1) throw ConfigError("cutoff K must be at least 1");
}

}  // namespace

std::size_t rank_target(std::span<const double> scores, std::size_t target) {
  if (target == kPaddingId || target >= scores.size())
    throw ContractError("target " + std::to_string(target) + " is not a rankable item");
  const double t = scores[target];
  if (std::isnan(t) || t == -std::numeric_limits<double>::infinity())
    throw ContractError("target " + std::to_string(target) + " is masked");
  std::size_t ahead = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (i != target && scores[i] >= t) ++ahead;
  return ahead + 1;
}

double recall_at_k(std::size_t rank, std::size_t k) {
  check_k(k);
  if (rank < 1) throw ContractError("rank must be at least 1");
  return rank <= k ? 1.0 : 0.0;
}

double ndcg_at_k(std::size_t rank, std::size_t k) {
  check_k(k);
  if (rank < 1) throw ContractError("rank must be at least 1");
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

double EvalReport::metric(const std::string& name, std::size_t k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) {
      if (name == "recall") return recall[i];
      if (name == "ndcg") return ndcg[i];
      throw ConfigError("unknown metric '" + name + "'");
    }
  throw ConfigError("report has no cutoff " + std::to_string(k));
}

void summarize(EvalReport& report) {
  report.recall.assign(report.ks.size(), 0.0);
  report.ndcg.assign(report.ks.size(), 0.0);
  if (report.ranks.empty()) return;
  for (std::size_t i = 0; i < report.ks.size(); ++i) {
    CompensatedSum r, g;
    for (std::size_t rank : report.ranks) {
      r.add(recall_at_k(rank, report.ks[i]));
      g.add(ndcg_at_k(rank, report.ks[i]));
    }
    const double users = static_cast<double>(report.ranks.size());
    report.recall[i] = r.value() / users;
    report.ndcg[i] = g.value() / users;
  }
}

EvalReport evaluate(const Scorer& scorer, const data::SequenceDataset& ds, data::Split split,
                    const EvalOptions& options) {
  for (std::size_t k : options.ks) check_k(k);
  const auto start = std::chrono::steady_clock::now();
  const std::vector<data::Example> rows = data::examples(ds, split);
  if (rows.empty()) throw DataError(std::string("split '") + data::split_name(split) + "' is empty");

  EvalReport report;
  report.split = data::split_name(split);
  report.seed = options.seed;
  report.ks = options.ks;
  report.ranks.assign(rows.size(), 0);

  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  const std::size_t chunks = (rows.size() + batch - 1) / batch;
  auto run = [&](std::size_t first_chunk, std::size_t stride) {
    for (std::size_t c = first_chunk; c < chunks; c += stride) {
      const std::size_t begin = c * batch, count = std::min(batch, rows.size() - begin);
      const SequenceBatch b = data::make_batch(std::span<const data::Example>(rows).subspan(begin, count), options.n);
      const std::vector<double> scores = scorer(b);
      if (scores.size() % count != 0) throw ShapeError("scorer returned a ragged score matrix");
      const std::size_t vocab = scores.size() / count;
      for (std::size_t r = 0; r < count; ++r)
        report.ranks[begin + r] =
            rank_target(std::span<const double>(scores).subspan(r * vocab, vocab), b.targets[r]);
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(options.threads, 1, chunks);
  if (threads == 1) {
    run(0, 1);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        try {
          run(t, threads);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  summarize(report);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

Scorer model_scorer(model::ModelParams& params) {
  return [&params](const SequenceBatch& b) {
    ad::Tape tape(false);
    const model::ForwardTrace trace = model::forward(tape, params, b, model::RunMode{});
    const auto v = trace.scores.values();
    return std::vector<double>(v.begin(), v.end());
  };
}

Scorer popularity_scorer(const data::SequenceDataset& ds) {
  std::vector<double> counts(ds.num_items() + 1, 0.0);
  for (std::size_t u = 0; u < ds.num_users(); ++u)
    for (std::size_t id : ds.train_input(u)) counts[id] += 1.0;
  return [counts = std::move(counts)](const SequenceBatch& b) {
    std::vector<double> out;
    out.reserve(b.rows * counts.size());
    for (std::size_t r = 0; r < b.rows; ++r) out.insert(out.end(), counts.begin(), counts.end());
    return out;
  };
}

std::vector<MetricSummary> aggregate(std::span<const EvalReport> runs) {
  if (runs.empty()) throw ContractError("no reports to aggregate");
  std::vector<MetricSummary> out;
  for (const char* metric : {"recall", "ndcg"}) {
    for (std::size_t k : runs.front().ks) {
      MetricSummary s;
      s.metric = metric;
      s.k = k;
      s.users = runs.front().users();
      CompensatedSum sum;
      for (const EvalReport& r : runs) {
        sum.add(r.metric(metric, k));
        s.seeds.push_back(r.seed);
      }
      const double count = static_cast<double>(runs.size());
      s.mean = sum.value() / count;
      if (runs.size() > 1) {
        CompensatedSum sq;
        for (const EvalReport& r : runs) sq.add(std::pow(r.metric(metric, k) - s.mean, 2));
        s.std = std::sqrt(sq.value() / (count - 1.0));
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

PairedTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("paired test needs equally many values on both sides");
  if (a.size() < 2) throw ContractError("paired test needs at least two pairs");
  PairedTest out;
  out.pairs = a.size();
  const double n = static_cast<double>(a.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double var = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) var += std::pow(a[i] - b[i] - mean, 2);
  var /= n - 1.0;
  out.mean_difference = mean;
  if (var == 0.0) {
    out.t = mean > 0.0 ? std::numeric_limits<double>::infinity()
                       : (mean < 0.0 ? -std::numeric_limits<double>::infinity() : 0.0);
    out.p_value = mean > 0.0 ? 0.0 : (mean < 0.0 ? 1.0 : 0.5);
    return out;
  }
  out.t = mean / std::sqrt(var / n);
  const boost::math::students_t dist(n - 1.0);
  out.p_value = boost::math::cdf(boost::math::complement(dist, out.t));
  return out;
}

bool monotone_in_k(const EvalReport& report) {
  std::vector<std::size_t> order(report.ks.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return report.ks[a] < report.ks[b]; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (report.recall[order[i - 1]] > report.recall[order[i]]) return false;
    if (report.ndcg[order[i - 1]] > report.ndcg[order[i]]) return false;
  }
  return true;
}

void write_report(std::ostream& out, std::span<const MetricSummary> rows) {
  out << "metric\tK\tmean\tstd\tn_users\tseeds\n";
  for (const MetricSummary& s : rows) {
    std::ostringstream seeds;
    for (std::size_t i = 0; i < s.seeds.size(); ++i) seeds << (i ? "," : "") << s.seeds[i];
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s\t%zu\t%.6f\t%.6f\t%zu\t", s.metric.c_str(), s.k, s.mean, s.std, s.users);
    out << buf << seeds.str() << '\n';
  }
}

std::string format_report(const EvalReport& report) {
  std::ostringstream out;
  const EvalReport one[1] = {report};
  write_report(out, aggregate(one));
  return out.str();
}

}  // namespace muffin::eval
