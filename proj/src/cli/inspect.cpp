#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>

#include "muffin/cli.hpp"
#include "muffin/error.hpp"

namespace muffin::cli {

namespace {

// Shifted two-pass moments: identical inputs give exactly their value and 0.
std::pair<double, double> mean_std(const std::vector<double>& v) {
  double shift_sum = 0.0;
  for (double x : v) shift_sum += x - v.front();
  const double mean = v.front() + shift_sum / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / static_cast<double>(v.size()))};
}

}  // namespace

std::vector<FilterRow> inspect_filters(model::ModelParams& params, const data::SequenceDataset& ds,
                                       const std::vector<std::string>& users, std::size_t layer,
                                       std::vector<std::string>* warnings) {
  const model::ModelConfig& cfg = params.config;
  if (layer >= cfg.layers)
    throw ConfigError("layer " + std::to_string(layer + 1) + " out of range for " + std::to_string(cfg.layers) + " layers");
  if (cfg.num_items != ds.num_items()) throw DataError("checkpoint vocabulary does not match the dataset");

  std::map<std::string, std::size_t> index;
  for (std::size_t u = 0; u < ds.num_users(); ++u) index.emplace(ds.user_ids[u], u);
  const std::vector<data::Example> all = data::examples(ds, data::Split::Test);
  std::vector<data::Example> chosen;
  std::vector<std::string> names;
  for (const auto& name : users) {
    const auto it = index.find(name);
    if (it == index.end()) {
      if (warnings) warnings->push_back("user '" + name + "' not in dataset, skipped");
      continue;
    }
    chosen.push_back(all[it->second]);
    names.push_back(name);
  }
  if (chosen.empty()) return {};

  ad::Tape tape(false);
  const SequenceBatch batch = data::make_batch(chosen, cfg.n);
  const model::ForwardTrace trace = model::forward(tape, params, batch, model::RunMode{});
  const model::LayerTrace& lt = trace.layers[layer];
  const std::size_t m = cfg.bins(), d = cfg.d;

  std::vector<FilterRow> rows;
  for (const auto& [branch, filter] : {std::pair{"global", lt.filter_global}, std::pair{"local", lt.filter_local}}) {
    if (!filter.defined()) continue;
    const auto v = filter.values();
    // amp[k][u]: feature-mean modulus of bin k for user u.
    std::vector<std::vector<double>> amp(m, std::vector<double>(chosen.size()));
    for (std::size_t u = 0; u < chosen.size(); ++u)
      for (std::size_t k = 0; k < m; ++k) {
        double sum = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const std::size_t at = ((u * m + k) * d + c) * 2;
          sum += std::hypot(v[at], v[at + 1]);
        }
        amp[k][u] = sum / static_cast<double>(d);
      }
    for (std::size_t u = 0; u < chosen.size(); ++u)
      for (std::size_t k = 0; k < m; ++k) {
        const auto [mean, sd] = mean_std(amp[k]);
        rows.push_back({names[u], branch, k, amp[k][u], mean, sd});
      }
  }
  return rows;
}

void write_filter_csv(std::ostream& out, const std::vector<FilterRow>& rows) {
  out << "user,branch,bin,amplitude,cross_user_mean,cross_user_std\n";
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, ",%s,%zu,%.17g,%.17g,%.17g\n", r.branch.c_str(), r.bin, r.amplitude,
                  r.cross_user_mean, r.cross_user_std);
    out << r.user << buf;
  }
}

std::vector<std::vector<double>> gate_means(model::ModelParams& params, const data::SequenceDataset& ds,
                                            data::Split split, std::size_t batch_size) {
  const model::ModelConfig& cfg = params.config;
  if (!cfg.use_lfm) throw ConfigError("model has no local filtering module, so there are no gates");
  if (cfg.num_items != ds.num_items()) throw DataError("checkpoint vocabulary does not match the dataset");
  const auto batches = data::make_batches(ds, cfg.n, batch_size, 0, split);
  if (batches.empty()) throw DataError(std::string("split '") + data::split_name(split) + "' is empty");
  std::vector<std::vector<double>> sums(cfg.layers, std::vector<double>(cfg.bands, 0.0));
  double rows = 0.0;
  for (const auto& b : batches) {
    ad::Tape tape(false);
    const model::ForwardTrace trace = model::forward(tape, params, b, model::RunMode{});
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const auto p = trace.layers[l].gate.values();
      for (std::size_t r = 0; r < b.rows; ++r)
        for (std::size_t t = 0; t < cfg.bands; ++t) sums[l][t] += p[r * cfg.bands + t];
    }
    rows += static_cast<double>(b.rows);
  }
  for (auto& layer : sums)
    for (double& v : layer) v /= rows;
  return sums;
}

void write_gate_csv(std::ostream& out, const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return;
  const std::size_t bands = rows.front().size();
  out << "layer";
  for (std::size_t t = 0; t < bands; ++t) out << ",band_" << t + 1;
  out << '\n';
  std::vector<double> mean(bands, 0.0);
  for (std::size_t l = 0; l < rows.size(); ++l) {
    out << l + 1;
    for (std::size_t t = 0; t < bands; ++t) {
      char buf[64];
      std::snprintf(buf, sizeof buf, ",%.17g", rows[l][t]);
      out << buf;
      mean[t] += rows[l][t] / static_cast<double>(rows.size());
    }
    out << '\n';
  }
  out << "mean";
  for (double v : mean) {
    char buf[64];
    std::snprintf(buf, sizeof buf, ",%.17g", v);
    out << buf;
  }
  out << '\n';
}

double gate_spread(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw ContractError("no gate rows");
  std::vector<double> mean(rows.front().size(), 0.0);
  for (const auto& r : rows)
    for (std::size_t t = 0; t < r.size(); ++t) mean[t] += r[t] / static_cast<double>(rows.size());
  const auto [lo, hi] = std::minmax_element(mean.begin(), mean.end());
  return *hi - *lo;
}

}  // namespace muffin::cli
