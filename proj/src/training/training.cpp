#include "muffin/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <json.hpp>

#include "muffin/error.hpp"

namespace muffin::training {

namespace {

// Independent generator streams derived from one run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::uint64_t out[1];
  seq.generate(reinterpret_cast<std::uint32_t*>(out), reinterpret_cast<std::uint32_t*>(out + 1));
  return out[0];
}

constexpr std::uint64_t kStreamInit = 1;
constexpr std::uint64_t kStreamDropout = 2;
constexpr std::uint64_t kStreamShuffle = 3;

}  // namespace

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(lr > 0.0 && std::isfinite(lr), "learning rate must be positive");
  require(batch_size >= 1, "batch size must be positive");
  require(alpha >= 0.0, "alpha must be non-negative");
  require(beta >= 0.0, "beta must be non-negative");
  require(max_epochs >= 1, "max_epochs must be positive");
  require(patience >= 1, "patience must be at least 1");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam beta1 must lie in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam beta2 must lie in [0, 1)");
  require(adam_eps > 0.0, "adam epsilon must be positive");
  require(clip_norm >= 0.0, "clip_norm must be non-negative");
  require(threads >= 1, "threads must be positive");
}

Tensor rec_loss(Tape& tape, const Tensor& scores, std::span<const std::size_t> targets) {
  for (std::size_t t : targets)
    if (t == kPaddingId) throw DataError("the padding id cannot be a target");
  return tape.cross_entropy(scores, targets);
}

Tensor aux_loss(Tape& tape, const model::ModelParams& params, const model::ForwardTrace& trace,
                std::span<const std::size_t> targets) {
  Tensor out;
  for (const Tensor* last : {&trace.local_last, &trace.global_last}) {
    if (!last->defined()) continue;
    const Tensor head = rec_loss(tape, model::item_scores(tape, params, *last), targets);
    out = out.defined() ? tape.add(out, head) : head;
  }
  return out;
}

Tensor bal_loss(Tape& tape, std::span<const Tensor> gates) {
  if (gates.empty()) return Tensor::scalar(0.0);
  Tensor sum;
  for (const Tensor& p : gates) {
    const double uniform = 1.0 / static_cast<double>(p.dim(1));
    const Tensor dev = tape.add_scalar(p, -uniform);
    // mean over (rows, K) equals the row mean of (1/K) sum_t.
    const Tensor layer = tape.mean(tape.mul(dev, dev));
    sum = sum.defined() ? tape.add(sum, layer) : layer;
  }
  return tape.scale(sum, 1.0 / static_cast<double>(gates.size()));
}

LossParts total_loss(Tape& tape, const model::ModelParams& params, const model::ForwardTrace& trace,
                     std::span<const std::size_t> targets, double alpha, double beta) {
  LossParts parts;
  parts.rec = rec_loss(tape, trace.scores, targets);
  parts.total = parts.rec;
  if (alpha > 0.0) {
    parts.aux = aux_loss(tape, params, trace, targets);
    parts.total = tape.add(parts.total, tape.scale(parts.aux, alpha));
  }
  if (beta > 0.0) {
    std::vector<Tensor> gates;
    for (const auto& layer : trace.layers)
      if (layer.gate.defined()) gates.push_back(layer.gate);
    if (!gates.empty()) {
      parts.bal = bal_loss(tape, gates);
      parts.total = tape.add(parts.total, tape.scale(parts.bal, beta));
    }
  }
  return parts;
}

Adam::Adam(std::vector<Tensor> params, const TrainConfig& config)
    : params_(std::move(params)),
      lr_(config.lr),
      beta1_(config.adam_beta1),
      beta2_(config.adam_beta2),
      eps_(config.adam_eps),
      clip_norm_(config.clip_norm) {
  for (const Tensor& p : params_) {
    state_.first.emplace_back(p.size(), 0.0);
    state_.second.emplace_back(p.size(), 0.0);
  }
}

double Adam::step() {
  double sq = 0.0;
  for (const Tensor& p : params_)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  const double clip = clip_norm_ > 0.0 && norm > clip_norm_ ? clip_norm_ / norm : 1.0;

  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double c1 = 1.0 - std::pow(beta1_, t);
  const double c2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    auto value = p.mutable_values();
    const auto grad = p.grad();
    auto& m = state_.first[i];
    auto& v = state_.second[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j] * clip;
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      value[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
    p.zero_grad();
  }
  return norm;
}

EarlyStopper::EarlyStopper(std::size_t patience) : patience_(patience) {
  if (patience == 0) throw ConfigError("patience must be at least 1");
}

bool EarlyStopper::update(double metric) {
  ++epochs_;
  if (epochs_ == 1 || metric > best_) {
    best_ = metric;
    best_epoch_ = epochs_;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

TrainResult train(const data::SequenceDataset& ds, const model::ModelConfig& model_config,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  model_config.validate();
  if (model_config.num_items != ds.num_items())
    throw ConfigError("model vocabulary (" + std::to_string(model_config.num_items) +
                      ") differs from the dataset's item count (" + std::to_string(ds.num_items()) + ")");
  if (data::examples(ds, data::Split::Train, config.all_prefixes).empty())
    throw DataError("training split is empty");

  model::ModelParams params = model::ModelParams::init(model_config, derive_seed(config.seed, kStreamInit));
  std::vector<Tensor> tensors;
  for (auto& [name, t] : params.parameters()) tensors.push_back(t);
  Adam adam(tensors, config);
  std::mt19937_64 dropout_rng(derive_seed(config.seed, kStreamDropout));
  EarlyStopper stopper(config.patience);

  eval::EvalOptions eval_opt;
  eval_opt.ks = kValidKs;
  eval_opt.n = model_config.n;
  eval_opt.batch_size = config.batch_size;
  eval_opt.threads = config.threads;
  eval_opt.seed = config.seed;

  TrainResult result;
  result.best = params.clone();
  const std::size_t bands = model_config.use_lfm ? model_config.bands : 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto batches = data::make_batches(ds, model_config.n, config.batch_size,
                                            derive_seed(config.seed, kStreamShuffle + epoch), data::Split::Train,
                                            config.all_prefixes);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.gate_mean.assign(bands, 0.0);
    double rows = 0.0, gate_rows = 0.0;
    for (const SequenceBatch& b : batches) {
      Tape tape;
      const model::ForwardTrace trace = model::forward(tape, params, b, {true, &dropout_rng});
      const LossParts loss = total_loss(tape, params, trace, b.targets, config.alpha, config.beta);
      if (!std::isfinite(loss.total.item())) throw NumericError("training loss diverged at epoch " + std::to_string(epoch));
      tape.backward(loss.total);
      adam.step();

      const double w = static_cast<double>(b.rows);
      rows += w;
      rec.total += w * loss.total.item();
      rec.rec += w * loss.rec.item();
      if (loss.aux.defined()) rec.aux += w * loss.aux.item();
      if (loss.bal.defined()) rec.bal += w * loss.bal.item();
      for (const auto& layer : trace.layers) {
        if (!layer.gate.defined()) continue;
        const auto p = layer.gate.values();
        for (std::size_t r = 0; r < b.rows; ++r)
          for (std::size_t t = 0; t < bands; ++t) rec.gate_mean[t] += p[r * bands + t];
        gate_rows += w;
      }
    }
    rec.total /= rows;
    rec.rec /= rows;
    rec.aux /= rows;
    rec.bal /= rows;
    for (double& g : rec.gate_mean) g /= gate_rows;

    const eval::EvalReport valid = eval::evaluate(eval::model_scorer(params), ds, data::Split::Valid, eval_opt);
    rec.valid_recall = valid.recall;
    rec.valid_ndcg = valid.ndcg;
    rec.valid_ndcg20 = valid.metric("ndcg", 20);
    rec.improved = stopper.update(rec.valid_ndcg20);
    if (rec.improved) result.best = params.clone();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stopper.should_stop()) break;
  }
  result.best_epoch = stopper.best_epoch();
  result.best_valid = stopper.best();
  return result;
}

std::string history_line(const EpochRecord& r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["loss"] = {{"total", r.total}, {"rec", r.rec}, {"aux", r.aux}, {"bal", r.bal}};
  nlohmann::json valid;
  for (std::size_t i = 0; i < kValidKs.size() && i < r.valid_recall.size(); ++i) {
    valid["recall@" + std::to_string(kValidKs[i])] = r.valid_recall[i];
    valid["ndcg@" + std::to_string(kValidKs[i])] = r.valid_ndcg[i];
  }
  j["valid"] = valid;
  j["gate_mean"] = r.gate_mean;
  j["improved"] = r.improved;
  return j.dump();
}

void write_history(std::span<const EpochRecord> history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write history " + path.string());
  for (const EpochRecord& r : history) out << history_line(r) << '\n';
  if (!out) throw IoError("write to " + path.string() + " failed");
}

}  // namespace muffin::training
