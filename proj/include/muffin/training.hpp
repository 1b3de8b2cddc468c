#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "muffin/data.hpp"
#include "muffin/eval.hpp"
#include "muffin/model.hpp"

namespace muffin::training {

using ad::Tape;
using ad::Tensor;

struct TrainConfig {
  double lr = 0.001;
  std::size_t batch_size = 256;
  double alpha = 0.1;
  double beta = 0.2;
  std::size_t max_epochs = 200;
  std::size_t patience = 15;
  std::uint64_t seed = 42;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 0.0;     // global gradient norm cap, 0 disables
  bool all_prefixes = false;  // train on every prefix of the train input
  std::size_t threads = 1;    // validation sharding

  void validate() const;
};

// Mean over rows of -log softmax(scores)[target], padding column excluded.
Tensor rec_loss(Tape& tape, const Tensor& scores, std::span<const std::size_t> targets);
// Cross entropy of each surviving branch head, summed over heads.
Tensor aux_loss(Tape& tape, const model::ModelParams& params, const model::ForwardTrace& trace,
                std::span<const std::size_t> targets);
// (1/K) sum_t (p_t - 1/K)^2 averaged over rows and layers; zero without gates.
Tensor bal_loss(Tape& tape, std::span<const Tensor> gates);

struct LossParts {
  Tensor total, rec, aux, bal;
};
// total = rec + alpha * aux + beta * bal. A zero weight skips its term.
LossParts total_loss(Tape& tape, const model::ModelParams& params, const model::ForwardTrace& trace,
                     std::span<const std::size_t> targets, double alpha, double beta);

struct OptimizerState {
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
  std::uint64_t step = 0;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, const TrainConfig& config);

  // Applies one update from the accumulated gradients, then clears them.
  // Returns the gradient norm before clipping.
  double step();
  const OptimizerState& state() const noexcept { return state_; }

 private:
  std::vector<Tensor> params_;
  double lr_, beta1_, beta2_, eps_, clip_norm_;
  OptimizerState state_;
};

// Counts epochs since the last strict improvement.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience);

  // Returns true when this metric improved on the best so far.
  bool update(double metric);
  bool should_stop() const noexcept { return stale_ >= patience_; }
  double best() const noexcept { return best_; }
  std::size_t best_epoch() const noexcept { return best_epoch_; }
  std::size_t epochs() const noexcept { return epochs_; }

 private:
  std::size_t patience_;
  std::size_t stale_ = 0;
  std::size_t epochs_ = 0;
  std::size_t best_epoch_ = 0;
  double best_ = -1.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double total = 0.0, rec = 0.0, aux = 0.0, bal = 0.0;  // row-weighted epoch means
  double valid_ndcg20 = 0.0;
  std::vector<double> valid_recall;  // at valid_ks
  std::vector<double> valid_ndcg;
  std::vector<double> gate_mean;  // per band, mean over rows and layers
  bool improved = false;
  double seconds = 0.0;
};

struct TrainResult {
  model::ModelParams best;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_valid = 0.0;
};

inline const std::vector<std::size_t> kValidKs = {5, 10, 20};

using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train(const data::SequenceDataset& ds, const model::ModelConfig& model_config,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

// One JSON object per line.
std::string history_line(const EpochRecord& record);
void write_history(std::span<const EpochRecord> history, const std::filesystem::path& path);

}  // namespace muffin::training
