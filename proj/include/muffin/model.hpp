#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "muffin/autodiff.hpp"
#include "muffin/batch.hpp"

namespace muffin::model {

using ad::Tape;
using ad::Tensor;

struct ModelConfig {
  std::size_t num_items = 0;  // vocabulary excludes the padding row
  std::size_t d = 64;
  std::size_t n = 50;
  std::size_t layers = 2;
  std::size_t bands = 4;
  std::size_t kernel = 3;  // odd
  double dropout = 0.4;

  bool use_uaf = true;
  bool use_gfm = true;
  bool use_lfm = true;
  bool uaf_as_mlp = false;
  bool uaf_per_layer = false;

  std::size_t bins() const noexcept { return n / 2 + 1; }
  std::size_t vocab() const noexcept { return num_items + 1; }
  // Throws ConfigError naming the first violated constraint.
  void validate() const;
};

// Produces h(X0) in (0, 1) with shape (batch, m, d).
struct AdaptiveFilter {
  Tensor weight;  // (d, d, c) convolution, or (d, d) under uaf_as_mlp
  Tensor bn_gamma;
  Tensor bn_beta;
  ad::BatchNormStats stats;
};

struct FeedForward {
  Tensor w1, b1, w2, b2;
  Tensor norm_gamma, norm_beta;
};

// m -> 4K -> 4K -> K with GeLU between the affine maps.
struct GateMlp {
  Tensor w1, b1, w2, b2, w3, b3;
};

struct FilterLayer {
  Tensor filter;  // (m, d, 2) complex
  Tensor norm_gamma, norm_beta;
  FeedForward ffn;
  GateMlp gate;  // local branch only
};

struct ModelParams {
  ModelConfig config;
  Tensor embedding;  // (vocab, d); row 0 is the learned padding vector
  std::vector<AdaptiveFilter> global_uaf;  // one, or one per layer; empty without UAF
  std::vector<AdaptiveFilter> local_uaf;
  std::vector<FilterLayer> global_layers;  // empty when the branch is disabled
  std::vector<FilterLayer> local_layers;
  Tensor proj;  // (2d, d), or (d, d) with a single branch
  Tensor head_gamma, head_beta;

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  // Learnable tensors in a fixed order with stable names.
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  // Batch-norm running statistics in a fixed order with stable names.
  std::vector<std::pair<std::string, ad::BatchNormStats*>> buffers();
  std::vector<std::pair<std::string, const ad::BatchNormStats*>> buffers() const;

  // Deep copy with fresh storage.
  ModelParams clone() const;

  const AdaptiveFilter* uaf(bool local, std::size_t layer) const;
  AdaptiveFilter* uaf(bool local, std::size_t layer);
};

struct LayerTrace {
  Tensor x_global;         // (B, m, d, 2)
  Tensor x_local;          // (B, m, d, 2)
  Tensor gate;             // (B, K)
  Tensor filter_global;    // (B, m, d, 2)
  Tensor filter_local;     // (B, m, d, 2)
};

struct ForwardTrace {
  Tensor h0;  // (B, n, d)
  Tensor x0;  // (B, m, d, 2)
  std::vector<LayerTrace> layers;
  Tensor h_global;      // (B, n, d), undefined when the branch is disabled
  Tensor h_local;       // (B, n, d)
  Tensor global_last;   // (B, d)
  Tensor local_last;    // (B, d)
  Tensor fused;         // (B, d)
  Tensor scores;        // (B, vocab) raw logits
};

// Dropout masks are drawn from rng in a fixed order; train toggles dropout
// and batch statistics.
struct RunMode {
  bool train = false;
  std::mt19937_64* rng = nullptr;
};

Tensor embed(Tape& tape, const ModelParams& params, const SequenceBatch& batch);
Tensor adaptive_filter(Tape& tape, const ModelConfig& config, AdaptiveFilter& uaf,
                       const Tensor& x0, bool train);
Tensor gate(Tape& tape, const GateMlp& mlp, const Tensor& amp);
Tensor gfm_layer(Tape& tape, const ModelConfig& config, const FilterLayer& layer,
                 const Tensor& h, const Tensor& uaf_h, RunMode mode,
                 LayerTrace* trace = nullptr);
// Returns (output, gate probabilities). gate_override, when defined, replaces
// the gate MLP output (B, K).
std::pair<Tensor, Tensor> lfm_layer(Tape& tape, const ModelConfig& config,
                                    const FilterLayer& layer, const Tensor& h,
                                    const Tensor& uaf_h, RunMode mode,
                                    LayerTrace* trace = nullptr,
                                    const Tensor& gate_override = Tensor());
Tensor ffn_block(Tape& tape, const ModelConfig& config, const FeedForward& ffn, const Tensor& o,
                 RunMode mode);

ForwardTrace forward(Tape& tape, ModelParams& params, const SequenceBatch& batch, RunMode mode);
// Logits rep (B, d) x E^T against every item, padding column included.
Tensor item_scores(Tape& tape, const ModelParams& params, const Tensor& rep);

// Copy of logits with the padding column set to -infinity.
std::vector<double> ranking_scores(const Tensor& scores, std::size_t row);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace muffin::model
