#include "muffin/model.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "muffin/error.hpp"
#include "muffin/spectral.hpp"

namespace muffin::model {

namespace {

using ad::Shape;

constexpr double kInitStd = 0.02;

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

// Visits every learnable tensor of p in a fixed order.
template <typename Params, typename Fn>
void visit_tensors(Params& p, Fn&& fn) {
  fn(std::string("embedding"), p.embedding);
  auto visit_uaf = [&](const std::string& prefix, auto& list) {
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string base = prefix + ".uaf." + std::to_string(i);
      fn(base + ".weight", list[i].weight);
      fn(base + ".bn.gamma", list[i].bn_gamma);
      fn(base + ".bn.beta", list[i].bn_beta);
    }
  };
  auto visit_layers = [&](const std::string& prefix, auto& list, bool with_gate) {
    for (std::size_t l = 0; l < list.size(); ++l) {
      auto& layer = list[l];
      const std::string base = prefix + "." + std::to_string(l);
      fn(base + ".filter", layer.filter);
      fn(base + ".norm.gamma", layer.norm_gamma);
      fn(base + ".norm.beta", layer.norm_beta);
      fn(base + ".ffn.w1", layer.ffn.w1);
      fn(base + ".ffn.b1", layer.ffn.b1);
      fn(base + ".ffn.w2", layer.ffn.w2);
      fn(base + ".ffn.b2", layer.ffn.b2);
      fn(base + ".ffn.norm.gamma", layer.ffn.norm_gamma);
      fn(base + ".ffn.norm.beta", layer.ffn.norm_beta);
      if (with_gate) {
        fn(base + ".gate.w1", layer.gate.w1);
        fn(base + ".gate.b1", layer.gate.b1);
        fn(base + ".gate.w2", layer.gate.w2);
        fn(base + ".gate.b2", layer.gate.b2);
        fn(base + ".gate.w3", layer.gate.w3);
        fn(base + ".gate.b3", layer.gate.b3);
      }
    }
  };
  visit_uaf("global", p.global_uaf);
  visit_uaf("local", p.local_uaf);
  visit_layers("global", p.global_layers, false);
  visit_layers("local", p.local_layers, true);
  fn(std::string("head.proj"), p.proj);
  fn(std::string("head.norm.gamma"), p.head_gamma);
  fn(std::string("head.norm.beta"), p.head_beta);
}

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(ad::element_count(shape));
    for (double& x : v) x = dist(rng_);
    return Tensor(std::move(shape), std::move(v), true);
  }
  Tensor uniform(Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(ad::element_count(shape));
    for (double& x : v) x = dist(rng_);
    return Tensor(std::move(shape), std::move(v), true);
  }
  // 1 + 0i plus small noise on both components.
  Tensor complex_filter(std::size_t m, std::size_t d) {
    Tensor t = normal({m, d, 2}, kInitStd);
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); i += 2) v[i] += 1.0;
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

AdaptiveFilter make_uaf(Initializer& init, const ModelConfig& c) {
  AdaptiveFilter u;
  const double fan_in = static_cast<double>(c.d * (c.uaf_as_mlp ? 1 : c.kernel));
  u.weight = c.uaf_as_mlp ? init.uniform({c.d, c.d}, 1.0 / std::sqrt(fan_in))
                          : init.uniform({c.d, c.d, c.kernel}, 1.0 / std::sqrt(fan_in));
  u.bn_gamma = Tensor::filled({c.d}, 1.0, true);
  u.bn_beta = Tensor::zeros({c.d}, true);
  u.stats = ad::BatchNormStats(c.d);
  return u;
}

FilterLayer make_layer(Initializer& init, const ModelConfig& c, bool local) {
  FilterLayer layer;
  layer.filter = init.complex_filter(c.bins(), c.d);
  layer.norm_gamma = Tensor::filled({c.d}, 1.0, true);
  layer.norm_beta = Tensor::zeros({c.d}, true);
  layer.ffn.w1 = init.normal({c.d, 4 * c.d}, kInitStd);
  layer.ffn.b1 = Tensor::zeros({4 * c.d}, true);
  layer.ffn.w2 = init.normal({4 * c.d, c.d}, kInitStd);
  layer.ffn.b2 = Tensor::zeros({c.d}, true);
  layer.ffn.norm_gamma = Tensor::filled({c.d}, 1.0, true);
  layer.ffn.norm_beta = Tensor::zeros({c.d}, true);
  if (local) {
    const std::size_t hidden = 4 * c.bands;
    layer.gate.w1 = init.normal({c.bins(), hidden}, kInitStd);
    layer.gate.b1 = Tensor::zeros({hidden}, true);
    layer.gate.w2 = init.normal({hidden, hidden}, kInitStd);
    layer.gate.b2 = Tensor::zeros({hidden}, true);
    layer.gate.w3 = init.normal({hidden, c.bands}, kInitStd);
    layer.gate.b3 = Tensor::zeros({c.bands}, true);
  }
  return layer;
}

Tensor drop(Tape& tape, const Tensor& x, double rate, RunMode mode) {
  if (!mode.train || rate == 0.0) return x;
  if (mode.rng == nullptr) throw StateError("training forward pass needs a dropout generator");
  return tape.dropout(x, rate, true, *mode.rng);
}

// Complex filter W scaled by the real mask h: (B, m, d) x (m, d, 2).
Tensor effective_filter(Tape& tape, const Tensor& filter, const Tensor& uaf_h) {
  if (!uaf_h.defined()) return filter;
  const Shape& s = uaf_h.shape();
  return tape.mul(tape.reshape(uaf_h, {s[0], s[1], s[2], 1}), filter);
}

// Detached (B, m, d, 2) copy of a possibly batch-shared filter.
Tensor expand_filter(const Tensor& filter, std::size_t batch) {
  if (filter.rank() == 4) return filter;
  const auto v = filter.values();
  std::vector<double> out;
  out.reserve(batch * v.size());
  for (std::size_t b = 0; b < batch; ++b) out.insert(out.end(), v.begin(), v.end());
  Shape shape = filter.shape();
  shape.insert(shape.begin(), batch);
  return Tensor(std::move(shape), std::move(out));
}

Tensor last_position(Tape& tape, const Tensor& h) {
  const std::size_t b = h.dim(0), n = h.dim(1), d = h.dim(2);
  return tape.reshape(tape.slice(h, 1, n - 1, 1), {b, d});
}

void check_batch(const ModelConfig& c, const SequenceBatch& batch) {
  if (batch.rows == 0) throw DataError("batch has no rows");
  if (batch.length != c.n)
    throw ShapeError("batch length " + std::to_string(batch.length) + " differs from model n " +
                     std::to_string(c.n));
  if (batch.ids.size() != batch.rows * batch.length)
    throw ShapeError("batch id buffer does not match rows x length");
  for (std::size_t id : batch.ids)
    if (id >= c.vocab())
      throw DataError("item id " + std::to_string(id) + " outside [0, " +
                      std::to_string(c.num_items) + "]");
}

void check_nonempty(const SequenceBatch& batch) {
  for (std::size_t r = 0; r < batch.rows; ++r)
    if (batch.at(r, batch.length - 1) == kPaddingId)
      throw DataError("row " + std::to_string(r) + " holds no items");
}

}  // namespace

void ModelConfig::validate() const {
  require(num_items >= 1, "model needs at least one item");
  require(d >= 1, "hidden dimension d must be positive");
  require(n >= 1, "sequence length n must be positive");
  require(layers >= 1, "layer count must be positive");
  require(bands >= 1 && bands <= bins(),
          "band count K=" + std::to_string(bands) + " must lie in [1, " + std::to_string(bins()) +
              "] for n=" + std::to_string(n));
  require(kernel >= 1 && kernel % 2 == 1,
          "UAF kernel size c=" + std::to_string(kernel) + " must be odd");
  require(dropout >= 0.0 && dropout < 1.0, "dropout rate must lie in [0, 1)");
  require(use_gfm || use_lfm, "at least one of the global and local branches must be enabled");
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Initializer init(seed);
  ModelParams p;
  p.config = config;
  p.embedding = init.normal({config.vocab(), config.d}, kInitStd);
  const std::size_t uaf_count = config.uaf_per_layer ? config.layers : 1;
  if (config.use_uaf) {
    for (std::size_t i = 0; i < uaf_count && config.use_gfm; ++i)
      p.global_uaf.push_back(make_uaf(init, config));
    for (std::size_t i = 0; i < uaf_count && config.use_lfm; ++i)
      p.local_uaf.push_back(make_uaf(init, config));
  }
  for (std::size_t l = 0; l < config.layers; ++l) {
    if (config.use_gfm) p.global_layers.push_back(make_layer(init, config, false));
    if (config.use_lfm) p.local_layers.push_back(make_layer(init, config, true));
  }
  const std::size_t branches = (config.use_gfm ? 1 : 0) + (config.use_lfm ? 1 : 0);
  p.proj = init.normal({branches * config.d, config.d}, kInitStd);
  p.head_gamma = Tensor::filled({config.d}, 1.0, true);
  p.head_beta = Tensor::zeros({config.d}, true);
  return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  visit_tensors(*this, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
  return out;
}

std::vector<std::pair<std::string, ad::BatchNormStats*>> ModelParams::buffers() {
  std::vector<std::pair<std::string, ad::BatchNormStats*>> out;
  for (std::size_t i = 0; i < global_uaf.size(); ++i)
    out.emplace_back("global.uaf." + std::to_string(i) + ".bn", &global_uaf[i].stats);
  for (std::size_t i = 0; i < local_uaf.size(); ++i)
    out.emplace_back("local.uaf." + std::to_string(i) + ".bn", &local_uaf[i].stats);
  return out;
}

std::vector<std::pair<std::string, const ad::BatchNormStats*>> ModelParams::buffers() const {
  std::vector<std::pair<std::string, const ad::BatchNormStats*>> out;
  for (auto& [name, stats] : const_cast<ModelParams*>(this)->buffers()) out.emplace_back(name, stats);
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams copy = *this;
  visit_tensors(copy, [](const std::string&, Tensor& t) { t = t.clone(t.requires_grad()); });
  return copy;
}

const AdaptiveFilter* ModelParams::uaf(bool local, std::size_t layer) const {
  const auto& list = local ? local_uaf : global_uaf;
  if (list.empty()) return nullptr;
  return &list[std::min(layer, list.size() - 1)];
}

AdaptiveFilter* ModelParams::uaf(bool local, std::size_t layer) {
  return const_cast<AdaptiveFilter*>(std::as_const(*this).uaf(local, layer));
}

Tensor embed(Tape& tape, const ModelParams& params, const SequenceBatch& batch) {
  check_batch(params.config, batch);
  return tape.embedding(params.embedding, batch.ids, {batch.rows, batch.length});
}

Tensor adaptive_filter(Tape& tape, const ModelConfig& config, AdaptiveFilter& uaf,
                       const Tensor& x0, bool train) {
  const Tensor amp = tape.amplitude(x0);
  const Tensor mixed = config.uaf_as_mlp ? tape.matmul(amp, uaf.weight) : tape.conv1d(amp, uaf.weight);
  return tape.sigmoid(tape.batch_norm_1d(mixed, uaf.bn_gamma, uaf.bn_beta, uaf.stats, train));
}

Tensor gate(Tape& tape, const GateMlp& mlp, const Tensor& amp) {
  const Tensor pooled = tape.mean_axis(amp, 2);
  Tensor z = tape.gelu(tape.add(tape.matmul(pooled, mlp.w1), mlp.b1));
  z = tape.gelu(tape.add(tape.matmul(z, mlp.w2), mlp.b2));
  return tape.softmax(tape.add(tape.matmul(z, mlp.w3), mlp.b3));
}

Tensor gfm_layer(Tape& tape, const ModelConfig& config, const FilterLayer& layer, const Tensor& h,
                 const Tensor& uaf_h, RunMode mode, LayerTrace* trace) {
  const Tensor spectrum = tape.rfft(h);
  const Tensor filter = effective_filter(tape, layer.filter, uaf_h);
  const Tensor filtered = tape.irfft(tape.cmul(spectrum, filter), config.n);
  if (trace != nullptr) {
    trace->x_global = spectrum;
    trace->filter_global = expand_filter(filter, h.dim(0));
  }
  return tape.layer_norm(tape.add(h, drop(tape, filtered, config.dropout, mode)), layer.norm_gamma,
                         layer.norm_beta);
}

std::pair<Tensor, Tensor> lfm_layer(Tape& tape, const ModelConfig& config, const FilterLayer& layer,
                                    const Tensor& h, const Tensor& uaf_h, RunMode mode,
                                    LayerTrace* trace, const Tensor& gate_override) {
  const std::size_t batch = h.dim(0), m = config.bins();
  const spectral::BandLayout bands = spectral::make_band_layout(m, config.bands);
  const Tensor spectrum = tape.rfft(h);
  const Tensor probs = gate_override.defined() ? gate_override
                                               : gate(tape, layer.gate, tape.amplitude(spectrum));
  if (probs.shape() != Shape{batch, config.bands})
    throw ShapeError("gate probabilities must have shape " + ad::shape_string({batch, config.bands}));
  const Tensor filter = effective_filter(tape, layer.filter, uaf_h);
  const Tensor filtered = tape.cmul(spectrum, filter);

  Tensor out;
  for (std::size_t t = 0; t < bands.bands(); ++t) {
    const Tensor band = tape.slice(filtered, 1, bands.starts[t], bands.sizes[t]);
    const Tensor padded = tape.pad(band, 1, bands.starts[t], m - bands.end(t));
    const Tensor back = tape.irfft(padded, config.n);
    const Tensor o_t = tape.layer_norm(tape.add(h, drop(tape, back, config.dropout, mode)),
                                       layer.norm_gamma, layer.norm_beta);
    const Tensor p_t = tape.reshape(tape.slice(probs, 1, t, 1), {batch, 1, 1});
    const Tensor weighted = tape.mul(o_t, p_t);
    out = out.defined() ? tape.add(out, weighted) : weighted;
  }
  if (trace != nullptr) {
    trace->x_local = spectrum;
    trace->gate = probs;
    trace->filter_local = expand_filter(filter, batch);
  }
  return {out, probs};
}

Tensor ffn_block(Tape& tape, const ModelConfig& config, const FeedForward& ffn, const Tensor& o,
                 RunMode mode) {
  const Tensor inner = tape.gelu(tape.add(tape.matmul(o, ffn.w1), ffn.b1));
  const Tensor f = tape.add(tape.matmul(inner, ffn.w2), ffn.b2);
  return tape.layer_norm(tape.add(o, drop(tape, f, config.dropout, mode)), ffn.norm_gamma,
                         ffn.norm_beta);
}

ForwardTrace forward(Tape& tape, ModelParams& params, const SequenceBatch& batch, RunMode mode) {
  const ModelConfig& c = params.config;
  ForwardTrace trace;
  trace.h0 = embed(tape, params, batch);
  check_nonempty(batch);
  trace.x0 = tape.rfft(trace.h0);

  Tensor shared_global, shared_local;
  auto uaf_for = [&](bool local, std::size_t l) -> Tensor {
    AdaptiveFilter* u = params.uaf(local, l);
    if (u == nullptr) return Tensor();
    Tensor& shared = local ? shared_local : shared_global;
    if (!c.uaf_per_layer && shared.defined()) return shared;
    Tensor h = adaptive_filter(tape, c, *u, trace.x0, mode.train);
    if (!c.uaf_per_layer) shared = h;
    return h;
  };

  Tensor hg = trace.h0, hl = trace.h0;
  for (std::size_t l = 0; l < c.layers; ++l) {
    LayerTrace& lt = trace.layers.emplace_back();
    if (c.use_gfm) {
      const FilterLayer& layer = params.global_layers[l];
      const Tensor o = gfm_layer(tape, c, layer, hg, uaf_for(false, l), mode, &lt);
      hg = ffn_block(tape, c, layer.ffn, o, mode);
    }
    if (c.use_lfm) {
      const FilterLayer& layer = params.local_layers[l];
      const Tensor o = lfm_layer(tape, c, layer, hl, uaf_for(true, l), mode, &lt).first;
      hl = ffn_block(tape, c, layer.ffn, o, mode);
    }
  }

  std::vector<Tensor> parts;
  if (c.use_gfm) {
    trace.h_global = hg;
    trace.global_last = last_position(tape, hg);
    parts.push_back(trace.global_last);
  }
  if (c.use_lfm) {
    trace.h_local = hl;
    trace.local_last = last_position(tape, hl);
    parts.push_back(trace.local_last);
  }
  const Tensor joined = parts.size() == 1 ? parts.front() : tape.concat(parts, 1);
  const Tensor fused_in = tape.add(last_position(tape, trace.h0), tape.matmul(joined, params.proj));
  trace.fused = drop(tape, tape.layer_norm(fused_in, params.head_gamma, params.head_beta), c.dropout,
                     mode);
  trace.scores = item_scores(tape, params, trace.fused);
  return trace;
}

Tensor item_scores(Tape& tape, const ModelParams& params, const Tensor& rep) {
  return tape.matmul(rep, tape.transpose(params.embedding));
}

std::vector<double> ranking_scores(const Tensor& scores, std::size_t row) {
  const std::size_t vocab = scores.dim(1);
  const auto v = scores.values().subspan(row * vocab, vocab);
  std::vector<double> out(v.begin(), v.end());
  out[kPaddingId] = -std::numeric_limits<double>::infinity();
  return out;
}

}  // namespace muffin::model
