#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "../support/gradcheck.hpp"
#include "muffin/error.hpp"
#include "muffin/model.hpp"
#include "muffin/spectral.hpp"

using namespace muffin;
using namespace muffin::model;
using muffin::testing::grad_check;
using muffin::testing::project;
using muffin::testing::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.num_items = 12;
  c.d = 4;
  c.n = 8;
  c.layers = 1;
  c.bands = 2;
  c.kernel = 3;
  c.dropout = 0.0;
  return c;
}

SequenceBatch random_batch(std::mt19937_64& rng, std::size_t rows, std::size_t n,
                           std::size_t items) {
  SequenceBatch b;
  b.rows = rows;
  b.length = n;
  b.ids.assign(rows * n, 0);
  std::uniform_int_distribution<std::size_t> len(1, n), item(1, items);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t l = len(rng);
    b.lengths.push_back(l);
    for (std::size_t p = n - l; p < n; ++p) b.ids[r * n + p] = item(rng);
    b.targets.push_back(item(rng));
    b.users.push_back(r);
  }
  return b;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Layer norm over the last axis with unit scale and zero shift.
std::vector<double> plain_layer_norm(std::span<const double> x, std::size_t width) {
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < x.size() / width; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < width; ++i) mean += x[r * width + i];
    mean /= static_cast<double>(width);
    for (std::size_t i = 0; i < width; ++i) var += std::pow(x[r * width + i] - mean, 2);
    var /= static_cast<double>(width);
    for (std::size_t i = 0; i < width; ++i)
      out[r * width + i] = (x[r * width + i] - mean) / std::sqrt(var + 1e-12);
  }
  return out;
}

void set_all(Tensor& t, double value) {
  for (double& v : t.mutable_values()) v = value;
}

void set_complex(Tensor& t, double re, double im) {
  auto v = t.mutable_values();
  for (std::size_t i = 0; i < v.size(); i += 2) {
    v[i] = re;
    v[i + 1] = im;
  }
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.bands = 6;  // m = 5
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.kernel = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.use_gfm = c.use_lfm = false;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("parameter layout follows the configuration") {
  ModelConfig c = small_config();
  c.layers = 2;
  const ModelParams full = ModelParams::init(c, 1);
  CHECK(full.embedding.shape() == ad::Shape{13, 4});
  CHECK(full.global_uaf.size() == 1);
  CHECK(full.local_uaf.size() == 1);
  CHECK(full.global_uaf[0].weight.shape() == ad::Shape{4, 4, 3});
  CHECK(full.proj.shape() == ad::Shape{8, 4});
  CHECK(full.local_layers[1].gate.w1.shape() == ad::Shape{5, 8});
  CHECK(full.local_layers[1].gate.w3.shape() == ad::Shape{8, 2});

  c.use_gfm = false;
  c.uaf_as_mlp = true;
  const ModelParams local_only = ModelParams::init(c, 1);
  CHECK(local_only.global_layers.empty());
  CHECK(local_only.global_uaf.empty());
  CHECK(local_only.local_uaf[0].weight.shape() == ad::Shape{4, 4});
  CHECK(local_only.proj.shape() == ad::Shape{4, 4});

  c = small_config();
  c.layers = 2;
  c.uaf_per_layer = true;
  CHECK(ModelParams::init(c, 1).local_uaf.size() == 2);
  c.use_uaf = false;
  CHECK(ModelParams::init(c, 1).local_uaf.empty());
}

TEST_CASE("complex filters start near the identity") {
  ModelConfig c = small_config();
  c.d = 16;
  c.n = 50;
  const ModelParams p = ModelParams::init(c, 3);
  const auto v = p.global_layers[0].filter.values();
  double re = 0.0, im = 0.0;
  for (std::size_t i = 0; i < v.size(); i += 2) {
    re += v[i];
    im += v[i + 1];
  }
  const double count = static_cast<double>(v.size() / 2);
  CHECK(re / count == doctest::Approx(1.0).epsilon(0.01));
  CHECK(std::abs(im / count) < 0.01);
}

TEST_CASE("embedding lookup") {
  const ModelConfig c = small_config();
  const ModelParams p = ModelParams::init(c, 2);
  SequenceBatch b;
  b.rows = 2;
  b.length = c.n;
  b.ids.assign(2 * c.n, 0);
  b.ids[2 * c.n - 1] = 7;
  Tape tape(false);
  const Tensor h0 = embed(tape, p, b);
  const auto e = p.embedding.values();
  for (std::size_t pos = 0; pos < c.n; ++pos)
    for (std::size_t k = 0; k < c.d; ++k) CHECK(h0.values()[pos * c.d + k] == e[k]);
  for (std::size_t k = 0; k < c.d; ++k)
    CHECK(h0.values()[(2 * c.n - 1) * c.d + k] == e[7 * c.d + k]);

  b.ids[3] = 13;
  CHECK_THROWS_AS(embed(tape, p, b), DataError);
}

TEST_CASE("embedding gradient reaches exactly the referenced rows") {
  const ModelConfig c = small_config();
  const ModelParams p = ModelParams::init(c, 4);
  std::mt19937_64 rng(4);
  const SequenceBatch b = random_batch(rng, 2, c.n, c.num_items);
  auto r = grad_check([&](Tape& t) { return project(t, embed(t, p, b)); }, {{"E", p.embedding}});
  CHECK(r.worst_relative_error < 1e-4);
  std::vector<bool> used(c.vocab(), false);
  for (std::size_t id : b.ids) used[id] = true;
  for (std::size_t row = 0; row < c.vocab(); ++row) {
    double mass = 0.0;
    for (std::size_t k = 0; k < c.d; ++k) mass += std::abs(p.embedding.grad()[row * c.d + k]);
    CHECK((mass > 0.0) == used[row]);
  }
}

TEST_CASE("adaptive filter range and user dependence") {
  for (bool mlp : {false, true}) {
    CAPTURE(mlp);
    ModelConfig c = small_config();
    c.uaf_as_mlp = mlp;
    ModelParams p = ModelParams::init(c, 5);
    std::mt19937_64 rng(5);
    for (int pair = 0; pair < 20; ++pair) {
      SequenceBatch b = random_batch(rng, 2, c.n, c.num_items);
      if (b.ids == std::vector<std::size_t>(b.ids.size(), b.ids[0])) continue;
      Tape tape(false);
      const Tensor x0 = tape.rfft(embed(tape, p, b));
      const Tensor h = adaptive_filter(tape, c, p.global_uaf[0], x0, false);
      CHECK(h.shape() == ad::Shape{2, c.bins(), c.d});
      for (double v : h.values()) CHECK((v > 0.0 && v < 1.0));
      const std::size_t half = h.size() / 2;
      const double linf = max_abs_diff(h.values().first(half), h.values().last(half));
      const bool same_seq = std::equal(b.ids.begin(), b.ids.begin() + c.n, b.ids.begin() + c.n);
      if (!same_seq) CHECK(linf > 0.0);
    }
  }
}

TEST_CASE("global filtering with identity and zero filters") {
  ModelConfig c = small_config();
  c.use_uaf = false;
  ModelParams p = ModelParams::init(c, 6);
  std::mt19937_64 rng(6);
  const Tensor h = random_tensor(rng, {2, c.n, c.d}, false);
  Tape tape(false);

  set_complex(p.global_layers[0].filter, 1.0, 0.0);
  Tensor out = gfm_layer(tape, c, p.global_layers[0], h, Tensor(), RunMode{});
  std::vector<double> doubled(h.values().begin(), h.values().end());
  for (double& v : doubled) v *= 2.0;
  CHECK(max_abs_diff(out.values(), plain_layer_norm(doubled, c.d)) < 1e-9);

  set_complex(p.global_layers[0].filter, 0.0, 0.0);
  out = gfm_layer(tape, c, p.global_layers[0], h, Tensor(), RunMode{});
  CHECK(max_abs_diff(out.values(), plain_layer_norm(h.values(), c.d)) < 1e-12);
}

TEST_CASE("effective filter differs across users") {
  const ModelConfig c = small_config();
  ModelParams p = ModelParams::init(c, 7);
  std::mt19937_64 rng(7);
  SequenceBatch b = random_batch(rng, 2, c.n, c.num_items);
  b.ids[c.n - 1] = 1;
  b.ids[2 * c.n - 1] = 2;
  Tape tape(false);
  const ForwardTrace tr = forward(tape, p, b, RunMode{});
  const Tensor& w = tr.layers[0].filter_global;
  CHECK(w.shape() == ad::Shape{2, c.bins(), c.d, 2});
  const std::size_t half = w.size() / 2;
  CHECK(max_abs_diff(w.values().first(half), w.values().last(half)) > 0.0);
}

TEST_CASE("single-band local filtering equals global filtering") {
  ModelConfig c = small_config();
  c.bands = 1;
  c.dropout = 0.3;
  ModelParams p = ModelParams::init(c, 8);
  FilterLayer& g = p.global_layers[0];
  FilterLayer& l = p.local_layers[0];
  l.filter = g.filter;
  l.norm_gamma = g.norm_gamma;
  l.norm_beta = g.norm_beta;
  l.ffn = g.ffn;

  std::mt19937_64 rng(8);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const SequenceBatch b = random_batch(rng, 3, c.n, c.num_items);
    Tape tape(false);
    const Tensor h0 = embed(tape, p, b);
    const Tensor uaf_h = adaptive_filter(tape, c, p.global_uaf[0], tape.rfft(h0), false);
    const Tensor h = random_tensor(rng, {3, c.n, c.d}, false);
    std::mt19937_64 mask_g(100 + trial), mask_l(100 + trial);
    const Tensor og = ffn_block(tape, c, g.ffn, gfm_layer(tape, c, g, h, uaf_h, {true, &mask_g}),
                                {true, &mask_g});
    auto [ol, probs] = lfm_layer(tape, c, l, h, uaf_h, {true, &mask_l});
    ol = ffn_block(tape, c, l.ffn, ol, {true, &mask_l});
    for (double v : probs.values()) CHECK(v == 1.0);
    worst = std::max(worst, max_abs_diff(og.values(), ol.values()));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("forced-uniform local filtering matches direct band expansion") {
  ModelConfig c = small_config();
  c.use_uaf = false;
  c.d = 2;
  c.bands = 3;
  ModelParams p = ModelParams::init(c, 9);
  set_complex(p.local_layers[0].filter, 1.0, 0.0);
  std::mt19937_64 rng(9);
  const Tensor h = random_tensor(rng, {1, 8, 2}, false);
  const Tensor uniform = Tensor::filled({1, 3}, 1.0 / 3.0);
  Tape tape(false);
  const Tensor out = lfm_layer(tape, c, p.local_layers[0], h, Tensor(), RunMode{}, nullptr, uniform).first;

  spectral::RealBlock x(1, 8, 2);
  std::copy(h.values().begin(), h.values().end(), x.values.begin());
  const spectral::Spectrum f = spectral::rfft(x);
  const spectral::BandLayout layout = spectral::make_band_layout(f.m(), 3);
  std::vector<double> expect(16, 0.0);
  for (std::size_t t = 0; t < 3; ++t) {
    const auto back = spectral::irfft(spectral::zero_pad_band(spectral::slice_band(f, layout, t), layout, t, 8), 8);
    std::vector<double> resid(16);
    for (std::size_t i = 0; i < 16; ++i) resid[i] = x.values[i] + back.values[i];
    const auto normed = plain_layer_norm(resid, 2);
    for (std::size_t i = 0; i < 16; ++i) expect[i] += normed[i] / 3.0;
  }
  CHECK(max_abs_diff(out.values(), expect) < 1e-12);
}

TEST_CASE("band slices of the filtered spectrum reassemble it exactly") {
  std::mt19937_64 rng(10);
  for (auto [n, bands] : {std::pair<std::size_t, std::size_t>{50, 1}, {50, 4}, {50, 6}, {48, 5}, {8, 2}}) {
    const std::size_t m = n / 2 + 1;
    const Tensor h = random_tensor(rng, {2, n, 3}, false);
    const Tensor w = random_tensor(rng, {m, 3, 2}, false);
    Tape tape(false);
    const Tensor filtered = tape.cmul(tape.rfft(h), w);
    const spectral::BandLayout layout = spectral::make_band_layout(m, bands);
    Tensor sum;
    for (std::size_t t = 0; t < bands; ++t) {
      const Tensor padded = tape.pad(tape.slice(filtered, 1, layout.starts[t], layout.sizes[t]), 1,
                                     layout.starts[t], m - layout.end(t));
      sum = sum.defined() ? tape.add(sum, padded) : padded;
    }
    CHECK(max_abs_diff(sum.values(), filtered.values()) == 0.0);
  }
}

TEST_CASE("gate outputs") {
  ModelConfig c = small_config();
  c.bands = 4;
  ModelParams p = ModelParams::init(c, 11);
  std::mt19937_64 rng(11);
  const Tensor amp_row = random_tensor(rng, {1, c.bins(), c.d}, false, 0.0, 2.0);
  std::vector<double> twice(amp_row.values().begin(), amp_row.values().end());
  twice.insert(twice.end(), amp_row.values().begin(), amp_row.values().end());
  const Tensor amp({2, c.bins(), c.d}, twice);
  Tape tape(false);
  const Tensor probs = gate(tape, p.local_layers[0].gate, amp);
  const auto v = probs.values();
  double total = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(v[k] == v[4 + k]);
    CHECK(v[k] > 0.0);
    total += v[k];
  }
  CHECK(std::abs(total - 1.0) < 1e-12);

  set_all(p.local_layers[0].gate.w3, 0.0);
  const Tensor flat = gate(tape, p.local_layers[0].gate, amp);
  for (double x : flat.values()) CHECK(x == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("gate gradient under a balance penalty") {
  ModelConfig c = small_config();
  c.bands = 3;
  ModelParams p = ModelParams::init(c, 12);
  // Larger weights make the penalty sensitive to every gate parameter.
  std::mt19937_64 rng(12);
  GateMlp& g = p.local_layers[0].gate;
  g.w1 = random_tensor(rng, g.w1.shape());
  g.w2 = random_tensor(rng, g.w2.shape());
  g.w3 = random_tensor(rng, g.w3.shape());
  g.b1 = random_tensor(rng, g.b1.shape());
  const Tensor amp = random_tensor(rng, {3, c.bins(), c.d}, false, 0.0, 2.0);
  auto r = grad_check(
      [&](Tape& t) {
        const Tensor dev = t.add_scalar(gate(t, g, amp), -1.0 / 3.0);
        return t.scale(t.mean_axis(t.mean_axis(t.mul(dev, dev), 1), 0), 1.0);
      },
      {{"w1", g.w1}, {"b1", g.b1}, {"w2", g.w2}, {"b2", g.b2}, {"w3", g.w3}, {"b3", g.b3}});
  CHECK(r.worst_relative_error < 1e-4);
}

TEST_CASE("feed-forward block") {
  const ModelConfig c = small_config();
  ModelParams p = ModelParams::init(c, 13);
  std::mt19937_64 rng(13);
  FeedForward& f = p.global_layers[0].ffn;
  const Tensor o = random_tensor(rng, {2, c.n, c.d});
  {
    FeedForward zero = f;
    zero.w1 = Tensor::zeros(f.w1.shape());
    zero.w2 = Tensor::zeros(f.w2.shape());
    zero.b1 = Tensor::zeros(f.b1.shape());
    zero.b2 = Tensor::zeros(f.b2.shape());
    Tape tape(false);
    const Tensor out = ffn_block(tape, c, zero, o, RunMode{});
    CHECK(out.shape() == o.shape());
    CHECK(max_abs_diff(out.values(), plain_layer_norm(o.values(), c.d)) < 1e-12);
  }
  f.w1 = random_tensor(rng, f.w1.shape());
  f.w2 = random_tensor(rng, f.w2.shape());
  auto r = grad_check([&](Tape& t) { return project(t, ffn_block(t, c, f, o, RunMode{})); },
                      {{"o", o}, {"w1", f.w1}, {"b1", f.b1}, {"w2", f.w2}, {"b2", f.b2},
                       {"gamma", f.norm_gamma}, {"beta", f.norm_beta}});
  CHECK(r.worst_relative_error < 1e-4);
}

TEST_CASE("forward contract") {
  ModelConfig c = small_config();
  c.layers = 2;
  c.bands = 3;
  ModelParams p = ModelParams::init(c, 14);
  std::mt19937_64 rng(14);
  SequenceBatch b = random_batch(rng, 4, c.n, c.num_items);
  std::copy(b.ids.begin(), b.ids.begin() + c.n, b.ids.begin() + c.n);  // rows 0 and 1 identical

  Tape tape(false);
  const ForwardTrace tr = forward(tape, p, b, RunMode{});
  CHECK(tr.scores.shape() == ad::Shape{4, c.vocab()});
  CHECK(tr.h_global.shape() == ad::Shape{4, c.n, c.d});
  CHECK(tr.h_local.shape() == ad::Shape{4, c.n, c.d});
  CHECK(tr.layers.size() == 2);
  const auto s = tr.scores.values();
  for (std::size_t i = 0; i < c.vocab(); ++i) CHECK(s[i] == s[c.vocab() + i]);
  const auto ranked = ranking_scores(tr.scores, 2);
  CHECK(std::isinf(ranked[0]));
  CHECK(ranked[0] < 0.0);
  CHECK(ranked[1] == s[2 * c.vocab() + 1]);

  for (const LayerTrace& lt : tr.layers) {
    const auto g = lt.gate.values();
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        CHECK(g[r * 3 + k] > 0.0);
        total += g[r * 3 + k];
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }

  Tape again(false);
  const ForwardTrace tr2 = forward(again, p, b, RunMode{});
  CHECK(max_abs_diff(tr.scores.values(), tr2.scores.values()) == 0.0);
  ModelParams twin = ModelParams::init(c, 14);
  const ForwardTrace tr3 = forward(again, twin, b, RunMode{});
  CHECK(max_abs_diff(tr.scores.values(), tr3.scores.values()) == 0.0);

  std::fill(b.ids.begin() + 2 * c.n, b.ids.begin() + 3 * c.n, 0);
  CHECK_THROWS_AS(forward(again, p, b, RunMode{}), DataError);
}

TEST_CASE("train mode requires a dropout generator") {
  ModelConfig c = small_config();
  c.dropout = 0.2;
  ModelParams p = ModelParams::init(c, 15);
  std::mt19937_64 rng(15);
  const SequenceBatch b = random_batch(rng, 2, c.n, c.num_items);
  Tape tape;
  CHECK_THROWS_AS(forward(tape, p, b, RunMode{true, nullptr}), StateError);
}

TEST_CASE("adaptive filter amplitude varies across users only with the UAF") {
  for (bool use_uaf : {true, false}) {
    CAPTURE(use_uaf);
    ModelConfig c = small_config();
    c.use_uaf = use_uaf;
    ModelParams p = ModelParams::init(c, 16);
    std::mt19937_64 rng(16);
    SequenceBatch b = random_batch(rng, 6, c.n, c.num_items);
    b.ids[c.n - 1] = 1;
    b.ids[2 * c.n - 1] = 2;
    Tape tape(false);
    const ForwardTrace tr = forward(tape, p, b, RunMode{});
    const Tensor amp = tape.amplitude(tr.layers[0].filter_local);
    const std::size_t per_user = c.bins() * c.d;
    double spread = 0.0;
    for (std::size_t i = 0; i < per_user; ++i)
      for (std::size_t u = 1; u < 6; ++u)
        spread = std::max(spread, std::abs(amp.values()[u * per_user + i] - amp.values()[i]));
    if (use_uaf)
      CHECK(spread > 0.0);
    else
      CHECK(spread == 0.0);
  }
}

TEST_CASE("full model loss gradient matches finite differences") {
  ModelConfig c = small_config();
  c.dropout = 0.1;
  ModelParams p = ModelParams::init(c, 17);
  std::mt19937_64 rng(17);
  // Move every parameter off its initialization so no path is trivially flat.
  for (auto& [name, t] : p.parameters())
    for (double& v : t.mutable_values()) v += std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
  const SequenceBatch b = random_batch(rng, 2, c.n, c.num_items);
  auto loss = [&](Tape& t) {
    std::mt19937_64 masks(99);
    ModelParams local = p;  // running statistics stay untouched across evaluations
    const ForwardTrace tr = forward(t, local, b, RunMode{true, &masks});
    const Tensor rec = t.cross_entropy(tr.scores, b.targets);
    const Tensor aux = t.add(t.cross_entropy(item_scores(t, p, tr.global_last), b.targets),
                             t.cross_entropy(item_scores(t, p, tr.local_last), b.targets));
    const Tensor dev = t.add_scalar(tr.layers[0].gate, -0.5);
    const Tensor bal = t.scale(t.mean(t.mul(dev, dev)), 1.0);
    return t.add(rec, t.add(t.scale(aux, 0.1), t.scale(bal, 0.2)));
  };
  auto r = grad_check(loss, p.parameters());
  CAPTURE(r.worst_input);
  CHECK(r.worst_relative_error < 1e-4);

  for (const auto& [name, t] : p.parameters()) {
    CAPTURE(name);
    double mass = 0.0;
    for (double g : t.grad()) mass += std::abs(g);
    CHECK(mass > 0.0);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  ModelConfig c = small_config();
  c.layers = 2;
  c.uaf_per_layer = true;
  ModelParams p = ModelParams::init(c, 18);
  std::mt19937_64 rng(18);
  const SequenceBatch b = random_batch(rng, 3, c.n, c.num_items);
  {
    Tape tape(false);
    forward(tape, p, b, RunMode{true, &rng});  // populate running statistics
  }
  const auto dir = std::filesystem::temp_directory_path() / "muffin_model_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";
  save_checkpoint(p, path);
  const ModelParams q = load_checkpoint(path);
  CHECK(q.config.uaf_per_layer);
  CHECK(q.config.layers == 2);
  const auto pa = p.parameters(), qa = q.parameters();
  REQUIRE(pa.size() == qa.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == qa[i].first);
    CHECK(std::equal(pa[i].second.values().begin(), pa[i].second.values().end(),
                     qa[i].second.values().begin()));
  }
  const auto pb = p.buffers();
  const auto qb = q.buffers();
  REQUIRE(pb.size() == qb.size());
  for (std::size_t i = 0; i < pb.size(); ++i) {
    CHECK(pb[i].second->mean == qb[i].second->mean);
    CHECK(pb[i].second->var == qb[i].second->var);
  }

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  { std::ofstream(path) << "garbage"; }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("clone detaches storage") {
  const ModelParams p = ModelParams::init(small_config(), 19);
  ModelParams q = p.clone();
  q.embedding.mutable_values()[0] += 1.0;
  CHECK(q.embedding.values()[0] != p.embedding.values()[0]);
  CHECK(q.embedding.requires_grad());
}
