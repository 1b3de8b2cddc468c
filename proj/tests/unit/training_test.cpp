#include <doctest.h>

#include <cmath>
#include <json.hpp>
#include <random>

#include "../support/gradcheck.hpp"
#include "muffin/error.hpp"
#include "muffin/training.hpp"

using namespace muffin;
using namespace muffin::training;
using muffin::testing::grad_check;

namespace {

data::SequenceDataset synthetic_set(std::size_t users, std::uint64_t seed) {
  data::SynthSpec s;
  s.num_users = users;
  s.num_items = 40;
  s.genres = 4;
  s.min_length = 8;
  s.max_length = 20;
  s.seed = seed;
  return data::build_sequences(data::synth_generate(s));
}

model::ModelConfig tiny_model(std::size_t items) {
  model::ModelConfig c;
  c.num_items = items;
  c.d = 8;
  c.n = 12;
  c.layers = 1;
  c.bands = 2;
  c.dropout = 0.1;
  return c;
}

Tensor gate_tensor(std::vector<double> p, std::size_t k) {
  const std::size_t rows = p.size() / k;
  return Tensor({rows, k}, std::move(p), false);
}

// (1/K) sum (p - 1/K)^2 averaged over rows, computed independently of the tape.
double bal_reference(const std::vector<double>& p, std::size_t k) {
  long double total = 0.0L;
  for (std::size_t i = 0; i < p.size(); ++i) total += std::pow(static_cast<long double>(p[i]) - 1.0L / k, 2);
  return static_cast<double>(total / static_cast<long double>(p.size()));
}

}  // namespace

TEST_CASE("recommendation loss values") {
  Tape tape;
  // Column 0 is padding and excluded.
  const Tensor scores({1, 4}, {50.0, 1.0, 2.0, 3.0}, false);
  const std::size_t target[] = {3};
  const long double oracle = std::log(std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L)) - 3.0L;
  CHECK(rec_loss(tape, scores, target).item() == doctest::Approx(static_cast<double>(oracle)).epsilon(1e-14));
  CHECK(rec_loss(tape, scores, target).item() == doctest::Approx(0.40760596).epsilon(1e-8));

  const Tensor flat({2, 6}, std::vector<double>(12, 0.7), false);
  const std::size_t two[] = {1, 5};
  CHECK(rec_loss(tape, flat, two).item() == doctest::Approx(std::log(5.0)).epsilon(1e-14));

  const Tensor peaked({1, 4}, {0.0, 0.0, 800.0, 0.0}, false);
  const std::size_t second[] = {2};
  CHECK(rec_loss(tape, peaked, second).item() == doctest::Approx(0.0).epsilon(1e-300));

  const std::size_t pad[] = {0};
  CHECK_THROWS_AS(rec_loss(tape, scores, pad), DataError);
}

TEST_CASE("balance loss values and bounds") {
  Tape tape;
  auto bal = [&](std::vector<double> p, std::size_t k) {
    const Tensor g = gate_tensor(std::move(p), k);
    return bal_loss(tape, std::span<const Tensor>(&g, 1)).item();
  };
  CHECK(bal({0.25, 0.25, 0.25, 0.25}, 4) == 0.0);
  CHECK(bal({1.0, 0.0}, 2) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(bal({1.0, 0.0, 0.0, 0.0}, 4) == doctest::Approx(0.1875).epsilon(1e-15));
  for (std::size_t k = 2; k <= 6; ++k) {
    std::vector<double> onehot(k, 0.0);
    onehot[k - 1] = 1.0;
    CHECK(bal(onehot, k) == doctest::Approx(static_cast<double>(k - 1) / (k * k)).epsilon(1e-14));
  }

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 2 + trial % 5, rows = 1 + trial % 4;
    std::vector<double> p(rows * k);
    for (std::size_t r = 0; r < rows; ++r) {
      double z = 0.0;
      for (std::size_t t = 0; t < k; ++t) z += p[r * k + t] = std::exponential_distribution<double>(1.0)(rng);
      for (std::size_t t = 0; t < k; ++t) p[r * k + t] /= z;
    }
    const double v = bal(p, k);
    CHECK(v >= 0.0);
    CHECK(v <= static_cast<double>(k - 1) / (k * k) + 1e-15);
    CHECK(v == doctest::Approx(bal_reference(p, k)).epsilon(1e-12));
  }

  // Layers are averaged.
  const Tensor layers[] = {gate_tensor({1.0, 0.0}, 2), gate_tensor({0.5, 0.5}, 2)};
  CHECK(bal_loss(tape, layers).item() == doctest::Approx(0.125).epsilon(1e-15));
  CHECK(bal_loss(tape, {}).item() == 0.0);
}

TEST_CASE("auxiliary loss over heads") {
  model::ModelConfig c = tiny_model(10);
  const model::ModelParams p = model::ModelParams::init(c, 1);
  std::mt19937_64 rng(2);
  const Tensor rep = testing::random_tensor(rng, {3, c.d}, false);
  const std::size_t targets[] = {1, 4, 10};
  Tape tape;
  model::ForwardTrace trace;
  trace.global_last = rep;
  trace.local_last = rep;
  const double single = tape.cross_entropy(model::item_scores(tape, p, rep), targets).item();
  CHECK(aux_loss(tape, p, trace, targets).item() == doctest::Approx(2.0 * single).epsilon(1e-14));
  trace.local_last = Tensor();
  CHECK(aux_loss(tape, p, trace, targets).item() == single);
}

TEST_CASE("zero weights reduce the total to the recommendation loss") {
  const data::SequenceDataset ds = synthetic_set(12, 3);
  model::ModelConfig c = tiny_model(ds.num_items());
  model::ModelParams p = model::ModelParams::init(c, 4);
  const auto batches = data::make_batches(ds, c.n, 8, 5, data::Split::Train, false);
  std::mt19937_64 rng(6);
  Tape tape;
  const model::ForwardTrace tr = model::forward(tape, p, batches.front(), {true, &rng});
  const LossParts zero = total_loss(tape, p, tr, batches.front().targets, 0.0, 0.0);
  CHECK(zero.total.item() == zero.rec.item());
  CHECK_FALSE(zero.aux.defined());
  CHECK_FALSE(zero.bal.defined());

  const LossParts both = total_loss(tape, p, tr, batches.front().targets, 0.1, 0.2);
  CHECK(both.total.item() ==
        doctest::Approx(both.rec.item() + 0.1 * both.aux.item() + 0.2 * both.bal.item()).epsilon(1e-14));
  const LossParts heavier = total_loss(tape, p, tr, batches.front().targets, 0.1, 0.4);
  CHECK((both.bal.item() == 0.0 || heavier.total.item() > both.total.item()));
}

TEST_CASE("total loss gradient matches finite differences") {
  model::ModelConfig c = tiny_model(12);
  c.d = 4;
  c.n = 8;
  model::ModelParams p = model::ModelParams::init(c, 7);
  std::mt19937_64 rng(7);
  for (auto& [name, t] : p.parameters())
    for (double& v : t.mutable_values()) v += std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
  SequenceBatch b;
  b.rows = 2;
  b.length = c.n;
  b.ids = {0, 0, 0, 3, 7, 1, 12, 5, 0, 2, 2, 9, 4, 11, 6, 8};
  b.lengths = {5, 7};
  b.targets = {4, 10};
  b.users = {0, 1};
  auto loss = [&](Tape& t) {
    std::mt19937_64 masks(99);
    model::ModelParams local = p;
    const model::ForwardTrace tr = model::forward(t, local, b, {true, &masks});
    return total_loss(t, p, tr, b.targets, 0.1, 0.2).total;
  };
  const auto r = grad_check(loss, p.parameters());
  CAPTURE(r.worst_input);
  CHECK(r.worst_relative_error < 1e-4);
}

TEST_CASE("adam update matches the closed form") {
  TrainConfig cfg;
  Tensor w({3}, {0.5, -1.0, 2.0}, true);
  Adam adam({w}, cfg);
  const std::vector<double> grads = {0.3, -2.0, 0.0};
  for (int step = 1; step <= 3; ++step) {
    const std::vector<double> before(w.values().begin(), w.values().end());
    {
      Tape tape;
      const Tensor g({3}, grads, false);
      tape.backward(tape.sum(tape.mul(w, g)));
    }
    adam.step();
    CHECK(adam.state().step == static_cast<std::uint64_t>(step));
    CHECK(adam.state().first[0].size() == w.size());
    // A constant gradient keeps the bias-corrected moments at g and g^2.
    for (std::size_t i = 0; i < 3; ++i) {
      const double expected = before[i] - cfg.lr * grads[i] / (std::abs(grads[i]) + cfg.adam_eps);
      CHECK(w.values()[i] == doctest::Approx(expected).epsilon(1e-12));
    }
    CHECK_FALSE(w.has_grad());
  }
}

TEST_CASE("gradient clipping bounds the applied step") {
  TrainConfig cfg;
  cfg.clip_norm = 1.0;
  cfg.adam_beta1 = 0.0;
  cfg.adam_beta2 = 0.0;
  Tensor w({1}, {0.0}, true);
  Adam adam({w}, cfg);
  {
    Tape tape;
    tape.backward(tape.scale(w, 10.0));
  }
  CHECK(adam.step() == doctest::Approx(10.0));
  CHECK(w.values()[0] == doctest::Approx(-cfg.lr).epsilon(1e-6));
}

TEST_CASE("one adam step lowers the loss on a fixed batch") {
  const data::SequenceDataset ds = synthetic_set(32, 11);
  int lowered = 0;
  const int seeds = 20;
  for (int seed = 0; seed < seeds; ++seed) {
    model::ModelConfig c = tiny_model(ds.num_items());
    c.dropout = 0.0;
    model::ModelParams p = model::ModelParams::init(c, 100 + seed);
    const SequenceBatch b = data::make_batches(ds, c.n, 16, seed, data::Split::Train, false).front();
    std::vector<Tensor> tensors;
    for (auto& [name, t] : p.parameters()) tensors.push_back(t);
    Adam adam(tensors, TrainConfig{});
    auto measure = [&](bool step) {
      Tape tape(step);
      const model::ForwardTrace tr = model::forward(tape, p, b, {true, nullptr});
      const LossParts l = total_loss(tape, p, tr, b.targets, 0.1, 0.2);
      if (step) {
        tape.backward(l.total);
        adam.step();
      }
      return l.total.item();
    };
    const double before = measure(true);
    if (measure(false) < before) ++lowered;
  }
  CHECK(lowered >= 19);
}

TEST_CASE("training loss falls over the first epochs") {
  const data::SequenceDataset ds = synthetic_set(32, 13);
  std::vector<double> curve(10, 0.0);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.max_epochs = 10;
    cfg.patience = 10;
    cfg.seed = seed;
    const TrainResult r = train(ds, tiny_model(ds.num_items()), cfg);
    REQUIRE(r.history.size() == 10);
    for (std::size_t e = 0; e < 10; ++e) curve[e] += r.history[e].total / 3.0;
  }
  int drops = 0;
  for (std::size_t e = 1; e < 10; ++e) drops += curve[e] < curve[e - 1];
  drops += curve[9] < curve[0];  // ten comparisons against the starting level
  CHECK(drops >= 8);
}

TEST_CASE("training is deterministic and its history recomposes") {
  const data::SequenceDataset ds = synthetic_set(20, 17);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_epochs = 4;
  cfg.seed = 9;
  const model::ModelConfig c = tiny_model(ds.num_items());
  const TrainResult a = train(ds, c, cfg);
  const TrainResult b = train(ds, c, cfg);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    const EpochRecord &x = a.history[e], &y = b.history[e];
    CHECK(x.total == y.total);
    CHECK(x.rec == y.rec);
    CHECK(x.valid_ndcg == y.valid_ndcg);
    CHECK(x.gate_mean == y.gate_mean);
    CHECK(std::abs(x.rec + cfg.alpha * x.aux + cfg.beta * x.bal - x.total) < 1e-10);
    REQUIRE(x.gate_mean.size() == c.bands);
    CHECK(x.gate_mean[0] + x.gate_mean[1] == doctest::Approx(1.0).epsilon(1e-12));
    const auto j = nlohmann::json::parse(history_line(x));
    CHECK(j["epoch"] == x.epoch);
    CHECK(j["loss"]["bal"].get<double>() == x.bal);
    CHECK(j["valid"]["ndcg@20"].get<double>() == x.valid_ndcg20);
  }
  CHECK(a.best_epoch >= 1);
  CHECK(a.best_valid == a.history[a.best_epoch - 1].valid_ndcg20);

  cfg.seed = 10;
  const TrainResult other = train(ds, c, cfg);
  CHECK(other.history[0].total != a.history[0].total);
}

TEST_CASE("early stopping counter") {
  EarlyStopper s(15);
  std::size_t epoch = 0;
  while (!s.should_stop()) {
    ++epoch;
    s.update(0.3);
  }
  CHECK(epoch == 16);
  CHECK(s.best_epoch() == 1);

  EarlyStopper t(2);
  CHECK(t.update(0.1));
  CHECK_FALSE(t.update(0.1));
  CHECK(t.update(0.2));
  CHECK_FALSE(t.update(0.15));
  CHECK_FALSE(t.should_stop());
  CHECK_FALSE(t.update(0.2));
  CHECK(t.should_stop());
  CHECK(t.best_epoch() == 3);
  CHECK_THROWS_AS(EarlyStopper(0), ConfigError);
}

TEST_CASE("train rejects bad input") {
  const data::SequenceDataset ds = synthetic_set(8, 19);
  TrainConfig cfg;
  cfg.max_epochs = 1;
  model::ModelConfig c = tiny_model(ds.num_items() + 1);
  CHECK_THROWS_AS(train(ds, c, cfg), ConfigError);
  c.num_items = ds.num_items();
  cfg.alpha = -0.1;
  CHECK_THROWS_AS(train(ds, c, cfg), ConfigError);
  cfg.alpha = 0.1;

  data::SequenceDataset shorts;
  shorts.item_ids = ds.item_ids;
  shorts.user_ids = {"a"};
  shorts.sequences = {{1, 2, 3}};  // a single train input item leaves no training pair
  c.num_items = shorts.num_items();
  CHECK_THROWS_AS(train(shorts, c, cfg), DataError);
}
