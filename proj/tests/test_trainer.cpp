#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "menglan/synth.hpp"
#include "menglan/trainer.hpp"
#include "support/gradcheck.hpp"

using namespace menglan;
using testsupport::grad_check;
using testsupport::random_tensor;

TEST_CASE("mse_loss values and gradient") {
  Tensor y = Tensor::from_vector({2}, {0, 2});
  Tensor same = y.detach_copy();
  CHECK(mse_loss(y, same)[0] == 0.0);

  Tensor yhat = Tensor::from_vector({2}, {1, 1});
  CHECK(mse_loss(y, yhat)[0] == doctest::Approx(1.0));

  // grad = 2(yhat - y)/N, checked analytically and by finite differences
  Rng rng(6);
  Tensor yr = random_tensor({5}, rng);
  Tensor yh = random_tensor({5}, rng);
  yh.set_requires_grad();
  yh.zero_grad();
  mse_loss(yr, yh).backward();
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(yh.grad()[i] == doctest::Approx(2.0 * (yh[i] - yr[i]) / 5.0).epsilon(1e-10));
  auto r = grad_check([&] { return mse_loss(yr, yh); }, {yh});
  CHECK(r.max_rel_err < 1e-4);

  CHECK_THROWS_AS(mse_loss(Tensor({2}), Tensor({3})), DimensionError);
}

TEST_CASE("metrics: hand values and formula oracle") {
  MetricsReport perfect = metrics({1, 2, 3}, {1, 2, 3});
  CHECK(perfect.rmse == 0.0);
  CHECK(perfect.mse == 0.0);
  CHECK(perfect.mae == 0.0);
  CHECK(perfect.r2 == 1.0);

  MetricsReport m = metrics({0, 2}, {1, 1});
  CHECK(m.mse == doctest::Approx(1.0));
  CHECK(m.rmse == doctest::Approx(1.0));
  CHECK(m.mae == doctest::Approx(1.0));
  CHECK(m.r2 == doctest::Approx(0.0));

  MetricsReport flat = metrics({2, 2, 2}, {1, 2, 3});
  CHECK(!flat.r2_defined);
  CHECK(std::isnan(flat.r2));

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t n = 3 + trial % 20;
    std::vector<double> y(n), yh(n);
    for (auto& v : y) v = rng.uniform(-5, 5);
    for (auto& v : yh) v = rng.uniform(-5, 5);
    MetricsReport r = metrics(y, yh, 1.5);

    // independent formula-by-formula oracle
    double ybar = 0.0;
    for (double v : y) ybar += v;
    ybar /= static_cast<double>(n);
    double ss = 0.0, sa = 0.0, st = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      ss += (y[i] - yh[i]) * (y[i] - yh[i]);
      sa += std::abs(y[i] - yh[i]);
      st += (y[i] - ybar) * (y[i] - ybar);
    }
    CHECK(std::abs(r.mse - ss / n) < 1e-12);
    CHECK(std::abs(r.rmse - std::sqrt(ss / n)) < 1e-12);
    CHECK(std::abs(r.mae - sa / n) < 1e-12);
    CHECK(std::abs(r.r2 - (1.0 - ss / st)) < 1e-12);
    CHECK(std::abs(r.rmse * r.rmse - r.mse) < 1e-12);
    CHECK(r.per_sample_seconds == doctest::Approx(1.5 / n));
    // R^2 identity: r2 = 1 - mse*n / st
    CHECK(std::abs(r.r2 - (1.0 - r.mse * n / st)) < 1e-12);
  }
}

TEST_CASE("adam_step: zero gradient with zero decay leaves parameters unchanged") {
  Rng rng(4);
  Tensor p = random_tensor({5}, rng);
  p.set_requires_grad();
  p.zero_grad();
  std::vector<double> before = p.data();
  AdamState s;
  s.weight_decay = 0.0;
  std::vector<Tensor> params{p};
  adam_step(s, params);
  CHECK(p.data() == before);
}

TEST_CASE("adam_step: first step magnitude is about lr regardless of gradient scale") {
  AdamState s;
  s.weight_decay = 0.0;
  for (double g : {1e-6, 1.0, 1e6}) {
    Tensor p = Tensor::scalar(0.0);
    p.set_requires_grad();
    p.mut_grad() = {g};
    AdamState fresh = s;
    std::vector<Tensor> params{p};
    adam_step(fresh, params);
    CHECK(std::abs(p[0]) <= s.lr * (1.0 + 1e-6));
    CHECK(std::abs(p[0]) > s.lr * 0.99);
  }
}

TEST_CASE("adam_step: 10-step trajectory on f(x)=x^2 matches hand-rolled reference") {
  Tensor x = Tensor::scalar(1.0);
  x.set_requires_grad();
  AdamState s;
  s.weight_decay = 0.0;
  std::vector<Tensor> params{x};

  double rx = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 10; ++t) {
    x.zero_grad();
    Tensor loss = mul(x, x);
    loss.backward();
    adam_step(s, params);

    double g = 2.0 * rx;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    double mhat = m / (1.0 - std::pow(0.9, t));
    double vhat = v / (1.0 - std::pow(0.999, t));
    rx -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
    CHECK(std::abs(x[0] - rx) < 1e-12);
  }
}

TEST_CASE("adam_step: decoupled weight decay shrinks parameters") {
  Tensor p = Tensor::scalar(1.0);
  p.set_requires_grad();
  p.zero_grad();
  AdamState s;
  s.weight_decay = 0.5;
  std::vector<Tensor> params{p};
  adam_step(s, params);
  CHECK(p[0] == doctest::Approx(1.0 - s.lr * 0.5));
}

TEST_CASE("adam_step aborts on non-finite gradient with diagnostics") {
  Tensor p = Tensor::scalar(1.0);
  p.set_requires_grad();
  p.mut_grad() = {std::numeric_limits<double>::quiet_NaN()};
  AdamState s;
  std::vector<Tensor> params{p};
  CHECK_THROWS_WITH_AS(adam_step(s, params), doctest::Contains("step"), DivergenceError);
}

namespace {

// synthetic linear-target samples: target_b is a linear readout of the means
std::vector<SampleWindow> linear_samples(std::size_t n, std::size_t w, Rng& rng) {
  std::vector<SampleWindow> out(n);
  for (auto& s : out) {
    s.values.resize(kSensorCount * w);
    double acc = 0.0;
    for (std::size_t c = 0; c < kSensorCount; ++c) {
      double level = rng.uniform(-1, 1);
      for (std::size_t t = 0; t < w; ++t) s.values[c * w + t] = level + 0.01 * rng.uniform(-1, 1);
      acc += level * (c % 3 == 0 ? 1.0 : -0.5);
    }
    s.target_a = acc;
    s.target_b = acc;
  }
  return out;
}

StandardizationStats unit_stats() {
  StandardizationStats st;
  st.mean.fill(0.0);
  st.stddev.fill(1.0);
  st.eps = 0.0;
  return st;
}

}  // namespace

TEST_CASE("overfit smoke: 64-sample synthetic regression reaches MSE < 1e-3") {
  Rng rng(77);
  std::size_t w = 16;
  auto samples = linear_samples(64, w, rng);
  ModelConfig cfg;
  cfg.window_width = w;
  cfg.width_multiplier = 0.1;
  cfg.heads = 2;
  cfg.dropout_rate = 0.0;
  cfg.seed = 5;
  MenglanModel model(cfg, Rng(cfg.seed));

  StandardizationStats stats = unit_stats();
  std::vector<std::size_t> ids(samples.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  Tensor x = batch_tensor(samples, ids, stats);
  Tensor y = target_tensor(samples, ids, "ethylene");

  AdamState adam;
  adam.lr = 0.005;
  adam.weight_decay = 0.0;
  auto trainable = model.trainable();
  Rng drop(1);
  double last = 1e9;
  for (int step = 0; step < 2000; ++step) {
    Tensor yhat = model.forward(x, Mode::train, drop);
    Tensor loss = mse_loss(y, yhat);
    last = loss[0];
    if (last < 5e-4) break;
    for (auto& p : trainable) p.zero_grad();
    loss.backward();
    adam_step(adam, trainable);
  }
  CHECK(last < 1e-3);
}

TEST_CASE("ann baseline overfits linear synthetic data") {
  Rng rng(78);
  std::size_t w = 8;
  auto samples = linear_samples(64, w, rng);
  ModelConfig cfg;
  cfg.window_width = w;
  cfg.dropout_rate = 0.0;
  cfg.seed = 6;
  auto model = build_baseline("ann", cfg, Rng(cfg.seed));

  StandardizationStats stats = unit_stats();
  std::vector<std::size_t> ids(samples.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  Tensor x = batch_tensor(samples, ids, stats);
  Tensor y = target_tensor(samples, ids, "ethylene");
  AdamState adam;
  adam.lr = 0.01;
  adam.weight_decay = 0.0;
  auto trainable = model->trainable();
  Rng drop(1);
  double last = 1e9;
  for (int step = 0; step < 1500 && last > 5e-3; ++step) {
    Tensor yhat = model->forward(x, Mode::train, drop);
    Tensor loss = mse_loss(y, yhat);
    last = loss[0];
    for (auto& p : trainable) p.zero_grad();
    loss.backward();
    adam_step(adam, trainable);
  }
  CHECK(last < 1e-2);
}

TEST_CASE("train loop: patience arithmetic and determinism") {
  Rng rng(79);
  std::size_t w = 8;
  auto samples = linear_samples(40, w, rng);
  ModelConfig cfg;
  cfg.window_width = w;
  cfg.width_multiplier = 0.05;
  cfg.heads = 2;
  cfg.dropout_rate = 0.0;
  cfg.seed = 7;
  TrainConfig tc;
  tc.batch_size = 8;
  tc.max_epochs = 40;
  tc.patience = 3;
  tc.seed = 7;
  StandardizationStats stats = unit_stats();
  SplitIndex idx = split(samples.size(), 7);

  auto run = [&] {
    MenglanModel model(cfg, Rng(cfg.seed));
    AdamState adam;
    adam.lr = 0.003;
    return train(model, samples, idx, tc, adam, stats);
  };
  TrainResult a = run(), b = run();
  REQUIRE(a.epochs.size() == b.epochs.size());
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    CHECK(a.epochs[i].train_mse == b.epochs[i].train_mse);  // bit-identical
    CHECK(a.epochs[i].val_mse == b.epochs[i].val_mse);
  }
  // early stopping never keeps a checkpoint worse than the best epoch seen
  double best = 1e300;
  for (const auto& row : a.epochs) best = std::min(best, row.val_mse);
  CHECK(a.best_val_mse == best);
  // stop happens patience epochs after the best
  CHECK(a.epochs.size() <= a.best_epoch + tc.patience);
}

TEST_CASE("train loop: strictly worsening validation stops at 1 + patience") {
  // an already-converged trivial setup: lr 0 after epoch 1 is hard to force,
  // so instead check the boundary with a model whose validation loss can
  // only get worse: weight decay pulls a perfect linear fit away from optimum
  Rng rng(80);
  std::size_t w = 8;
  auto samples = linear_samples(40, w, rng);
  ModelConfig cfg;
  cfg.window_width = w;
  cfg.dropout_rate = 0.0;
  cfg.seed = 8;
  auto model = build_baseline("ann", cfg, Rng(cfg.seed));
  TrainConfig tc;
  tc.batch_size = 40;
  tc.max_epochs = 100;
  tc.patience = 15;
  tc.seed = 8;
  AdamState adam;
  adam.lr = 0.0;  // parameters frozen except weight decay
  adam.weight_decay = 10.0;
  StandardizationStats stats = unit_stats();
  SplitIndex idx = split(samples.size(), 8);
  TrainResult r = train(*model, samples, idx, tc, adam, stats);
  // lr = 0 makes every update a no-op, so val is flat: best stays at epoch 1
  CHECK(r.best_epoch == 1);
  CHECK(r.epochs.size() == 1 + tc.patience);
}

TEST_CASE("bench_inference: per-sample = total / N and pure predictions") {
  Rng rng(81);
  auto samples = linear_samples(10, 8, rng);
  ModelConfig cfg;
  cfg.window_width = 8;
  cfg.width_multiplier = 0.05;
  cfg.heads = 2;
  cfg.seed = 9;
  MenglanModel model(cfg, Rng(cfg.seed));
  StandardizationStats stats = unit_stats();
  BenchResult br = bench_inference(model, samples, stats, 3);
  CHECK(br.report.count == 10);
  CHECK(br.report.per_sample_seconds ==
        doctest::Approx(br.report.total_seconds / 10.0).epsilon(1e-12));
  CHECK(br.run_totals.size() == 3);
}
