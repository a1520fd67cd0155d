#pragma once

// Training loop (Adam with decoupled weight decay, MSE loss, early
// stopping on validation MSE), evaluation metrics, and single-sample
// inference benchmarking.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <vector>

#include "menglan/data.hpp"
#include "menglan/model.hpp"

namespace menglan {

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// (1/N) sum (y - yhat)^2, differentiable w.r.t. yhat.
inline Tensor mse_loss(const Tensor& y, const Tensor& yhat) {
  if (y.shape() != yhat.shape() || y.size() < 1)
    throw DimensionError("mse_loss: shapes " + shape_str(y.shape()) + " vs " +
                         shape_str(yhat.shape()));
  Tensor diff = sub(y, yhat);
  return mean(mul(diff, diff));
}

struct MetricsReport {
  double rmse = 0.0;
  double mse = 0.0;
  double mae = 0.0;
  double r2 = 0.0;
  bool r2_defined = true;  // false when y is constant
  double total_seconds = 0.0;
  double per_sample_seconds = 0.0;
  std::size_t count = 0;
};

inline MetricsReport metrics(const std::vector<double>& y, const std::vector<double>& yhat,
                             double total_seconds = 0.0) {
  if (y.size() != yhat.size() || y.empty())
    throw ContractError("metrics: length mismatch or empty input");
  MetricsReport r;
  r.count = y.size();
  const double n = static_cast<double>(y.size());
  double ybar = 0.0;
  for (double v : y) ybar += v;
  ybar /= n;
  double ss_res = 0.0, ss_tot = 0.0, abs_sum = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    double d = y[i] - yhat[i];
    ss_res += d * d;
    abs_sum += std::abs(d);
    double t = y[i] - ybar;
    ss_tot += t * t;
  }
  r.mse = ss_res / n;
  r.rmse = std::sqrt(r.mse);
  r.mae = abs_sum / n;
  if (ss_tot == 0.0) {
    r.r2 = std::numeric_limits<double>::quiet_NaN();
    r.r2_defined = false;
  } else {
    r.r2 = 1.0 - ss_res / ss_tot;
  }
  r.total_seconds = total_seconds;
  r.per_sample_seconds = total_seconds / n;
  return r;
}

// ---- Adam ---------------------------------------------------------------------

struct AdamState {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.08;  // decoupled
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;  // per-parameter moments

  void bind(std::vector<Tensor>& params) {
    m.clear();
    v.clear();
    for (auto& p : params) {
      m.emplace_back(p.size(), 0.0);
      v.emplace_back(p.size(), 0.0);
    }
  }
};

/// Bias-corrected Adam step with decoupled weight decay
/// (param -= lr * wd * param alongside the moment update).
inline void adam_step(AdamState& s, std::vector<Tensor>& params) {
  if (s.m.size() != params.size()) s.bind(params);
  ++s.t;
  double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    const auto& g = p.mut_grad();  // zero-filled if the parameter was unused
    auto& mv = s.m[pi];
    auto& vv = s.v[pi];
    auto& w = p.mut_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw DivergenceError("non-finite gradient at parameter block " + std::to_string(pi) +
                              " index " + std::to_string(i) + ", step " + std::to_string(s.t));
      mv[i] = s.beta1 * mv[i] + (1.0 - s.beta1) * g[i];
      vv[i] = s.beta2 * vv[i] + (1.0 - s.beta2) * g[i] * g[i];
      double mhat = mv[i] / bc1;
      double vhat = vv[i] / bc2;
      w[i] -= s.lr * (mhat / (std::sqrt(vhat) + s.eps) + s.weight_decay * w[i]);
    }
  }
}

// ---- training loop --------------------------------------------------------------

struct TrainConfig {
  std::size_t batch_size = 512;
  std::size_t max_epochs = 200;
  std::size_t patience = 15;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size >= 1 required");
    if (patience < 1) throw ConfigError("patience >= 1 required");
  }
};

struct EpochRow {
  std::size_t epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<std::vector<double>> best_params;  // snapshot of every tensor
  double best_val_mse = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::vector<EpochRow> epochs;
  bool diverged = false;
};

inline std::vector<double> eval_predictions(RegressionModel& model,
                                            const std::vector<SampleWindow>& samples,
                                            const std::vector<std::size_t>& ids,
                                            const StandardizationStats& stats,
                                            std::size_t batch_size = 256) {
  Rng unused(0);
  std::vector<double> preds;
  preds.reserve(ids.size());
  for (std::size_t off = 0; off < ids.size(); off += batch_size) {
    std::vector<std::size_t> chunk(ids.begin() + off,
                                   ids.begin() + std::min(ids.size(), off + batch_size));
    Tensor x = batch_tensor(samples, chunk, stats);
    Tensor yhat = model.forward(x, Mode::inference, unused);
    for (std::size_t i = 0; i < chunk.size(); ++i) preds.push_back(yhat[i]);
  }
  return preds;
}

inline double eval_mse(RegressionModel& model, const std::vector<SampleWindow>& samples,
                       const std::vector<std::size_t>& ids, const StandardizationStats& stats) {
  std::vector<double> preds = eval_predictions(model, samples, ids, stats);
  double acc = 0.0;
  const std::string& sel = model.config().target;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    double d = samples[ids[i]].target(sel) - preds[i];
    acc += d * d;
  }
  return acc / static_cast<double>(ids.size());
}

inline void snapshot_params(RegressionModel& model, std::vector<std::vector<double>>& out) {
  out.clear();
  for (auto& t : model.parameters()) out.push_back(t.data());
}

inline void restore_params(RegressionModel& model, const std::vector<std::vector<double>>& snap) {
  auto params = model.parameters();
  if (snap.size() != params.size()) throw ContractError("restore_params: snapshot mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) params[i].mut_data() = snap[i];
}

/// Seeded-shuffled minibatch epochs with early stopping on validation MSE.
/// On divergence the last finite snapshot is kept and the result is flagged.
inline TrainResult train(RegressionModel& model, const std::vector<SampleWindow>& samples,
                         const SplitIndex& split_idx, const TrainConfig& tc, AdamState& adam,
                         const StandardizationStats& stats) {
  tc.validate();
  if (split_idx.train.empty() || split_idx.val.empty())
    throw ContractError("train: empty train or validation split");
  auto trainable = model.trainable();
  adam.bind(trainable);
  Rng shuffle_rng = Rng(tc.seed).fork("epoch-shuffle");
  Rng dropout_rng = Rng(tc.seed).fork("dropout");

  TrainResult res;
  snapshot_params(model, res.best_params);
  std::size_t since_best = 0;
  const std::string& sel = model.config().target;

  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order = split_idx.train;
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::size_t j = shuffle_rng.next_u64() % (i + 1);
      std::swap(order[i], order[j]);
    }
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t off = 0; off < order.size(); off += tc.batch_size) {
      std::vector<std::size_t> chunk(order.begin() + off,
                                     order.begin() + std::min(order.size(), off + tc.batch_size));
      if (chunk.size() < 2 && model.kind() == "menglan") continue;  // BN needs a batch
      Tensor x = batch_tensor(samples, chunk, stats);
      Tensor y = target_tensor(samples, chunk, sel);
      Tensor yhat = model.forward(x, Mode::train, dropout_rng);
      Tensor loss = mse_loss(y, yhat);
      double lv = loss[0];
      if (!std::isfinite(lv)) {
        restore_params(model, res.best_params);
        res.diverged = true;
        return res;
      }
      epoch_loss += lv;
      ++batches;
      for (auto& p : trainable) p.zero_grad();
      loss.backward();
      adam_step(adam, trainable);
    }
    double val = eval_mse(model, samples, split_idx.val, stats);
    auto t1 = std::chrono::steady_clock::now();
    EpochRow row;
    row.epoch = epoch;
    row.train_mse = batches ? epoch_loss / static_cast<double>(batches) : 0.0;
    row.val_mse = val;
    row.seconds = std::chrono::duration<double>(t1 - t0).count();
    res.epochs.push_back(row);

    if (!std::isfinite(val)) {
      restore_params(model, res.best_params);
      res.diverged = true;
      return res;
    }
    if (val < res.best_val_mse) {
      res.best_val_mse = val;
      res.best_epoch = epoch;
      snapshot_params(model, res.best_params);
      since_best = 0;
    } else if (++since_best >= tc.patience) {
      break;
    }
  }
  restore_params(model, res.best_params);
  return res;
}

// ---- inference benchmark ---------------------------------------------------------

struct BenchResult {
  MetricsReport report;           // metrics + median timing over repeats
  std::vector<double> run_totals; // total seconds per repeat
};

/// Batch-size-1 wall-clock benchmark (the deployment regime); repeated
/// `repeats` times, median total reported. Predictions must be identical
/// across repeats (inference is pure).
inline BenchResult bench_inference(RegressionModel& model,
                                   const std::vector<SampleWindow>& samples,
                                   const StandardizationStats& stats, std::size_t repeats = 3) {
  if (samples.empty()) throw ContractError("bench_inference: no samples");
  std::vector<std::size_t> ids(samples.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  const std::string& sel = model.config().target;
  Rng unused(0);

  BenchResult br;
  std::vector<double> first_preds;
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    std::vector<double> preds;
    preds.reserve(samples.size());
    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t id : ids) {
      Tensor x = batch_tensor(samples, {id}, stats);
      preds.push_back(model.forward(x, Mode::inference, unused)[0]);
    }
    auto t1 = std::chrono::steady_clock::now();
    br.run_totals.push_back(std::chrono::duration<double>(t1 - t0).count());
    if (rep == 0) first_preds = preds;
    else if (preds != first_preds)
      throw ContractError("bench_inference: predictions changed across repeats");
  }
  std::vector<double> sorted = br.run_totals;
  std::sort(sorted.begin(), sorted.end());
  double median = sorted[sorted.size() / 2];
  std::vector<double> y(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) y[i] = samples[i].target(sel);
  br.report = metrics(y, first_preds, median);
  return br;
}

}  // namespace menglan
