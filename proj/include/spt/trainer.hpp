// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "spt/model.hpp"
#include "spt/random.hpp"
#include "spt/seqdata.hpp"

namespace spt {

enum class Padding {
  none,       // every sequence runs at its own length
  pad_batch,  // pad to the longest sequence of a length-bucketed batch with
              // zero rows that take part in attention
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t warmup_epochs = 5;
  double base_lr = 1e-3;
  double min_lr = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.05;
  double layer_decay = 0.75;
  double label_smoothing = 0.1;
  double drop_path = 0.1;
  std::size_t batch_size = 32;
  std::uint64_t rng_seed = 0;
  Padding padding = Padding::none;
  std::size_t workers = 1;  // evaluation only

  void validate() const {
    if (epochs == 0) throw std::invalid_argument("TrainConfig: epochs must be positive");
    if (warmup_epochs >= epochs) throw std::invalid_argument("TrainConfig: warmup_epochs must be < epochs");
    if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (!(base_lr > 0.0) || min_lr < 0.0 || min_lr > base_lr) {
      throw std::invalid_argument("TrainConfig: need 0 <= min_lr <= base_lr and base_lr > 0");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0)) {
      throw std::invalid_argument("TrainConfig: betas must be in [0, 1) and eps positive");
    }
    if (weight_decay < 0.0 || !(layer_decay > 0.0 && layer_decay <= 1.0)) {
      throw std::invalid_argument("TrainConfig: weight_decay >= 0 and layer_decay in (0, 1]");
    }
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0) || !(drop_path >= 0.0 && drop_path < 1.0)) {
      throw std::invalid_argument("TrainConfig: label_smoothing and drop_path must be in [0, 1)");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"warmup_epochs", c.warmup_epochs},
                     {"base_lr", c.base_lr},
                     {"min_lr", c.min_lr},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"weight_decay", c.weight_decay},
                     {"layer_decay", c.layer_decay},
                     {"label_smoothing", c.label_smoothing},
                     {"drop_path", c.drop_path},
                     {"batch_size", c.batch_size},
                     {"rng_seed", c.rng_seed},
                     {"padding", c.padding == Padding::none ? "none" : "pad_batch"}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
  c.base_lr = j.value("base_lr", d.base_lr);
  c.min_lr = j.value("min_lr", d.min_lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.layer_decay = j.value("layer_decay", d.layer_decay);
  c.label_smoothing = j.value("label_smoothing", d.label_smoothing);
  c.drop_path = j.value("drop_path", d.drop_path);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.rng_seed = j.value("rng_seed", d.rng_seed);
  c.padding = j.value("padding", std::string("none")) == "pad_batch" ? Padding::pad_batch : Padding::none;
}

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

/// Linear warmup from 0 to base_lr, then cosine decay to min_lr.
inline double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                    const TrainConfig& cfg) {
  if (warmup_steps >= total_steps) {
    throw std::invalid_argument("lr_at: warmup_steps must be smaller than total_steps");
  }
  if (step >= total_steps) throw std::out_of_range("lr_at: step beyond schedule");
  if (step < warmup_steps) return cfg.base_lr * double(step) / double(warmup_steps);
  const double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Head (and final norm): 1. Block l of L: decay^(L+1-l). Embedding: decay^(L+1).
inline double layer_lr_scale(ParamGroup group, std::size_t block, std::size_t layers, double decay) {
  switch (group) {
    case ParamGroup::head:
      return 1.0;
    case ParamGroup::block:
      if (block < 1 || block > layers) throw std::out_of_range("layer_lr_scale: block out of range");
      return std::pow(decay, double(layers + 1 - block));
    case ParamGroup::embedding:
      return std::pow(decay, double(layers + 1));
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

template <class T>
struct OptimizerState {
  std::vector<Matrix<T>> m, v;
  std::size_t t = 0;
};

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// One decoupled-decay Adam update of a single tensor at step t (1-based):
/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
template <class T>
void adamw_update(Matrix<T>& theta, const Matrix<T>& grad, Matrix<T>& m, Matrix<T>& v,
                  std::size_t t, const AdamWHyper& h) {
  const T b1 = T(h.beta1), b2 = T(h.beta2);
  m = b1 * m + (T(1) - b1) * grad;
  v = b2 * v + (T(1) - b2) * grad.cwiseProduct(grad);
  const T c1 = T(1) - T(std::pow(h.beta1, double(t)));
  const T c2 = T(1) - T(std::pow(h.beta2, double(t)));
  const T lr = T(h.lr), wd = T(h.weight_decay), eps = T(h.eps);
  theta.array() -= lr * ((m.array() / c1) / ((v.array() / c2).sqrt() + eps) + wd * theta.array());
}

template <class T>
OptimizerState<T> make_optimizer_state(const SPTModel<T>& model) {
  OptimizerState<T> st;
  model.for_each_parameter([&](const ParamInfo&, const Matrix<T>& w) {
    st.m.push_back(Matrix<T>::Zero(w.rows(), w.cols()));
    st.v.push_back(Matrix<T>::Zero(w.rows(), w.cols()));
  });
  return st;
}

/// Applies one AdamW step to every parameter with layer-wise learning-rate
/// scaling. Biases, norm parameters, CLS and the positional table are
/// excluded from weight decay.
template <class T>
void adamw_step(SPTModel<T>& model, const std::vector<Matrix<T>>& grads, OptimizerState<T>& state,
                double lr, const TrainConfig& cfg) {
  if (state.m.empty()) state = make_optimizer_state(model);
  if (grads.size() != state.m.size()) throw std::invalid_argument("adamw_step: gradient count mismatch");
  std::size_t i = 0;
  model.for_each_parameter([&](const ParamInfo& info, Matrix<T>& w) {
    if (grads[i].rows() != w.rows() || grads[i].cols() != w.cols()) {
      throw ShapeError("adamw_step: gradient shape mismatch for " + info.name);
    }
    if (!grads[i].allFinite()) {
      throw TrainingError("adamw_step: non-finite gradient in " + info.name + " at step " +
                          std::to_string(state.t + 1));
    }
    ++i;
  });
  ++state.t;
  i = 0;
  const std::size_t layers = model.config.layers;
  model.for_each_parameter([&](const ParamInfo& info, Matrix<T>& w) {
    AdamWHyper h;
    h.lr = lr * layer_lr_scale(info.group, info.block, layers, cfg.layer_decay);
    h.beta1 = cfg.beta1;
    h.beta2 = cfg.beta2;
    h.eps = cfg.adam_eps;
    h.weight_decay = info.weight_decay ? cfg.weight_decay : 0.0;
    adamw_update(w, grads[i], state.m[i], state.v[i], state.t, h);
    ++i;
  });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Label-smoothing targets q_k = eps/C + (1-eps) [k == label].
template <class T>
Matrix<T> smoothed_targets(std::size_t num_classes, std::size_t label, double eps) {
  if (label >= num_classes) throw std::out_of_range("smoothed_targets: label out of range");
  Matrix<T> q = Matrix<T>::Constant(1, static_cast<Index>(num_classes), T(eps / double(num_classes)));
  q(0, static_cast<Index>(label)) += T(1.0 - eps);
  return q;
}

/// -sum_k q_k log softmax(logits)_k on the tape.
template <class T>
Var smoothed_cross_entropy(Graph<T>& g, Var logits, std::size_t label, double eps) {
  const auto C = static_cast<std::size_t>(g.value(logits).cols());
  return g.scale(g.dot_const(g.log_softmax_rows(logits), smoothed_targets<T>(C, label, eps)), T(-1));
}

template <class T>
double smoothed_cross_entropy(const RowVector<T>& logits, std::size_t label, double eps) {
  Graph<T> g;
  const Var l = g.constant(logits);
  return static_cast<double>(g.value(smoothed_cross_entropy(g, l, label, eps))(0, 0));
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double error_rate = 0.0;
  std::vector<double> per_class_accuracy;  // NaN for classes without records
  std::vector<std::size_t> predictions;
};

/// Runs `fn(i)` for i in [0, n) over `workers` threads with contiguous chunks.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w * chunk; i < std::min(n, (w + 1) * chunk); ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

template <class T>
std::vector<std::size_t> predict_all(const SPTModel<T>& model, const Dataset& ds, std::size_t workers = 1) {
  std::vector<std::size_t> preds(ds.size());
  parallel_for(ds.size(), workers, [&](std::size_t i) {
    preds[i] = predict(model, one_hot_encode<T>(ds.records[i].sequence));
  });
  return preds;
}

inline EvalResult score_predictions(const Dataset& ds, std::vector<std::size_t> preds) {
  EvalResult r;
  const std::size_t C = ds.num_classes();
  std::vector<std::size_t> total(C, 0), correct(C, 0);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t y = ds.records[i].label;
    ++total[y];
    if (preds[i] == y) {
      ++correct[y];
    } else {
      ++wrong;
    }
  }
  r.error_rate = ds.size() == 0 ? 0.0 : double(wrong) / double(ds.size());
  for (std::size_t c = 0; c < C; ++c) {
    r.per_class_accuracy.push_back(total[c] == 0 ? std::nan("") : double(correct[c]) / double(total[c]));
  }
  r.predictions = std::move(preds);
  return r;
}

/// Top-1 error and per-class accuracy.
template <class T>
EvalResult evaluate(const SPTModel<T>& model, const Dataset& ds, std::size_t workers = 1) {
  return score_predictions(ds, predict_all(model, ds, workers));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_err = 0.0;
  double val_err = std::nan("");
  double lr = 0.0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

namespace detail {

inline std::vector<std::vector<std::size_t>> make_batches(const Dataset& ds, const TrainConfig& cfg,
                                                          std::size_t epoch) {
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(cfg.rng_seed, "train.shuffle", epoch));
  std::shuffle(order.begin(), order.end(), rng);
  if (cfg.padding == Padding::pad_batch) {
    // Sort windows of several batches by length so padding stays small.
    const std::size_t window = cfg.batch_size * 8;
    for (std::size_t at = 0; at < order.size(); at += window) {
      const auto end = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), at + window));
      std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(at), end, [&](std::size_t a, std::size_t b) {
        return ds.records[a].length() < ds.records[b].length();
      });
    }
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), at + cfg.batch_size)));
  }
  if (cfg.padding == Padding::pad_batch) std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

}  // namespace detail

/// Supervised training with AdamW, warmup + cosine schedule, layer-wise LR
/// decay, label smoothing and drop path. Deterministic for a fixed seed.
template <class T>
std::vector<EpochMetrics> train(SPTModel<T>& model, const Dataset& train_ds, const Dataset* val_ds,
                                const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  validate(train_ds);
  if (train_ds.num_classes() != model.config.num_classes) {
    throw std::invalid_argument("train: dataset has " + std::to_string(train_ds.num_classes()) +
                                " classes but the model has " + std::to_string(model.config.num_classes));
  }
  for (const auto& r : train_ds.records) {
    if (r.length() > model.config.max_len) {
      throw std::length_error("train: record '" + r.id + "' longer than max_len");
    }
  }

  const std::size_t steps_per_epoch = (train_ds.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  const std::size_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;

  OptimizerState<T> state = make_optimizer_state(model);
  std::vector<Matrix<T>> grads = state.m;
  std::vector<EpochMetrics> history;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t wrong = 0;
    double lr = 0.0;
    const auto batches = detail::make_batches(train_ds, cfg, epoch);
    for (const auto& batch : batches) {
      for (auto& gm : grads) gm.setZero();
      Index pad_to = 0;
      if (cfg.padding == Padding::pad_batch) {
        for (std::size_t i : batch) pad_to = std::max<Index>(pad_to, static_cast<Index>(train_ds.records[i].length()));
      }
      double batch_loss = 0.0;
      const T inv_b = T(1) / static_cast<T>(batch.size());
      for (std::size_t idx : batch) {
        const auto& rec = train_ds.records[idx];
        Matrix<T> x = one_hot_encode<T>(rec.sequence).matrix;
        if (pad_to > x.rows()) {
          x.conservativeResizeLike(Matrix<T>::Zero(pad_to, x.cols()));
        }
        Graph<T> g;
        ForwardOptions opt;
        opt.training = true;
        opt.drop_path_rate = cfg.drop_path;
        opt.drop_path_seed = derive_seed(cfg.rng_seed, "train.drop_path", step, idx);
        opt.params_require_grad = true;
        const ForwardPass pass = forward(g, model, x, opt);
        const Var loss = smoothed_cross_entropy(g, pass.logits, rec.label, cfg.label_smoothing);
        const double lv = static_cast<double>(g.value(loss)(0, 0));
        if (!std::isfinite(lv)) {
          throw TrainingError("train: non-finite loss at step " + std::to_string(step));
        }
        batch_loss += lv;
        if (argmax(g.value(pass.logits).row(0)) != rec.label) ++wrong;
        g.backward(g.scale(loss, inv_b));
        std::size_t i = 0;
        for_each_param(pass.params, [&](const ParamInfo&, const Var& v) { grads[i++] += g.grad(v); });
      }
      lr = lr_at(step, total_steps, warmup_steps, cfg);
      try {
        adamw_step(model, grads, state, lr, cfg);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " (global step " + std::to_string(step) + ")");
      }
      loss_sum += batch_loss / double(batch.size());
      ++step;
    }
    EpochMetrics em;
    em.epoch = epoch + 1;
    em.train_loss = loss_sum / double(batches.size());
    em.train_err = double(wrong) / double(train_ds.size());
    em.lr = lr;
    if (val_ds != nullptr) em.val_err = evaluate(model, *val_ds, cfg.workers).error_rate;
    history.push_back(em);
    if (on_epoch) on_epoch(em);
  }
  return history;
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

inline std::string format_metric(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_metrics_csv(const std::vector<EpochMetrics>& history, std::ostream& out) {
  out << "epoch,train_loss,train_err,val_err,lr\n";
  for (const auto& m : history) {
    out << m.epoch << ',' << format_metric(m.train_loss) << ',' << format_metric(m.train_err) << ','
        << format_metric(m.val_err) << ',' << format_metric(m.lr) << '\n';
  }
}

}  // namespace spt
