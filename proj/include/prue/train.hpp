#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "prue/dataset.hpp"
#include "prue/errors.hpp"
#include "prue/model.hpp"
#include "prue/rng.hpp"
#include "prue/tensor.hpp"

namespace prue {

// ---------------------------------------------------------------------------
// Targets
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> one_hot_targets(const std::vector<int>& labels, std::size_t num_classes) {
    std::vector<T> v(labels.size() * num_classes, T(0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        std::size_t y = static_cast<std::size_t>(labels[i]);
        if (labels[i] < 0 || y >= num_classes) {
            throw ConfigError("one_hot: label " + std::to_string(labels[i]) + " out of range [0," +
                              std::to_string(num_classes) + ")");
        }
        v[i * num_classes + y] = T(1);
    }
    return Tensor<T>::from_vector({labels.size(), num_classes}, std::move(v));
}

// Soft rows with 1-alpha on the true class and alpha/(K-1) elsewhere.
template <class T>
Tensor<T> smooth_labels(const std::vector<int>& labels, std::size_t num_classes, double alpha) {
    if (num_classes < 2) {
        throw ConfigError("smooth_labels: need K >= 2, got " + std::to_string(num_classes));
    }
    if (alpha < 0.0 || alpha > 1.0) {
        throw ConfigError("smooth_labels: alpha must lie in [0,1], got " + std::to_string(alpha));
    }
    T off = static_cast<T>(alpha / static_cast<double>(num_classes - 1));
    T on = static_cast<T>(1.0 - alpha);
    std::vector<T> v(labels.size() * num_classes, off);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        std::size_t y = static_cast<std::size_t>(labels[i]);
        if (labels[i] < 0 || y >= num_classes) {
            throw ConfigError("smooth_labels: label " + std::to_string(labels[i]) + " out of range [0," +
                              std::to_string(num_classes) + ")");
        }
        v[i * num_classes + y] = on;
    }
    return Tensor<T>::from_vector({labels.size(), num_classes}, std::move(v));
}

// ---------------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------------

// Mean over the batch of -sum_c t_c * log softmax(logits)_c. Target rows
// must sum to 1 within 1e-6.
template <class T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const Tensor<T>& targets) {
    const Shape& sl = logits.shape();
    if (sl.size() != 2 || targets.shape() != sl) {
        throw ShapeError("cross_entropy: logits " + shape_to_string(sl) + " vs targets " +
                         shape_to_string(targets.shape()));
    }
    std::size_t batch = sl[0], k = sl[1];
    const auto& tv = targets.values();
    for (std::size_t r = 0; r < batch; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < k; ++j) s += static_cast<double>(tv[r * k + j]);
        if (std::abs(s - 1.0) > 1e-6) {
            throw ConfigError("cross_entropy: target row " + std::to_string(r) + " sums to " +
                              std::to_string(s) + ", expected 1");
        }
    }
    auto lp = log_softmax(logits);
    return scale(sum(mul(targets, lp)), static_cast<T>(-1.0 / static_cast<double>(batch)));
}

template <class T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<int>& labels) {
    return cross_entropy_loss(logits, one_hot_targets<T>(labels, logits.shape().at(1)));
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct LrDrop {
    std::size_t epoch = 0;
    double factor = 0.1;
};

struct OptimizerConfig {
    double lr = 0.1;
    double momentum = 0.9;
    bool nesterov = true;
    std::vector<LrDrop> schedule;

    void validate() const {
        if (!(lr > 0)) throw ConfigError("optimizer: lr must be > 0");
        if (momentum < 0) throw ConfigError("optimizer: momentum must be >= 0");
        for (const auto& d : schedule) {
            if (!(d.factor > 0)) throw ConfigError("optimizer: schedule factors must be > 0");
        }
    }
};

// Initial lr times the product of factors whose trigger epoch has been
// reached; the boundary epoch itself already uses the dropped rate.
inline double lr_at(const OptimizerConfig& cfg, std::size_t epoch) {
    double lr = cfg.lr;
    for (const auto& d : cfg.schedule) {
        if (d.epoch <= epoch) lr *= d.factor;
    }
    return lr;
}

// SGD with optional Nesterov momentum:
//   v <- mu*v + g;  update = nesterov ? g + mu*v : v;  w <- w - lr*update
template <class T>
class Sgd {
  public:
    Sgd(const Model<T>& model, OptimizerConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        for (const auto& p : model.params()) velocity_.emplace_back(p.value.size(), T(0));
    }

    void step(Model<T>& model, double lr) {
        auto& params = model.params();
        if (params.size() != velocity_.size()) {
            throw ShapeError("sgd: optimizer built for a different model");
        }
        T mu = static_cast<T>(cfg_.momentum);
        T eta = static_cast<T>(lr);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto g = params[i].value.grad();
            auto& v = velocity_[i];
            if (g.size() != v.size()) {
                throw ShapeError("sgd: gradient length " + std::to_string(g.size()) +
                                 " does not match parameter " + params[i].name);
            }
            auto& w = params[i].value.values_mut();
            for (std::size_t j = 0; j < v.size(); ++j) {
                v[j] = mu * v[j] + g[j];
                T update = cfg_.nesterov ? g[j] + mu * v[j] : v[j];
                w[j] -= eta * update;
            }
        }
    }

    const std::vector<std::vector<T>>& velocity() const { return velocity_; }

  private:
    OptimizerConfig cfg_;
    std::vector<std::vector<T>> velocity_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

template <class T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw ShapeError("argmax_rows: expected [B,K], got " + shape_to_string(s));
    std::vector<std::size_t> out(s[0]);
    const auto& v = logits.values();
    for (std::size_t r = 0; r < s[0]; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < s[1]; ++j) {
            // Ties break toward the lowest class index.
            if (v[r * s[1] + j] > v[r * s[1] + best]) best = j;
        }
        out[r] = best;
    }
    return out;
}

struct EvalResult {
    double accuracy = 0;
    double mean_loss = 0;
};

template <class T>
EvalResult evaluate(const Model<T>& model, const Dataset<T>& ds, std::size_t batchsize = 256) {
    if (ds.size() == 0) throw ConfigError("evaluate: empty dataset");
    NoGradGuard ng;
    std::size_t correct = 0;
    double loss_sum = 0;
    for (std::size_t start = 0; start < ds.size(); start += batchsize) {
        std::size_t end = std::min(ds.size(), start + batchsize);
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        auto batch = make_batch(ds, idx);
        auto logits = model.forward(batch.x);
        auto pred = argmax_rows(logits);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (static_cast<int>(pred[i]) == batch.labels[i]) ++correct;
        }
        auto loss = cross_entropy_loss(logits, batch.labels);
        loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
    }
    EvalResult r;
    r.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
    r.mean_loss = loss_sum / static_cast<double>(ds.size());
    return r;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batchsize = 64;
    OptimizerConfig optimizer;
    double smoothing_alpha = 0.0;  // 0 disables smoothing
    bool eval_train = true;        // per-epoch accuracy pass over the train split
};

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double train_accuracy = 0;  // -1 when eval_train is off
    double val_accuracy = 0;    // -1 when no validation split
};

struct TrainResult {
    std::vector<EpochRecord> epochs;
};

// Supervised training with per-epoch shuffled batches. All randomness comes
// from derive(seed, "shuffle"). Deterministic in (model, data, config, seed).
template <class T>
TrainResult train(Model<T>& model, const Dataset<T>& train_ds, const Dataset<T>* val_ds,
                  const TrainConfig& cfg, std::uint64_t seed) {
    if (train_ds.size() == 0) throw ConfigError("train: empty dataset");
    if (cfg.smoothing_alpha < 0 || cfg.smoothing_alpha > 1) {
        throw ConfigError("train: smoothing alpha must lie in [0,1]");
    }
    model.set_weights_requires_grad(true);
    model.set_masks_requires_grad(false);
    model.zero_all_grads();
    Sgd<T> sgd(model, cfg.optimizer);
    Rng shuffle_rng = derive(seed, "shuffle");
    TrainResult result;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = lr_at(cfg.optimizer, epoch);
        auto plan = batch_plan(train_ds, cfg.batchsize, IterOrder::shuffled, &shuffle_rng);
        double loss_sum = 0;
        for (const auto& idx : plan) {
            auto batch = make_batch(train_ds, idx);
            Tensor<T> targets = cfg.smoothing_alpha > 0
                                    ? smooth_labels<T>(batch.labels, train_ds.num_classes,
                                                       cfg.smoothing_alpha)
                                    : one_hot_targets<T>(batch.labels, train_ds.num_classes);
            auto logits = model.forward(batch.x);
            auto loss = cross_entropy_loss(logits, targets);
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
            backward(loss);
            sgd.step(model, lr);
            model.zero_all_grads();
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.train_loss = loss_sum / static_cast<double>(train_ds.size());
        rec.train_accuracy = cfg.eval_train ? evaluate(model, train_ds).accuracy : -1.0;
        rec.val_accuracy = val_ds ? evaluate(model, *val_ds).accuracy : -1.0;
        result.epochs.push_back(rec);
    }
    return result;
}

}  // namespace prue
