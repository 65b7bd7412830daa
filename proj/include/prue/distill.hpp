#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prue/dataset.hpp"
#include "prue/errors.hpp"
#include "prue/model.hpp"
#include "prue/tensor.hpp"
#include "prue/train.hpp"

namespace prue {

namespace detail {

template <class T>
void log_softmax_rows(const T* in, T* out, std::size_t rows, std::size_t k) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = &in[r * k];
        T* y = &out[r * k];
        T mx = x[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
        T sum_exp = T(0);
        for (std::size_t j = 0; j < k; ++j) sum_exp += std::exp(x[j] - mx);
        T lse = mx + std::log(sum_exp);
        for (std::size_t j = 0; j < k; ++j) y[j] = x[j] - lse;
    }
}

}  // namespace detail

// tau^2 * mean_b KL( softmax(t/tau) || softmax(s/tau) ). The teacher branch
// is detached; only the student side carries gradient.
//
// Fused op rather than a composition of softmax/log/sum: the analytic
// gradient w.r.t. the scaled student logits is (q - p), which vanishes
// bitwise when the student reproduces the teacher's logits exactly. The
// composed pullback would instead leave p*(sum(p)-1) of round-off behind,
// because softmax rows only sum to 1 up to float rounding, and that noise
// is enough to walk a perfect mimic away from the fixed point.
template <class T>
Tensor<T> kd_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits, double tau) {
    if (!(tau > 0)) throw ConfigError("kd_loss: temperature must be > 0, got " + std::to_string(tau));
    const Shape& st = teacher_logits.shape();
    if (st.size() != 2 || student_logits.shape() != st) {
        throw ShapeError("kd_loss: teacher " + shape_to_string(st) + " vs student " +
                         shape_to_string(student_logits.shape()));
    }
    const std::size_t rows = st[0];
    const std::size_t k = st[1];
    const T inv_tau = static_cast<T>(1.0 / tau);
    const T factor = static_cast<T>(tau * tau / static_cast<double>(rows));

    std::vector<T> zt(rows * k), zs(rows * k);
    const auto& tv = teacher_logits.values();
    const auto& sv = student_logits.values();
    for (std::size_t i = 0; i < zt.size(); ++i) zt[i] = tv[i] * inv_tau;
    for (std::size_t i = 0; i < zs.size(); ++i) zs[i] = sv[i] * inv_tau;

    std::vector<T> lp(rows * k), lq(rows * k), p(rows * k);
    detail::log_softmax_rows(zt.data(), lp.data(), rows, k);
    detail::log_softmax_rows(zs.data(), lq.data(), rows, k);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(lp[i]);

    T total = T(0);
    for (std::size_t i = 0; i < p.size(); ++i) total += p[i] * (lp[i] - lq[i]);
    std::vector<T> out{factor * total};

    auto sn = student_logits.node();
    const T chain = factor * inv_tau;  // d loss / d student_logits = chain * (q - p)
    return detail::make_result<T>(
        "kd_loss", Shape{}, std::move(out), {sn},
        [sn, p = std::move(p), lq = std::move(lq), chain](const std::vector<T>& g) {
            if (!sn->requires_grad) return;
            sn->ensure_grad();
            const T c = g[0] * chain;
            for (std::size_t i = 0; i < p.size(); ++i) {
                sn->grad[i] += c * (std::exp(lq[i]) - p[i]);
            }
        });
}

// (1-lambda) * cross-entropy on ground truth + lambda * kd_loss.
template <class T>
Tensor<T> student_loss(const Tensor<T>& student_logits, const std::vector<int>& labels,
                       const Tensor<T>& teacher_logits, double tau, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) {
        throw ConfigError("student_loss: lambda must lie in [0,1], got " + std::to_string(lambda));
    }
    if (lambda == 0.0) return cross_entropy_loss(student_logits, labels);
    if (lambda == 1.0) return kd_loss(teacher_logits, student_logits, tau);
    auto ce = cross_entropy_loss(student_logits, labels);
    auto kd = kd_loss(teacher_logits, student_logits, tau);
    return add(scale(ce, static_cast<T>(1.0 - lambda)), scale(kd, static_cast<T>(lambda)));
}

// Frozen-teacher logits over a dataset, one row per sample in storage order.
// The checksum records which teacher produced them.
template <class T>
struct TeacherLogits {
    std::uint64_t checksum = 0;
    std::size_t num_classes = 0;
    std::vector<T> rows;  // size * num_classes

    Tensor<T> gather(const std::vector<std::size_t>& indices) const {
        std::vector<T> buf(indices.size() * num_classes);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            std::copy_n(rows.begin() + static_cast<std::ptrdiff_t>(indices[i] * num_classes),
                        num_classes, buf.begin() + static_cast<std::ptrdiff_t>(i * num_classes));
        }
        return Tensor<T>::from_vector({indices.size(), num_classes}, std::move(buf));
    }
};

template <class T>
TeacherLogits<T> cache_teacher_logits(const Model<T>& teacher, const Dataset<T>& ds,
                                      std::size_t batchsize = 256) {
    NoGradGuard ng;
    TeacherLogits<T> cache;
    cache.checksum = teacher.checksum();
    cache.num_classes = ds.num_classes;
    cache.rows.reserve(ds.size() * ds.num_classes);
    for (std::size_t start = 0; start < ds.size(); start += batchsize) {
        std::size_t end = std::min(ds.size(), start + batchsize);
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        auto logits = teacher.forward(make_batch(ds, idx).x);
        const auto& v = logits.values();
        cache.rows.insert(cache.rows.end(), v.begin(), v.end());
    }
    return cache;
}

struct DistillConfig {
    double tau = 1.0;
    double lambda = 1.0;
    TrainConfig train;

    void validate() const {
        if (!(tau > 0)) throw ConfigError("distill: temperature must be > 0");
        if (lambda < 0.0 || lambda > 1.0) throw ConfigError("distill: lambda must lie in [0,1]");
    }
};

struct DistillResult {
    TrainResult epochs;
    double teacher_delta = -1;  // carried along for correlation analysis
    std::uint64_t teacher_checksum = 0;
};

// Trains the student against the frozen teacher. Teacher predictions are
// computed once up front (the teacher never changes). Deterministic in
// (models, data, config, seed).
template <class T>
DistillResult distill(const Model<T>& teacher, Model<T>& student, const Dataset<T>& train_ds,
                      const Dataset<T>* val_ds, const DistillConfig& cfg, std::uint64_t seed,
                      double teacher_delta = -1, const TeacherLogits<T>* cached = nullptr) {
    cfg.validate();
    if (train_ds.size() == 0) throw ConfigError("distill: empty dataset");
    if (teacher.spec().input_shape != train_ds.input_shape ||
        teacher.spec().num_classes != train_ds.num_classes) {
        throw ConfigError("distill: teacher expects input " +
                          shape_to_string(teacher.spec().input_shape) + ", K=" +
                          std::to_string(teacher.spec().num_classes) + "; dataset has " +
                          shape_to_string(train_ds.input_shape) + ", K=" +
                          std::to_string(train_ds.num_classes));
    }
    if (student.spec().input_shape != train_ds.input_shape ||
        student.spec().num_classes != train_ds.num_classes) {
        throw ConfigError("distill: student expects input " +
                          shape_to_string(student.spec().input_shape) + ", K=" +
                          std::to_string(student.spec().num_classes) + "; dataset has " +
                          shape_to_string(train_ds.input_shape) + ", K=" +
                          std::to_string(train_ds.num_classes));
    }

    const std::uint64_t checksum_before = teacher.checksum();
    TeacherLogits<T> local;
    const TeacherLogits<T>* tl = cached;
    if (tl == nullptr) {
        local = cache_teacher_logits(teacher, train_ds, cfg.train.batchsize);
        tl = &local;
    } else if (tl->checksum != checksum_before) {
        throw ConfigError("distill: cached teacher logits carry checksum " +
                          std::to_string(tl->checksum) + " but the teacher hashes to " +
                          std::to_string(checksum_before));
    }

    student.set_weights_requires_grad(true);
    student.set_masks_requires_grad(false);
    student.zero_all_grads();
    Sgd<T> sgd(student, cfg.train.optimizer);
    Rng shuffle_rng = derive(seed, "shuffle");

    DistillResult result;
    result.teacher_delta = teacher_delta;
    for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
        double lr = lr_at(cfg.train.optimizer, epoch);
        auto plan = batch_plan(train_ds, cfg.train.batchsize, IterOrder::shuffled, &shuffle_rng);
        double loss_sum = 0;
        for (const auto& idx : plan) {
            auto batch = make_batch(train_ds, idx);
            auto teacher_rows = tl->gather(idx);
            auto logits = student.forward(batch.x);
            auto loss = student_loss(logits, batch.labels, teacher_rows, cfg.tau, cfg.lambda);
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
            backward(loss);
            sgd.step(student, lr);
            student.zero_all_grads();
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.train_loss = loss_sum / static_cast<double>(train_ds.size());
        rec.train_accuracy = cfg.train.eval_train ? evaluate(student, train_ds).accuracy : -1.0;
        rec.val_accuracy = val_ds ? evaluate(student, *val_ds).accuracy : -1.0;
        result.epochs.epochs.push_back(rec);
    }

    result.teacher_checksum = teacher.checksum();
    if (result.teacher_checksum != checksum_before) {
        throw Error("distill: internal: teacher parameters changed during distillation");
    }
    return result;
}

}  // namespace prue
