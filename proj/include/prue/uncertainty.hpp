#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prue/dataset.hpp"
#include "prue/errors.hpp"
#include "prue/model.hpp"
#include "prue/tensor.hpp"

namespace prue {

// Per-class mean of the own-class probability, computed with gradient
// recording off. Means never carry gradient.
struct ClassMeans {
    std::vector<double> mean;         // one entry per class, in [0,1]
    std::vector<std::size_t> count;   // n_c
};

struct UncertaintyReport {
    double delta = 0;                          // mean intra-class variance
    std::vector<double> per_class_variance;    // one entry per class
    std::vector<std::size_t> class_counts;
    std::vector<std::size_t> singleton_classes;  // classes with one sample: zero variance by fiat
    std::string split;
    std::size_t sample_count = 0;

    double delta_1e2() const { return delta * 100.0; }
};

namespace detail {

// Storage-order sample indices per class. Empty classes are an error: a
// class mean over nothing is undefined.
template <class T>
std::vector<std::vector<std::size_t>> members_by_class(const Dataset<T>& ds) {
    std::vector<std::vector<std::size_t>> groups(ds.num_classes);
    for (std::size_t i = 0; i < ds.labels.size(); ++i) {
        groups[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    }
    std::string empties;
    for (std::size_t c = 0; c < groups.size(); ++c) {
        if (groups[c].empty()) empties += (empties.empty() ? "" : ", ") + std::to_string(c);
    }
    if (!empties.empty()) {
        throw ConfigError("class_means: classes with no samples: " + empties);
    }
    return groups;
}

// Forward values of softmax(logits)[i, c] for the listed samples, evaluated
// in chunks. Values are independent of the chunking because every layer
// treats samples independently.
template <class T>
std::vector<T> own_class_probs(const Model<T>& model, const Dataset<T>& ds,
                               const std::vector<std::size_t>& members, std::size_t c,
                               std::size_t batchsize) {
    NoGradGuard ng;
    std::vector<T> out;
    out.reserve(members.size());
    for (std::size_t start = 0; start < members.size(); start += batchsize) {
        std::size_t end = std::min(members.size(), start + batchsize);
        std::vector<std::size_t> idx(members.begin() + static_cast<std::ptrdiff_t>(start),
                                     members.begin() + static_cast<std::ptrdiff_t>(end));
        auto batch = make_batch(ds, idx);
        auto probs = select_column(softmax(model.forward(batch.x)), c);
        const auto& v = probs.values();
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

}  // namespace detail

// Every batch of the variance pass must hold one class only.
inline void assert_class_pure(const std::vector<int>& labels) {
    for (std::size_t i = 1; i < labels.size(); ++i) {
        if (labels[i] != labels[0]) {
            throw Error("delta_two_pass: internal: batch mixes classes " + std::to_string(labels[0]) +
                        " and " + std::to_string(labels[i]));
        }
    }
}

template <class T>
ClassMeans class_means(const Model<T>& model, const Dataset<T>& ds, std::size_t batchsize = 256) {
    auto groups = detail::members_by_class(ds);
    ClassMeans cm;
    cm.mean.resize(ds.num_classes);
    cm.count.resize(ds.num_classes);
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        auto probs = detail::own_class_probs(model, ds, groups[c], c, batchsize);
        double acc = 0;
        for (T p : probs) acc += static_cast<double>(p);
        cm.mean[c] = acc / static_cast<double>(probs.size());
        cm.count[c] = probs.size();
    }
    return cm;
}

namespace detail {

// Shared tail: population variance per class from own-class probabilities,
// folded in storage order in double precision.
template <class T>
UncertaintyReport report_from_lists(const std::vector<std::vector<T>>& probs, const ClassMeans& cm,
                                    const std::string& split) {
    UncertaintyReport rep;
    rep.split = split;
    rep.per_class_variance.resize(probs.size());
    rep.class_counts.resize(probs.size());
    double total = 0;
    for (std::size_t c = 0; c < probs.size(); ++c) {
        double acc = 0;
        for (T p : probs[c]) {
            double d = static_cast<double>(p) - cm.mean[c];
            acc += d * d;
        }
        rep.per_class_variance[c] = acc / static_cast<double>(probs[c].size());
        rep.class_counts[c] = probs[c].size();
        rep.sample_count += probs[c].size();
        if (probs[c].size() == 1) rep.singleton_classes.push_back(c);
        total += rep.per_class_variance[c];
    }
    rep.delta = total / static_cast<double>(probs.size());
    return rep;
}

}  // namespace detail

// Mean over classes of the population variance of the own-class probability.
template <class T>
UncertaintyReport delta_direct(const Model<T>& model, const Dataset<T>& ds,
                               std::size_t batchsize = 256) {
    auto groups = detail::members_by_class(ds);
    auto cm = class_means(model, ds, batchsize);
    std::vector<std::vector<T>> probs(ds.num_classes);
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        probs[c] = detail::own_class_probs(model, ds, groups[c], c, batchsize);
    }
    return detail::report_from_lists(probs, cm, ds.split);
}

struct DeltaOptions {
    std::size_t batchsize = 256;
    // Run the variance pass on the tape and call backward per batch, so
    // gradients accumulate into whichever leaves currently record them.
    bool with_gradients = false;
    // Keep the class means inside the tape (one whole class per batch);
    // quantifies what the detached-means shortcut ignores. Small data only.
    bool exact_grad = false;
};

// Two-pass estimator: detached class means, then class-pure batches
// accumulating (f - mean)^2. The reported delta is folded per sample in
// storage order, so it equals delta_direct bitwise for every batch size.
template <class T>
UncertaintyReport delta_two_pass(Model<T>& model, const Dataset<T>& ds, const DeltaOptions& opt) {
    if (opt.batchsize < 1) throw ConfigError("delta_two_pass: batchsize must be >= 1");
    auto groups = detail::members_by_class(ds);
    auto cm = class_means(model, ds, opt.batchsize);
    const double k_inv = 1.0 / static_cast<double>(ds.num_classes);

    std::vector<std::vector<T>> probs(ds.num_classes);
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        const auto& members = groups[c];
        if (opt.with_gradients) {
            std::size_t step = opt.exact_grad ? members.size() : opt.batchsize;
            for (std::size_t start = 0; start < members.size(); start += step) {
                std::size_t end = std::min(members.size(), start + step);
                std::vector<std::size_t> idx(members.begin() + static_cast<std::ptrdiff_t>(start),
                                             members.begin() + static_cast<std::ptrdiff_t>(end));
                auto batch = make_batch(ds, idx);
                assert_class_pure(batch.labels);
                auto p = select_column(softmax(model.forward(batch.x)), c);
                const auto& pv = p.values();
                probs[c].insert(probs[c].end(), pv.begin(), pv.end());
                Tensor<T> center =
                    opt.exact_grad
                        ? scale(sum(p), static_cast<T>(1.0 / static_cast<double>(members.size())))
                        : Tensor<T>::scalar(static_cast<T>(cm.mean[c]));
                auto resid = sub(p, center);
                auto loss = scale(sum(mul(resid, resid)),
                                  static_cast<T>(k_inv / static_cast<double>(members.size())));
                backward(loss);
            }
        } else {
            probs[c] = detail::own_class_probs(model, ds, members, c, opt.batchsize);
        }
    }
    return detail::report_from_lists(probs, cm, ds.split);
}

}  // namespace prue
