#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "prue/dataset.hpp"
#include "prue/errors.hpp"
#include "prue/model.hpp"
#include "prue/rng.hpp"
#include "prue/train.hpp"
#include "prue/uncertainty.hpp"

namespace prue {

enum class ScoreMethod { prue, magnitude, snip, random };

inline std::string to_string(ScoreMethod m) {
    switch (m) {
        case ScoreMethod::prue: return "prue";
        case ScoreMethod::magnitude: return "magnitude";
        case ScoreMethod::snip: return "snip";
        case ScoreMethod::random: return "random";
    }
    throw ConfigError("score method: bad enum value");
}

inline ScoreMethod score_method_from_string(const std::string& s) {
    if (s == "prue") return ScoreMethod::prue;
    if (s == "magnitude") return ScoreMethod::magnitude;
    if (s == "snip") return ScoreMethod::snip;
    if (s == "random") return ScoreMethod::random;
    throw ConfigError("score method: unknown '" + s + "' (known: prue, magnitude, snip, random)");
}

// Per-weight saliency, aligned with the model's stable prunable-weight
// enumeration (layer order, then row-major index).
struct ScoreVector {
    std::vector<double> scores;
    ScoreMethod method = ScoreMethod::magnitude;
    std::string split;
    std::size_t sample_count = 0;
    std::uint64_t seed = 0;  // meaningful for random only

    void validate() const {
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (!std::isfinite(scores[j]) || scores[j] < 0) {
                throw NumericError("score vector: entry " + std::to_string(j) + " is " +
                                   std::to_string(scores[j]) + ", expected finite and >= 0");
            }
        }
    }
};

// |d delta / d mask_j| at the all-ones mask point, accumulated over the full
// dataset with the two-pass estimator.
template <class T>
ScoreVector prue_scores(Model<T>& model, const Dataset<T>& ds, std::size_t batchsize = 256) {
    if (!model.masks_all_ones()) {
        throw ConfigError("prue_scores: masks must be all ones; scoring an already pruned model is "
                          "not supported");
    }
    model.zero_all_grads();
    model.set_weights_requires_grad(false);
    model.set_masks_requires_grad(true);
    DeltaOptions opt;
    opt.batchsize = batchsize;
    opt.with_gradients = true;
    delta_two_pass(model, ds, opt);
    auto g = model.flat_prunable_mask_grads();
    model.set_masks_requires_grad(false);
    model.zero_all_grads();

    ScoreVector sv;
    sv.method = ScoreMethod::prue;
    sv.split = ds.split;
    sv.sample_count = ds.size();
    sv.scores.resize(g.size());
    for (std::size_t j = 0; j < g.size(); ++j) sv.scores[j] = std::abs(static_cast<double>(g[j]));
    sv.validate();
    return sv;
}

// magnitude: |w_j|. snip: |d L_CE / d mask_j| at the all-ones point over the
// full dataset. random: seeded uniform draws.
template <class T>
ScoreVector baseline_scores(ScoreMethod method, Model<T>& model, const Dataset<T>* ds = nullptr,
                            std::optional<std::uint64_t> seed = std::nullopt,
                            std::size_t batchsize = 256) {
    ScoreVector sv;
    sv.method = method;
    if (method == ScoreMethod::prue) {
        throw ConfigError("baseline_scores: use prue_scores for the prue method");
    }
    if (method == ScoreMethod::magnitude) {
        auto w = model.flat_prunable_weights();
        sv.scores.resize(w.size());
        for (std::size_t j = 0; j < w.size(); ++j) sv.scores[j] = std::abs(static_cast<double>(w[j]));
    } else if (method == ScoreMethod::snip) {
        if (ds == nullptr) throw ConfigError("baseline_scores: snip needs a labeled dataset");
        if (!model.masks_all_ones()) {
            throw ConfigError("baseline_scores: snip scores are defined at the all-ones mask point");
        }
        model.zero_all_grads();
        model.set_weights_requires_grad(false);
        model.set_masks_requires_grad(true);
        const double m = static_cast<double>(ds->size());
        for (std::size_t start = 0; start < ds->size(); start += batchsize) {
            std::size_t end = std::min(ds->size(), start + batchsize);
            std::vector<std::size_t> idx(end - start);
            std::iota(idx.begin(), idx.end(), start);
            auto batch = make_batch(*ds, idx);
            auto loss = scale(cross_entropy_loss(model.forward(batch.x), batch.labels),
                              static_cast<T>(static_cast<double>(idx.size()) / m));
            backward(loss);
        }
        auto g = model.flat_prunable_mask_grads();
        model.set_masks_requires_grad(false);
        model.zero_all_grads();
        sv.scores.resize(g.size());
        for (std::size_t j = 0; j < g.size(); ++j) sv.scores[j] = std::abs(static_cast<double>(g[j]));
        sv.split = ds->split;
        sv.sample_count = ds->size();
    } else {  // random
        if (!seed.has_value()) throw ConfigError("baseline_scores: random scoring needs a seed");
        Rng rng = derive(*seed, "random-pruning");
        sv.scores.resize(model.prunable_count());
        for (auto& s : sv.scores) s = rng.next_double();
        sv.seed = *seed;
    }
    if (ds != nullptr) {
        sv.split = ds->split;
        sv.sample_count = ds->size();
    }
    sv.validate();
    return sv;
}

// One-shot global mask: zero exactly floor(s*l) weights with the smallest
// scores, ranked across all layers; ties prune the lower index first.
inline std::vector<std::uint8_t> select_mask(const ScoreVector& sv, double s) {
    if (!(s >= 0.0) || s >= 1.0) {
        throw ConfigError("select_mask: sparsity must lie in [0,1), got " + std::to_string(s));
    }
    sv.validate();
    const std::size_t l = sv.scores.size();
    // Nudge past binary representation error so e.g. 0.3*10 prunes 3.
    auto k = static_cast<std::size_t>(std::floor(s * static_cast<double>(l) + 1e-9));
    k = std::min(k, l);
    std::vector<std::size_t> order(l);
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sv.scores[a] < sv.scores[b]; });
    std::vector<std::uint8_t> mask(l, 1);
    for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 0;
    return mask;
}

// Reduced-rate fine-tuning defaults: a tenth of the learning rate for a
// third of the epochs, same optimizer family.
inline TrainConfig default_finetune(const TrainConfig& original) {
    TrainConfig ft = original;
    ft.optimizer.lr = original.optimizer.lr / 10.0;
    ft.optimizer.schedule.clear();
    ft.epochs = std::max<std::size_t>(1, original.epochs / 3);
    return ft;
}

struct PruneOutcome {
    ScoreVector scores;
    std::vector<std::uint8_t> mask;
    double sparsity = 0;  // floor(s*l)/l, exact
    UncertaintyReport delta_before;  // dense model, pre-prune
    UncertaintyReport delta_after;   // post fine-tune
    EvalResult eval_before;
    EvalResult eval_after;
    TrainResult finetune;
};

// Score on the trained dense model, mask once, fine-tune with masks fixed.
// Reports delta and accuracy on the evaluation split before pruning and
// after fine-tuning.
template <class T>
PruneOutcome prune_and_finetune(Model<T>& model, ScoreMethod method, double s,
                                const Dataset<T>& train_ds, const Dataset<T>* eval_ds,
                                const TrainConfig& finetune_cfg, std::uint64_t seed,
                                std::size_t score_batchsize = 256) {
    const Dataset<T>& measured = eval_ds ? *eval_ds : train_ds;
    PruneOutcome out;
    out.delta_before = delta_direct(model, measured);
    out.eval_before = evaluate(model, measured);

    out.scores = method == ScoreMethod::prue
                     ? prue_scores(model, train_ds, score_batchsize)
                     : baseline_scores(method, model, &train_ds, seed, score_batchsize);
    out.mask = select_mask(out.scores, s);
    model.set_prunable_masks(out.mask);

    std::size_t zeros = 0;
    for (auto b : out.mask) zeros += b == 0;
    out.sparsity = static_cast<double>(zeros) / static_cast<double>(out.mask.size());
    auto rep = model.sparsity_report();
    if (rep.zeros != zeros) {
        throw Error("prune_and_finetune: internal: mask application changed the zero count");
    }

    out.finetune = train(model, train_ds, eval_ds, finetune_cfg, seed);

    auto rep_after = model.sparsity_report();
    if (rep_after.zeros != zeros) {
        throw Error("prune_and_finetune: internal: fine-tuning changed the mask");
    }
    out.delta_after = delta_direct(model, measured);
    out.eval_after = evaluate(model, measured);
    return out;
}

}  // namespace prue
