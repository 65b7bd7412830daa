#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "prue/arch.hpp"
#include "prue/dataset.hpp"
#include "prue/errors.hpp"
#include "prue/model.hpp"
#include "prue/pruning.hpp"
#include "oracles.hpp"

using namespace prue;

namespace {

template <class T>
Dataset<T> small_blobs(std::uint64_t seed, std::size_t k = 3, std::size_t per_class = 6,
                       double separation = 2.5) {
    BlobsOptions bo;
    bo.num_classes = k;
    bo.per_class = per_class;
    bo.dim = 2;
    bo.separation = separation;
    bo.seed = seed;
    return make_blobs<T>(bo);
}

template <class T>
std::vector<T> flat_prunable_weight_grads(const Model<T>& m) {
    std::vector<T> out;
    for (const auto& p : m.params()) {
        if (!p.prunable) continue;
        auto g = p.value.grad();
        out.insert(out.end(), g.begin(), g.end());
    }
    return out;
}

}  // namespace

TEST_CASE("prue scores demand an unpruned starting point") {
    auto model = Model<float>::build(make_preset("mlp-s", {2}, 3), 1);
    auto ds = small_blobs<float>(4);
    std::vector<std::uint8_t> mask(model.prunable_count(), 1);
    mask[7] = 0;
    model.set_prunable_masks(mask);
    CHECK_THROWS_WITH_AS(prue_scores(model, ds), doctest::Contains("all ones"), ConfigError);
}

TEST_CASE("prue scores vanish where the chain rule forces them to") {
    auto model = Model<float>::build(make_preset("mlp-s", {2}, 3), 2);
    auto ds = small_blobs<float>(5);

    SUBCASE("a zero weight has zero saliency") {
        model.params()[0].value.values_mut()[3] = 0.0f;
        model.params()[0].value.values_mut()[17] = 0.0f;
        auto sv = prue_scores(model, ds);
        CHECK(sv.scores[3] == 0.0);
        CHECK(sv.scores[17] == 0.0);
    }
    SUBCASE("a constant predictor sits at a minimum of delta, so every score is zero") {
        for (auto& p : model.params()) {
            if (p.prunable) {
                for (auto& w : p.value.values_mut()) w = 0.0f;
            }
        }
        auto sv = prue_scores(model, ds);
        for (double s : sv.scores) CHECK(s == 0.0);
    }
}

TEST_CASE("prue scores carry their metadata and leave the model reusable") {
    auto model = Model<float>::build(make_preset("mlp-s", {2}, 3), 2);
    auto ds = small_blobs<float>(5);
    auto before = model.checksum();
    auto sv = prue_scores(model, ds);
    CHECK(model.checksum() == before);
    CHECK(sv.method == ScoreMethod::prue);
    CHECK(sv.scores.size() == model.prunable_count());
    CHECK(sv.split == ds.split);
    CHECK(sv.sample_count == ds.size());
    sv.validate();

    SUBCASE("scoring twice gives identical results (no leftover gradient state)") {
        auto again = prue_scores(model, ds);
        CHECK(again.scores == sv.scores);
    }
}

TEST_CASE("prue scores match finite differences of delta in the mask") {
    auto model = Model<double>::build(make_preset("mlp-s", {2}, 3), 11);
    auto ds = small_blobs<double>(12);
    auto sv = prue_scores(model, ds, 4);

    Rng pick(7);
    const double eps = 1e-4;
    std::size_t checked = 0;
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t pi = 0; pi < model.params().size(); ++pi) {
        if (!model.params()[pi].prunable) continue;
        for (std::size_t off = 0; off < model.params()[pi].mask.size(); ++off) {
            coords.push_back({pi, off});
        }
    }
    REQUIRE(coords.size() == sv.scores.size());
    for (int rep = 0; rep < 55; ++rep) {
        std::size_t j = pick.below(coords.size());
        auto [pi, off] = coords[j];
        auto& mv = model.params()[pi].mask.values_mut();
        double orig = mv[off];
        mv[off] = orig + eps;
        double up = delta_direct(model, ds).delta;
        mv[off] = orig - eps;
        double down = delta_direct(model, ds).delta;
        mv[off] = orig;
        double fd = std::abs((up - down) / (2.0 * eps));
        CHECK(std::abs(sv.scores[j] - fd) <= 1e-3 * std::max(sv.scores[j], fd) + 1e-8);
        ++checked;
    }
    CHECK(checked >= 50);
}

TEST_CASE("prue score equals weight times weight-gradient of delta") {
    auto model = Model<double>::build(make_preset("mlp-s", {2}, 3), 11);
    auto ds = small_blobs<double>(12);
    auto sv = prue_scores(model, ds);

    // Independent computation through the weight side of the product.
    model.zero_all_grads();
    model.set_weights_requires_grad(true);
    model.set_masks_requires_grad(false);
    DeltaOptions opt;
    opt.with_gradients = true;
    delta_two_pass(model, ds, opt);
    auto gw = flat_prunable_weight_grads(model);
    auto w = model.flat_prunable_weights();
    model.zero_all_grads();
    model.set_weights_requires_grad(false);

    REQUIRE(gw.size() == sv.scores.size());
    for (std::size_t j = 0; j < gw.size(); ++j) {
        CHECK(std::abs(std::abs(w[j] * gw[j]) - sv.scores[j]) <= 1e-6);
    }
}

TEST_CASE("magnitude scores are absolute weights") {
    ArchitectureSpec spec;
    spec.name = "four";
    spec.input_shape = {2};
    spec.num_classes = 2;
    spec.layers = {DenseLayer{2, 2}};
    auto model = Model<float>::build(spec, 0);
    model.params()[0].value.values_mut() = {0.1f, -0.5f, 0.3f, 0.05f};
    auto sv = baseline_scores(ScoreMethod::magnitude, model);
    CHECK(sv.method == ScoreMethod::magnitude);
    REQUIRE(sv.scores.size() == 4);
    CHECK(sv.scores[0] == doctest::Approx(0.1));
    CHECK(sv.scores[1] == doctest::Approx(0.5));
    CHECK(sv.scores[2] == doctest::Approx(0.3));
    CHECK(sv.scores[3] == doctest::Approx(0.05));
}

TEST_CASE("snip scores match finite differences of the supervised loss in the mask") {
    auto model = Model<double>::build(make_preset("mlp-s", {2}, 3), 19);
    auto ds = small_blobs<double>(23);
    auto sv = baseline_scores(ScoreMethod::snip, model, &ds, std::nullopt, 4);
    CHECK(sv.method == ScoreMethod::snip);
    CHECK(sv.sample_count == ds.size());

    // Reference value of the dataset-mean cross-entropy at the current masks.
    auto mean_ce = [&]() {
        NoGradGuard ng;
        std::vector<std::size_t> idx(ds.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        auto batch = make_batch(ds, idx);
        return static_cast<double>(cross_entropy_loss(model.forward(batch.x), batch.labels).item());
    };

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t pi = 0; pi < model.params().size(); ++pi) {
        if (!model.params()[pi].prunable) continue;
        for (std::size_t off = 0; off < model.params()[pi].mask.size(); ++off) {
            coords.push_back({pi, off});
        }
    }
    Rng pick(8);
    const double eps = 1e-4;
    for (int rep = 0; rep < 40; ++rep) {
        std::size_t j = pick.below(coords.size());
        auto [pi, off] = coords[j];
        auto& mv = model.params()[pi].mask.values_mut();
        double orig = mv[off];
        mv[off] = orig + eps;
        double up = mean_ce();
        mv[off] = orig - eps;
        double down = mean_ce();
        mv[off] = orig;
        double fd = std::abs((up - down) / (2.0 * eps));
        CHECK(std::abs(sv.scores[j] - fd) <= 1e-3 * std::max(sv.scores[j], fd) + 1e-8);
    }

    SUBCASE("snip without a dataset is an error") {
        CHECK_THROWS_WITH_AS(baseline_scores<double>(ScoreMethod::snip, model),
                             doctest::Contains("labeled dataset"), ConfigError);
    }
    SUBCASE("snip on a pruned model is an error") {
        model.set_prunable_masks(std::vector<std::uint8_t>(model.prunable_count(), 0));
        CHECK_THROWS_AS(baseline_scores(ScoreMethod::snip, model, &ds), ConfigError);
    }
}

TEST_CASE("random scores are seeded draws") {
    auto model = Model<float>::build(make_preset("mlp-s", {2}, 3), 2);
    auto a = baseline_scores<float>(ScoreMethod::random, model, nullptr, 42);
    auto b = baseline_scores<float>(ScoreMethod::random, model, nullptr, 42);
    auto c = baseline_scores<float>(ScoreMethod::random, model, nullptr, 43);
    CHECK(a.scores == b.scores);
    CHECK(a.scores != c.scores);
    CHECK(a.seed == 42);
    for (double s : a.scores) {
        CHECK(s >= 0.0);
        CHECK(s < 1.0);
    }
    SUBCASE("random without a seed is an error") {
        CHECK_THROWS_WITH_AS(baseline_scores<float>(ScoreMethod::random, model),
                             doctest::Contains("seed"), ConfigError);
    }
    SUBCASE("prue is not a baseline") {
        CHECK_THROWS_AS(baseline_scores<float>(ScoreMethod::prue, model), ConfigError);
    }
}

namespace {

ScoreVector make_scores(std::vector<double> v) {
    ScoreVector sv;
    sv.scores = std::move(v);
    return sv;
}

}  // namespace

TEST_CASE("select_mask prunes the globally smallest scores") {
    auto mask = select_mask(make_scores({0.4, 0.1, 0.3, 0.2}), 0.5);
    CHECK(mask == std::vector<std::uint8_t>{1, 0, 1, 0});

    SUBCASE("zero sparsity keeps everything") {
        CHECK(select_mask(make_scores({0.4, 0.1, 0.3, 0.2}), 0.0) ==
              std::vector<std::uint8_t>(4, 1));
    }
    SUBCASE("the floor rule fixes the pruned count exactly") {
        auto ten = make_scores({9, 8, 7, 6, 5, 4, 3, 2, 1, 0});
        auto count_zeros = [](const std::vector<std::uint8_t>& m) {
            return std::count(m.begin(), m.end(), std::uint8_t(0));
        };
        CHECK(count_zeros(select_mask(ten, 0.33)) == 3);
        CHECK(count_zeros(select_mask(ten, 0.3)) == 3);  // 0.3*10 is 2.999... in binary
        CHECK(count_zeros(select_mask(ten, 0.999)) == 9);
        CHECK(count_zeros(select_mask(ten, 0.05)) == 0);
    }
    SUBCASE("ties prune the lower index first") {
        auto tied = make_scores({0.1, 0.1, 0.1, 0.4});
        CHECK(select_mask(tied, 0.25) == std::vector<std::uint8_t>{0, 1, 1, 1});
        CHECK(select_mask(tied, 0.5) == std::vector<std::uint8_t>{0, 0, 1, 1});
        CHECK(select_mask(tied, 0.75) == std::vector<std::uint8_t>{0, 0, 0, 1});
    }
    SUBCASE("sparsity outside [0,1) is rejected") {
        CHECK_THROWS_AS(select_mask(make_scores({1, 2}), 1.0), ConfigError);
        CHECK_THROWS_AS(select_mask(make_scores({1, 2}), -0.01), ConfigError);
        CHECK_THROWS_AS(select_mask(make_scores({1, 2}), std::nan("")), ConfigError);
    }
    SUBCASE("non-finite scores are rejected") {
        CHECK_THROWS_AS(select_mask(make_scores({0.1, std::nan("")}), 0.5), NumericError);
        CHECK_THROWS_AS(select_mask(make_scores({0.1, -0.2}), 0.5), NumericError);
    }
}

TEST_CASE("zero-sets nest as sparsity grows") {
    Rng rng(3);
    std::vector<double> v(200);
    for (auto& x : v) x = rng.next_double();
    auto sv = make_scores(v);
    std::vector<double> levels{0.0, 0.1, 0.25, 0.5, 0.75, 0.9};
    std::set<std::size_t> prev;
    for (double s : levels) {
        auto mask = select_mask(sv, s);
        std::set<std::size_t> zeros;
        for (std::size_t j = 0; j < mask.size(); ++j) {
            if (mask[j] == 0) zeros.insert(j);
        }
        CHECK(std::includes(zeros.begin(), zeros.end(), prev.begin(), prev.end()));
        prev = std::move(zeros);
    }
}

TEST_CASE("permuting the scores permutes the mask identically") {
    Rng rng(9);
    std::vector<double> v(64);
    for (auto& x : v) x = rng.next_double();  // distinct with probability 1
    auto base_mask = select_mask(make_scores(v), 0.4);

    std::vector<std::size_t> perm(v.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    shuffle(perm, rng);
    std::vector<double> pv(v.size());
    for (std::size_t i = 0; i < perm.size(); ++i) pv[perm[i]] = v[i];
    auto perm_mask = select_mask(make_scores(pv), 0.4);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        CHECK(perm_mask[perm[i]] == base_mask[i]);
    }
}

TEST_CASE("default fine-tune settings derive from the original run") {
    TrainConfig orig;
    orig.epochs = 12;
    orig.optimizer.lr = 0.1;
    orig.optimizer.schedule = {{8, 0.1}};
    auto ft = default_finetune(orig);
    CHECK(ft.optimizer.lr == doctest::Approx(0.01));
    CHECK(ft.epochs == 4);
    CHECK(ft.optimizer.schedule.empty());
    CHECK(ft.batchsize == orig.batchsize);

    orig.epochs = 2;
    CHECK(default_finetune(orig).epochs == 1);
}

TEST_CASE("prune_and_finetune keeps sparsity exact and masks frozen") {
    auto train_ds = small_blobs<float>(51, 3, 30, 4.0);
    auto val_ds = [&] {
        BlobsOptions bo;
        bo.num_classes = 3;
        bo.per_class = 10;
        bo.dim = 2;
        bo.separation = 4.0;
        bo.seed = 51;
        bo.split = "val";
        return make_blobs<float>(bo);
    }();

    auto model = Model<float>::build(make_preset("mlp-s", {2}, 3), 6);
    TrainConfig dense_cfg;
    dense_cfg.epochs = 6;
    dense_cfg.batchsize = 16;
    train(model, train_ds, &val_ds, dense_cfg, 60);

    TrainConfig ft = default_finetune(dense_cfg);
    auto outcome = prune_and_finetune(model, ScoreMethod::magnitude, 0.5, train_ds, &val_ds, ft, 61);

    const std::size_t l = model.prunable_count();
    const auto expect_zeros = static_cast<std::size_t>(std::floor(0.5 * static_cast<double>(l)));
    CHECK(outcome.sparsity == doctest::Approx(static_cast<double>(expect_zeros) / l));
    auto rep = model.sparsity_report();
    CHECK(rep.zeros == expect_zeros);
    CHECK(rep.total == l);

    // The mask on the model is the selected mask, unchanged by fine-tuning.
    auto mv = model.flat_prunable_masks();
    REQUIRE(mv.size() == outcome.mask.size());
    for (std::size_t j = 0; j < mv.size(); ++j) {
        CHECK(mv[j] == static_cast<float>(outcome.mask[j]));
    }

    CHECK(outcome.delta_before.delta >= 0.0);
    CHECK(outcome.delta_after.delta >= 0.0);
    CHECK(outcome.eval_before.accuracy > 0.9);  // separable blobs train quickly
    CHECK(outcome.eval_after.accuracy > 0.5);
    CHECK(outcome.finetune.epochs.size() == ft.epochs);
    CHECK(outcome.scores.method == ScoreMethod::magnitude);

    SUBCASE("zero sparsity fine-tunes the dense model and keeps accuracy") {
        auto dense = Model<float>::build(make_preset("mlp-s", {2}, 3), 6);
        train(dense, train_ds, &val_ds, dense_cfg, 60);
        auto keep = prune_and_finetune(dense, ScoreMethod::magnitude, 0.0, train_ds, &val_ds, ft, 62);
        CHECK(keep.sparsity == 0.0);
        CHECK(dense.sparsity_report().zeros == 0);
        CHECK(keep.eval_after.accuracy >= keep.eval_before.accuracy - 0.05);
    }
    SUBCASE("random method routes the seed into the scores") {
        auto m2 = Model<float>::build(make_preset("mlp-s", {2}, 3), 6);
        train(m2, train_ds, &val_ds, dense_cfg, 60);
        auto o1 = prune_and_finetune(m2, ScoreMethod::random, 0.5, train_ds, &val_ds, ft, 99);
        auto m3 = Model<float>::build(make_preset("mlp-s", {2}, 3), 6);
        train(m3, train_ds, &val_ds, dense_cfg, 60);
        auto o2 = prune_and_finetune(m3, ScoreMethod::random, 0.5, train_ds, &val_ds, ft, 99);
        CHECK(o1.mask == o2.mask);
        CHECK(m2.checksum() == m3.checksum());
    }
}

TEST_CASE("prune_and_finetune with prue scores runs end to end") {
    auto train_ds = small_blobs<float>(52, 3, 20, 3.0);
    auto model = Model<float>::build(make_preset("mlp-s", {2}, 3), 8);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batchsize = 16;
    train<float>(model, train_ds, nullptr, cfg, 70);

    auto outcome = prune_and_finetune<float>(model, ScoreMethod::prue, 0.3, train_ds, nullptr,
                                             default_finetune(cfg), 71);
    CHECK(outcome.scores.method == ScoreMethod::prue);
    const std::size_t l = model.prunable_count();
    CHECK(model.sparsity_report().zeros == static_cast<std::size_t>(std::floor(0.3 * l)));
    CHECK(outcome.delta_after.delta >= 0.0);
}
