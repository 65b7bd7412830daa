#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "prue/arch.hpp"
#include "prue/model.hpp"

using namespace prue;
using prue_test::random_tensor;

TEST_CASE("mlp-s parameter and prunable counts") {
    auto spec = make_preset("mlp-s", {784}, 10);
    auto m = Model<float>::build(spec, 1);
    CHECK(m.parameter_count() == 784 * 64 + 64 + 64 * 10 + 10);
    CHECK(m.parameter_count() == 50890);
    CHECK(m.prunable_count() == 50816);
}

TEST_CASE("identical seeds build bit-identical models") {
    auto spec = make_preset("cnn-s", {1, 8, 8}, 10);
    auto a = Model<float>::build(spec, 7);
    auto b = Model<float>::build(spec, 7);
    auto c = Model<float>::build(spec, 8);
    CHECK(a.checksum() == b.checksum());
    CHECK(a.checksum() != c.checksum());
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        CHECK(a.params()[i].value.values() == b.params()[i].value.values());
    }
}

TEST_CASE("inconsistent specs are rejected naming the layer pair") {
    ArchitectureSpec spec;
    spec.name = "broken";
    spec.input_shape = {64};
    spec.num_classes = 10;
    spec.layers = {DenseLayer{64, 32}, DenseLayer{16, 10}};
    try {
        spec.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        CHECK(msg.find("layer 1") != std::string::npos);
        CHECK(msg.find("dense 16->10") != std::string::npos);
        CHECK(msg.find("dense 64->32") != std::string::npos);
    }
}

TEST_CASE("final layer must match the class count") {
    ArchitectureSpec spec;
    spec.name = "broken";
    spec.input_shape = {8};
    spec.num_classes = 10;
    spec.layers = {DenseLayer{8, 4}};
    CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("architecture JSON round-trip") {
    auto spec = make_preset("cnn-l", {1, 16, 16}, 10);
    auto j = spec.to_json();
    auto back = ArchitectureSpec::from_json(j);
    CHECK(back == spec);
    CHECK(back.validate() == Shape{10});
    CHECK_THROWS_AS(ArchitectureSpec::from_json(nlohmann::json{{"name", "x"}}), ConfigError);
}

TEST_CASE("presets validate across input sizes") {
    for (auto name : {"mlp-s", "mlp-l"}) {
        for (Shape in : {Shape{784}, Shape{1, 14, 14}}) {
            auto spec = make_preset(name, in, 10);
            CHECK(spec.validate() == Shape{10});
        }
    }
    for (auto name : {"cnn-s", "cnn-l"}) {
        for (Shape in : {Shape{1, 28, 28}, Shape{1, 14, 14}, Shape{3, 32, 32}}) {
            auto spec = make_preset(name, in, 10);
            CHECK(spec.validate() == Shape{10});
        }
    }
    CHECK_THROWS_AS(make_preset("cnn-s", {784}, 10), ConfigError);
    CHECK_THROWS_AS(make_preset("resnet", {784}, 10), ConfigError);
}

TEST_CASE("forward is pure and deterministic") {
    auto spec = make_preset("cnn-s", {1, 8, 8}, 5);
    auto m = Model<float>::build(spec, 3);
    Rng rng = derive(3, "x");
    auto x = random_tensor<float>({4, 1, 8, 8}, rng);
    auto y1 = m.forward(x);
    auto y2 = m.forward(x);
    CHECK(y1.shape() == Shape{4, 5});
    CHECK(y1.values() == y2.values());
}

TEST_CASE("forward rejects mismatched batch shapes") {
    auto spec = make_preset("mlp-s", {784}, 10);
    auto m = Model<float>::build(spec, 1);
    CHECK_THROWS_AS(m.forward(Tensor<float>::zeros({2, 100})), ShapeError);
}

TEST_CASE("all-zero masks leave only bias effects") {
    auto spec = make_preset("mlp-s", {12}, 4);
    auto m = Model<double>::build(spec, 5);
    // Give biases nonzero values so the output is not trivially zero.
    for (auto& p : m.params()) {
        if (!p.prunable) {
            auto& v = p.value.values_mut();
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * static_cast<double>(i + 1);
        }
    }
    m.set_prunable_masks(std::vector<std::uint8_t>(m.prunable_count(), 0));
    Rng rng = derive(5, "x");
    auto x1 = random_tensor<double>({3, 12}, rng);
    auto y = m.forward(x1);
    // Identical logits for every input row.
    for (std::size_t r = 1; r < 3; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            CHECK(y.values()[r * 4 + c] == y.values()[c]);
        }
    }
    CHECK(m.sparsity_report().global == 1.0);
}

TEST_CASE("all-ones masks equal an unmasked forward") {
    // Masked forward must match a hand-computed dense pass.
    auto spec = make_preset("mlp-s", {6}, 3);
    auto m = Model<double>::build(spec, 9);
    Rng rng = derive(9, "x");
    auto x = random_tensor<double>({2, 6}, rng);
    auto y = m.forward(x);

    const auto& w1 = m.params()[0].value;
    const auto& b1 = m.params()[1].value;
    const auto& w2 = m.params()[2].value;
    const auto& b2 = m.params()[3].value;
    auto h = relu(add(matmul(x, w1), b1));
    auto ref = add(matmul(h, w2), b2);
    CHECK(y.values() == ref.values());
}

TEST_CASE("masking equals zeroing the weights exactly") {
    auto spec = make_preset("cnn-s", {1, 8, 8}, 4);
    auto masked = Model<double>::build(spec, 11);
    auto zeroed = masked.clone();

    std::vector<std::uint8_t> bits(masked.prunable_count(), 1);
    Rng rng = derive(11, "drop");
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = rng.next_double() < 0.5 ? 0 : 1;
    masked.set_prunable_masks(bits);

    std::size_t off = 0;
    for (auto& p : zeroed.params()) {
        if (!p.prunable) continue;
        auto& v = p.value.values_mut();
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!bits[off + i]) v[i] = 0.0;
        }
        off += v.size();
    }

    auto x = random_tensor<double>({3, 1, 8, 8}, rng);
    auto ya = masked.forward(x);
    auto yb = zeroed.forward(x);
    for (std::size_t i = 0; i < ya.size(); ++i) {
        CHECK(ya.values()[i] == yb.values()[i]);
    }
}

TEST_CASE("flipping one mask bit changes logits iff the weight is nonzero") {
    auto spec = make_preset("mlp-s", {5}, 3);
    auto m = Model<double>::build(spec, 13);
    Rng rng = derive(13, "x");
    auto x = random_tensor<double>({2, 5}, rng);
    auto base = m.forward(x).values();

    // Zero one weight, flip its mask: logits unchanged.
    auto& w = m.params()[0].value.values_mut();
    w[7] = 0.0;
    auto& mask = m.params()[0].mask.values_mut();
    auto with_weight_zero = m.forward(x).values();
    mask[7] = 0.0;
    CHECK(m.forward(x).values() == with_weight_zero);
    mask[7] = 1.0;

    // Flip a mask over a nonzero weight: logits change.
    REQUIRE(w[3] != 0.0);
    mask[3] = 0.0;
    auto changed = m.forward(x).values();
    CHECK(changed != base);
}

TEST_CASE("sparsity report arithmetic") {
    auto spec = make_preset("mlp-s", {784}, 10);
    auto m = Model<float>::build(spec, 1);
    CHECK(m.sparsity_report().global == 0.0);

    std::vector<std::uint8_t> bits(m.prunable_count(), 1);
    for (std::size_t i = 0; i < 5000; ++i) bits[i * 10] = 0;
    m.set_prunable_masks(bits);
    auto rep = m.sparsity_report();
    CHECK(rep.zeros == 5000);
    CHECK(rep.total == 50816);
    CHECK(rep.global == doctest::Approx(5000.0 / 50816.0).epsilon(1e-12));
    CHECK(std::abs(rep.global - 0.0984) < 1e-4);
}

TEST_CASE("l is constant across a model's lifetime") {
    auto spec = make_preset("cnn-s", {1, 8, 8}, 4);
    auto m = Model<float>::build(spec, 2);
    auto l = m.prunable_count();
    m.set_prunable_masks(std::vector<std::uint8_t>(l, 0));
    CHECK(m.prunable_count() == l);
}

TEST_CASE("weight and mask gradients flow through the masked forward") {
    using T = double;
    auto spec = make_preset("mlp-s", {4}, 3);
    auto m = Model<T>::build(spec, 21);
    m.set_weights_requires_grad(true);
    m.set_masks_requires_grad(true);
    Rng rng = derive(21, "x");
    auto x = random_tensor<T>({3, 4}, rng);

    auto build = [&]() {
        auto y = m.forward(x);
        return sum(mul(y, y));
    };
    std::vector<Tensor<T>> leaves;
    for (auto& p : m.params()) {
        leaves.push_back(p.value);
        if (p.prunable) leaves.push_back(p.mask);
    }
    m.zero_all_grads();
    prue_test::check_grads_fd<T>(build, leaves, 1e-5, 1e-8, T(1e-4), rng);
}

TEST_CASE("checksum tracks weights and masks") {
    auto spec = make_preset("mlp-s", {8}, 3);
    auto m = Model<float>::build(spec, 4);
    auto h0 = m.checksum();
    auto bits = std::vector<std::uint8_t>(m.prunable_count(), 1);
    bits[0] = 0;
    m.set_prunable_masks(bits);
    CHECK(m.checksum() != h0);
    bits[0] = 1;
    m.set_prunable_masks(bits);
    CHECK(m.checksum() == h0);
}
