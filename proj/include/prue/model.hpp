#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "prue/arch.hpp"
#include "prue/errors.hpp"
#include "prue/rng.hpp"
#include "prue/tensor.hpp"

namespace prue {

// One named parameter. Prunable parameters (dense/conv weights) carry a
// binary mask of identical shape; the effective weight at forward time is
// mask (x) weight. Biases are never pruned and carry no stored mask.
template <class T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> mask;  // meaningful only when prunable
    bool prunable = false;
};

template <class T>
struct SparsityReport {
    double global = 0.0;
    std::size_t zeros = 0;
    std::size_t total = 0;
    std::vector<std::pair<std::string, double>> per_layer;
};

template <class T>
class Model {
  public:
    // Fan-in-scaled uniform init (weights in +-sqrt(1/fan_in), biases zero),
    // all masks all-ones. Deterministic in init_seed.
    static Model build(const ArchitectureSpec& spec, std::uint64_t init_seed) {
        spec.validate();
        Model m;
        m.spec_ = spec;
        Rng rng = derive(init_seed, "init");
        for (std::size_t i = 0; i < spec.layers.size(); ++i) {
            const Layer& layer = spec.layers[i];
            std::string base = "layer" + std::to_string(i);
            if (const auto* d = std::get_if<DenseLayer>(&layer)) {
                m.push_weight(base, Shape{d->in, d->out}, static_cast<double>(d->in), rng);
                m.push_bias(base, Shape{d->out});
            } else if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
                m.push_weight(base, Shape{c->out_ch, c->in_ch, c->kernel, c->kernel},
                              static_cast<double>(c->in_ch * c->kernel * c->kernel), rng);
                m.push_bias(base, Shape{c->out_ch});
            }
        }
        return m;
    }

    const ArchitectureSpec& spec() const { return spec_; }
    std::vector<Param<T>>& params() { return params_; }
    const std::vector<Param<T>>& params() const { return params_; }

    // Logits for a batch x of shape [B, input_shape...]. Prunable weights
    // enter the graph as mask (x) weight so both weight and mask gradients
    // are reachable.
    Tensor<T> forward(const Tensor<T>& x) const {
        Shape expect = spec_.input_shape;
        const Shape& sx = x.shape();
        if (sx.size() != expect.size() + 1 ||
            !std::equal(expect.begin(), expect.end(), sx.begin() + 1)) {
            throw ShapeError("model '" + spec_.name + "': batch shape " + shape_to_string(sx) +
                             " does not match input shape " + shape_to_string(expect));
        }
        std::size_t batch = sx[0];
        Tensor<T> cur = x;
        std::size_t pi = 0;
        for (const Layer& layer : spec_.layers) {
            if (std::holds_alternative<DenseLayer>(layer)) {
                const Param<T>& w = params_[pi++];
                const Param<T>& b = params_[pi++];
                Tensor<T> eff = mul(w.mask, w.value);
                cur = add(matmul(cur, eff), b.value);
            } else if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
                const Param<T>& w = params_[pi++];
                const Param<T>& b = params_[pi++];
                Tensor<T> eff = mul(w.mask, w.value);
                cur = add_bias_nchw(conv2d(cur, eff, c->pad), b.value);
            } else if (std::holds_alternative<ReluLayer>(layer)) {
                cur = relu(cur);
            } else if (std::holds_alternative<AvgPool2Layer>(layer)) {
                cur = avg_pool2(cur);
            } else {
                cur = reshape(cur, Shape{batch, cur.size() / batch});
            }
        }
        return cur;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    // l: total prunable weight count (biases excluded).
    std::size_t prunable_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) {
            if (p.prunable) n += p.value.size();
        }
        return n;
    }

    SparsityReport<T> sparsity_report() const {
        SparsityReport<T> r;
        for (const auto& p : params_) {
            if (!p.prunable) continue;
            std::size_t zeros = 0;
            for (T v : p.mask.values()) {
                if (v == T(0)) ++zeros;
            }
            r.zeros += zeros;
            r.total += p.mask.size();
            r.per_layer.push_back({p.name, static_cast<double>(zeros) / p.mask.size()});
        }
        r.global = r.total ? static_cast<double>(r.zeros) / static_cast<double>(r.total) : 0.0;
        return r;
    }

    void set_weights_requires_grad(bool flag) {
        for (auto& p : params_) p.value.set_requires_grad(flag);
    }

    void set_masks_requires_grad(bool flag) {
        for (auto& p : params_) {
            if (p.prunable) p.mask.set_requires_grad(flag);
        }
    }

    void zero_all_grads() {
        for (auto& p : params_) {
            p.value.zero_grad();
            if (p.prunable) p.mask.zero_grad();
        }
    }

    // Stable prunable-weight enumeration: layer order, then row-major index.
    std::vector<T> flat_prunable_weights() const {
        std::vector<T> out;
        out.reserve(prunable_count());
        for (const auto& p : params_) {
            if (!p.prunable) continue;
            out.insert(out.end(), p.value.values().begin(), p.value.values().end());
        }
        return out;
    }

    std::vector<T> flat_prunable_masks() const {
        std::vector<T> out;
        out.reserve(prunable_count());
        for (const auto& p : params_) {
            if (!p.prunable) continue;
            out.insert(out.end(), p.mask.values().begin(), p.mask.values().end());
        }
        return out;
    }

    std::vector<T> flat_prunable_mask_grads() const {
        std::vector<T> out;
        out.reserve(prunable_count());
        for (const auto& p : params_) {
            if (!p.prunable) continue;
            auto g = p.mask.grad();
            out.insert(out.end(), g.begin(), g.end());
        }
        return out;
    }

    // Writes a flat {0,1} vector (stable enumeration order) into the masks.
    void set_prunable_masks(const std::vector<std::uint8_t>& bits) {
        if (bits.size() != prunable_count()) {
            throw ShapeError("model: mask vector length " + std::to_string(bits.size()) +
                             " does not match prunable count " + std::to_string(prunable_count()));
        }
        std::size_t off = 0;
        for (auto& p : params_) {
            if (!p.prunable) continue;
            auto& mv = p.mask.values_mut();
            for (std::size_t i = 0; i < mv.size(); ++i) mv[i] = bits[off + i] ? T(1) : T(0);
            off += mv.size();
        }
    }

    bool masks_all_ones() const {
        for (const auto& p : params_) {
            if (!p.prunable) continue;
            for (T v : p.mask.values()) {
                if (v != T(1)) return false;
            }
        }
        return true;
    }

    // FNV over the raw bytes of every parameter and mask, in declaration
    // order; detects any weight or mask mutation.
    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        auto mix = [&h](const std::vector<T>& v) {
            if (v.empty()) return;
            std::uint64_t piece = fnv1a64(v.data(), v.size() * sizeof(T));
            h ^= piece;
            h *= 0x100000001b3ull;
        };
        for (const auto& p : params_) {
            mix(p.value.values());
            if (p.prunable) mix(p.mask.values());
        }
        return h;
    }

    // Deep copy: fresh leaves holding the same values.
    Model clone() const {
        Model m;
        m.spec_ = spec_;
        for (const auto& p : params_) {
            Param<T> q;
            q.name = p.name;
            q.value = p.value.detach();
            q.prunable = p.prunable;
            if (p.prunable) q.mask = p.mask.detach();
            m.params_.push_back(std::move(q));
        }
        return m;
    }

  private:
    void push_weight(const std::string& base, Shape shape, double fan_in, Rng& rng) {
        double bound = std::sqrt(1.0 / fan_in);
        std::vector<T> v(numel(shape));
        for (auto& x : v) x = static_cast<T>((rng.next_double() * 2.0 - 1.0) * bound);
        Param<T> p;
        p.name = base + "/weight";
        p.value = Tensor<T>::from_vector(shape, std::move(v));
        p.mask = Tensor<T>::full(shape, T(1));
        p.prunable = true;
        params_.push_back(std::move(p));
    }

    void push_bias(const std::string& base, Shape shape) {
        Param<T> p;
        p.name = base + "/bias";
        p.value = Tensor<T>::zeros(shape);
        p.prunable = false;
        params_.push_back(std::move(p));
    }

    ArchitectureSpec spec_;
    std::vector<Param<T>> params_;
};

}  // namespace prue
