#pragma once

#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "prue/rng.hpp"
#include "prue/tensor.hpp"

// Shared gradient oracle: compares reverse-mode gradients of a rebuildable
// scalar expression against central finite differences at sampled leaf
// coordinates.
namespace prue_test {

template <class T>
T eval_scalar(const std::function<prue::Tensor<T>()>& build) {
    prue::NoGradGuard ng;
    return build().item();
}

// Central difference of build() with respect to coordinate j of leaf.
template <class T>
T fd_coord(const std::function<prue::Tensor<T>()>& build, prue::Tensor<T>& leaf, std::size_t j, T eps) {
    auto& v = leaf.values_mut();
    T orig = v[j];
    v[j] = orig + eps;
    T fp = eval_scalar(build);
    v[j] = orig - eps;
    T fm = eval_scalar(build);
    v[j] = orig;
    return (fp - fm) / (T(2) * eps);
}

struct GradCheckStats {
    std::size_t checked = 0;
    double worst_abs_err = 0.0;
};

// Runs one reverse pass, then verifies |ad - fd| <= rtol*max(|ad|,|fd|) + atol
// at sampled coordinates of every leaf. max_coords_per_leaf = 0 checks all.
template <class T>
GradCheckStats check_grads_fd(const std::function<prue::Tensor<T>()>& build,
                              std::vector<prue::Tensor<T>> leaves, double rtol, double atol, T eps,
                              prue::Rng& rng, std::size_t max_coords_per_leaf = 0) {
    for (auto& l : leaves) l.zero_grad();
    {
        auto loss = build();
        prue::backward(loss);
    }
    GradCheckStats st;
    for (auto& leaf : leaves) {
        auto g = leaf.grad();
        std::vector<std::size_t> coords;
        if (max_coords_per_leaf == 0 || max_coords_per_leaf >= g.size()) {
            coords.resize(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) coords[i] = i;
        } else {
            for (std::size_t i = 0; i < max_coords_per_leaf; ++i) {
                coords.push_back(static_cast<std::size_t>(rng.below(g.size())));
            }
        }
        for (std::size_t j : coords) {
            T fd = fd_coord(build, leaf, j, eps);
            double ad = static_cast<double>(g[j]);
            double fdd = static_cast<double>(fd);
            double err = std::abs(ad - fdd);
            double bound = rtol * std::max(std::abs(ad), std::abs(fdd)) + atol;
            INFO("coordinate " << j << ": analytic " << ad << " vs finite-difference " << fdd);
            CHECK(err <= bound);
            ++st.checked;
            st.worst_abs_err = std::max(st.worst_abs_err, err);
        }
    }
    return st;
}

template <class T>
prue::Tensor<T> random_tensor(prue::Shape shape, prue::Rng& rng, T lo = T(-1), T hi = T(1),
                              bool requires_grad = false) {
    std::vector<T> v(prue::numel(shape));
    for (auto& x : v) x = lo + static_cast<T>(rng.next_double()) * (hi - lo);
    auto t = prue::Tensor<T>::from_vector(std::move(shape), std::move(v));
    t.set_requires_grad(requires_grad);
    return t;
}

}  // namespace prue_test
