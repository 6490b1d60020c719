#pragma once

// Central-difference gradient checking helpers shared by the numeric tests.

#include <functional>

#include "dive/tensor.hpp"

namespace dive::testing {

// d loss / d x for every element of x, via central differences.
inline Tensor fd_gradient(const std::function<Scalar()>& loss, Tensor& x, Scalar h = 1e-3) {
    Tensor g = Tensor::zeros(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) {
        const Scalar orig = x.data[i];
        x.data[i] = orig + h;
        const Scalar lp = loss();
        x.data[i] = orig - h;
        const Scalar lm = loss();
        x.data[i] = orig;
        g.data[i] = (lp - lm) / (2.0 * h);
    }
    return g;
}

// max_i |a_i - b_i| / max(1e-8, |a_i|, |b_i|)
inline Scalar max_rel_err(const Tensor& a, const Tensor& b) {
    Scalar worst = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const Scalar denom = std::max({1e-8, std::abs(a.data[i]), std::abs(b.data[i])});
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / denom);
    }
    return worst;
}

}  // namespace dive::testing
