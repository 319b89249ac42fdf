#pragma once

#include <cmath>
#include <cstdint>

#include "xmtl/array.hpp"
#include "xmtl/error.hpp"

namespace xmtl {

// Bias-corrected Adam for one parameter array. The step counter is shared
// across a whole parameter set by the caller stepping every state once per
// update.
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    Array m;  // first moment, matches parameter shape
    Array v;  // second moment
    std::uint64_t step = 0;

    explicit AdamState(const Shape& shape, double lr_ = 1e-4)
        : lr(lr_), m(shape), v(shape) {}
};

inline Array adam_step(AdamState& state, const Array& params, const Array& grads) {
    if (!params.same_shape(grads))
        throw ShapeMismatch("adam params " + shape_str(params.shape()) + " vs grads " +
                            shape_str(grads.shape()));
    if (!state.m.same_shape(params))
        throw ShapeMismatch("adam moments " + shape_str(state.m.shape()) + " vs params " +
                            shape_str(params.shape()));
    if (!grads.all_finite()) throw NonFiniteGradient("adam_step");

    state.step += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step));

    Array out = params;
    for (std::size_t i = 0; i < params.numel(); ++i) {
        const double g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        const double mhat = state.m[i] / corr1;
        const double vhat = state.v[i] / corr2;
        out[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    return out;
}

}  // namespace xmtl
