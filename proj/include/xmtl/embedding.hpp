#pragma once

#include <cmath>
#include <cstddef>

#include "xmtl/array.hpp"
#include "xmtl/error.hpp"

namespace xmtl {

// How a raw encoder tap is squashed onto the simplex / hypersphere. Softmax
// runs over all q*t elements jointly; the l2 variant rescales the softmax
// output to unit Euclidean norm.
enum class EmbedNorm { Softmax, SoftmaxL2 };

struct Embedding {
    Array values;  // q x t, normalized
    EmbedNorm mode = EmbedNorm::SoftmaxL2;
    double presquash_norm = 1.0;  // ||softmax||_2 before the l2 rescale
};

inline Embedding normalize_embedding(const Array& raw, EmbedNorm mode = EmbedNorm::SoftmaxL2) {
    if (raw.rank() != 2) throw ShapeMismatch("embedding tap must be a q x t matrix");
    Embedding e;
    e.mode = mode;
    e.values = Array(raw.shape());
    const std::size_t n = raw.numel();
    double hi = raw[0];
    for (std::size_t i = 1; i < n; ++i) hi = std::max(hi, raw[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        e.values[i] = std::exp(raw[i] - hi);
        sum += e.values[i];
    }
    for (std::size_t i = 0; i < n; ++i) e.values[i] /= sum;
    if (mode == EmbedNorm::SoftmaxL2) {
        double sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) sq += e.values[i] * e.values[i];
        e.presquash_norm = std::sqrt(sq);
        for (std::size_t i = 0; i < n; ++i) e.values[i] /= e.presquash_norm;
    }
    return e;
}

// Pull a gradient on the normalized values back to the raw tap.
inline Array normalize_backward(const Embedding& e, const Array& grad_values) {
    if (!e.values.same_shape(grad_values)) throw ShapeMismatch("embedding gradient shape");
    const std::size_t n = e.values.numel();
    Array gs(grad_values.shape());  // gradient w.r.t. the softmax output s
    if (e.mode == EmbedNorm::SoftmaxL2) {
        // y = s / r with r treated via r = ||s||: dL/ds = (g - <g,y> y) / r.
        double gy = 0.0;
        for (std::size_t i = 0; i < n; ++i) gy += grad_values[i] * e.values[i];
        for (std::size_t i = 0; i < n; ++i)
            gs[i] = (grad_values[i] - gy * e.values[i]) / e.presquash_norm;
    } else {
        for (std::size_t i = 0; i < n; ++i) gs[i] = grad_values[i];
    }
    // s = softmax(z): dL/dz = s (gs - <gs, s>).
    Array s(e.values.shape());
    for (std::size_t i = 0; i < n; ++i)
        s[i] = e.mode == EmbedNorm::SoftmaxL2 ? e.values[i] * e.presquash_norm : e.values[i];
    double inner = 0.0;
    for (std::size_t i = 0; i < n; ++i) inner += gs[i] * s[i];
    Array gz(grad_values.shape());
    for (std::size_t i = 0; i < n; ++i) gz[i] = s[i] * (gs[i] - inner);
    return gz;
}

}  // namespace xmtl
