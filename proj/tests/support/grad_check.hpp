#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "support/fd.hpp"
#include "xmtl/layers.hpp"
#include "xmtl/rng.hpp"

namespace xmtl::testing {

inline Array random_array(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Array a(std::move(shape));
    for (std::size_t i = 0; i < a.numel(); ++i) a[i] = rng.uniform(lo, hi);
    return a;
}

// Scalar probe: sum of a fixed random weighting of the model output, plus a
// weighting of the embedding values when the model has a tap. Deterministic
// given x and the store, so finite differences are well defined.
struct Probe {
    ModelSpec model;
    ParamStore store;
    Array weights;             // matches output shape
    Array emb_weights;         // matches per-sample embedding shape, may be empty
    bool train = true;
    std::uint64_t drop_seed = 9000;

    double operator()(const Array& x) {
        Rng rng(drop_seed);
        const Forward fw = forward(model, store, x, train, &rng);
        double acc = 0.0;
        for (std::size_t i = 0; i < fw.output.numel(); ++i) acc += weights[i] * fw.output[i];
        if (emb_weights.numel() > 0)
            for (const Embedding& e : fw.tape.embeddings)
                for (std::size_t i = 0; i < e.values.numel(); ++i) acc += emb_weights[i] * e.values[i];
        return acc;
    }

    // Analytic gradients for the same scalar.
    Backward run_backward(const Array& x) {
        Rng rng(drop_seed);
        const Forward fw = forward(model, store, x, train, &rng);
        std::vector<Array> eg;
        const std::vector<Array>* egp = nullptr;
        if (emb_weights.numel() > 0) {
            eg.assign(fw.tape.embeddings.size(), emb_weights);
            egp = &eg;
        }
        return backward(model, store, fw.tape, weights, egp);
    }

    double param_probe(const std::string& name, const Array& value, const Array& x) {
        const Array saved = store.params.at(name);
        store.params.at(name) = value;
        const double out = (*this)(x);
        store.params.at(name) = saved;
        return out;
    }
};

inline Probe make_probe(Rng& rng, ModelSpec model) {
    Probe p;
    p.model = std::move(model);
    init_params(p.model, p.store, rng);
    // Randomize the affine norm parameters so their gradients are generic.
    for (auto& [name, arr] : p.store.params)
        if (name.find(".gamma") != std::string::npos)
            for (std::size_t i = 0; i < arr.numel(); ++i) arr[i] = rng.uniform(0.5, 1.5);
    return p;
}

// Runs `trials` random instances of the model, comparing the analytic input
// and parameter gradients against finite differences. Each comparison is
// handed to `report` with a short context string, so callers decide how to
// assert or aggregate.
inline void layer_grad_trials(Rng& rng, const ModelSpec& model, const Shape& batched_in,
                              int trials, bool with_tap,
                              const std::function<void(const std::string&, double)>& report) {
    for (int trial = 0; trial < trials; ++trial) {
        Probe p = make_probe(rng, model);
        const Array x = random_array(rng, batched_in);
        Shape out_ps = p.model.input_shape;
        for (const auto& layer : p.model.layers) out_ps = layer_out_shape(layer, out_ps);
        Shape out_shape{batched_in[0]};
        out_shape.insert(out_shape.end(), out_ps.begin(), out_ps.end());
        p.weights = random_array(rng, out_shape);
        if (with_tap) {
            Shape tap = model_tap_shape(p.model);
            std::size_t per = 1;
            for (std::size_t d : tap) per *= d;
            p.emb_weights = p.model.tap_preserve_time && tap.size() == 2
                                ? random_array(rng, tap)
                                : random_array(rng, Shape{per, 1});
        }

        const Backward bw = p.run_backward(x);
        const Array fd_in = testing::fd_gradient([&](const Array& v) { return p(v); }, x);
        report("trial " + std::to_string(trial) + " input grad",
               testing::max_rel_err(bw.input_grad, fd_in));

        for (const auto& [name, analytic] : bw.grads) {
            const Array fd = testing::fd_gradient(
                [&](const Array& v) { return p.param_probe(name, v, x); }, p.store.params.at(name));
            report("trial " + std::to_string(trial) + " param " + name,
                   testing::max_rel_err(analytic, fd));
        }
    }
}

}  // namespace xmtl::testing
