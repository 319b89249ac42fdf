#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xmtl/array.hpp"
#include "xmtl/embedding.hpp"
#include "xmtl/error.hpp"
#include "xmtl/rng.hpp"

namespace xmtl {

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

// Batched layouts: vectors are {N,D}, 1-D feature maps {N,C,T}, images
// {N,C,H,W}. Per-sample shapes drop the leading N.
struct LayerSpec {
    enum class Kind {
        Conv1d,
        Conv2d,
        MaxPool1d,
        MaxPool2d,
        BatchNorm,
        LayerNorm,
        Dropout,
        Dense,
        Lstm,
        Relu,
        Elu,
        Softmax,
        Reshape,
    };
    Kind kind;
    std::string name;       // parameter prefix; shared names mean shared parameters
    std::size_t units = 0;  // conv filters, dense width, lstm units
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t pool = 0;
    double rate = 0.0;
    Shape target;  // reshape only, per-sample
};

inline LayerSpec conv1d(std::string name, std::size_t filters, std::size_t kernel, std::size_t stride = 1) {
    LayerSpec s{LayerSpec::Kind::Conv1d, std::move(name)};
    s.units = filters;
    s.kernel = kernel;
    s.stride = stride;
    return s;
}
inline LayerSpec conv2d(std::string name, std::size_t filters, std::size_t kernel, std::size_t stride = 1) {
    LayerSpec s{LayerSpec::Kind::Conv2d, std::move(name)};
    s.units = filters;
    s.kernel = kernel;
    s.stride = stride;
    return s;
}
inline LayerSpec maxpool1d(std::size_t pool) {
    LayerSpec s{LayerSpec::Kind::MaxPool1d};
    s.pool = pool;
    return s;
}
inline LayerSpec maxpool2d(std::size_t pool) {
    LayerSpec s{LayerSpec::Kind::MaxPool2d};
    s.pool = pool;
    return s;
}
inline LayerSpec batchnorm(std::string name) { return {LayerSpec::Kind::BatchNorm, std::move(name)}; }
inline LayerSpec layernorm(std::string name) { return {LayerSpec::Kind::LayerNorm, std::move(name)}; }
inline LayerSpec dropout(double rate) {
    LayerSpec s{LayerSpec::Kind::Dropout};
    s.rate = rate;
    return s;
}
inline LayerSpec dense(std::string name, std::size_t units) {
    LayerSpec s{LayerSpec::Kind::Dense, std::move(name)};
    s.units = units;
    return s;
}
inline LayerSpec lstm(std::string name, std::size_t units) {
    LayerSpec s{LayerSpec::Kind::Lstm, std::move(name)};
    s.units = units;
    return s;
}
inline LayerSpec relu() { return {LayerSpec::Kind::Relu}; }
inline LayerSpec elu() { return {LayerSpec::Kind::Elu}; }
inline LayerSpec softmax() { return {LayerSpec::Kind::Softmax}; }
inline LayerSpec reshape(Shape target) {
    LayerSpec s{LayerSpec::Kind::Reshape};
    s.target = std::move(target);
    return s;
}

struct ModelSpec {
    std::vector<LayerSpec> layers;
    Shape input_shape;                   // per sample
    std::size_t tap = SIZE_MAX;          // layer index exported as embedding; SIZE_MAX = none
    EmbedNorm embed_norm = EmbedNorm::SoftmaxL2;
    bool tap_preserve_time = false;      // keep (C,T) at the tap instead of flattening to (C*T,1)
};

// Per-sample output shape of one layer.
inline Shape layer_out_shape(const LayerSpec& layer, const Shape& in) {
    using K = LayerSpec::Kind;
    const auto ceil_div = [](std::size_t a, std::size_t b) { return (a + b - 1) / b; };
    switch (layer.kind) {
        case K::Conv1d:
            if (in.size() != 2) throw ShapeMismatch("conv1d wants {C,T} per sample");
            return {layer.units, ceil_div(in[1], layer.stride)};
        case K::Conv2d:
            if (in.size() != 3) throw ShapeMismatch("conv2d wants {C,H,W} per sample");
            return {layer.units, ceil_div(in[1], layer.stride), ceil_div(in[2], layer.stride)};
        case K::MaxPool1d:
            if (in.size() != 2 || in[1] / layer.pool == 0) throw ShapeMismatch("maxpool1d input too short");
            return {in[0], in[1] / layer.pool};
        case K::MaxPool2d:
            if (in.size() != 3 || in[1] / layer.pool == 0 || in[2] / layer.pool == 0)
                throw ShapeMismatch("maxpool2d input too small");
            return {in[0], in[1] / layer.pool, in[2] / layer.pool};
        case K::Dense:
            if (in.size() != 1) throw ShapeMismatch("dense wants flat {D} per sample");
            return {layer.units};
        case K::Lstm:
            if (in.size() != 2) throw ShapeMismatch("lstm wants {C,T} per sample");
            return {layer.units};
        case K::Softmax:
            if (in.size() != 1) throw ShapeMismatch("softmax head wants flat {D} per sample");
            return in;
        case K::Reshape: {
            std::size_t need = 1, have = 1;
            for (std::size_t d : layer.target) need *= d;
            for (std::size_t d : in) have *= d;
            if (need != have) throw ShapeMismatch("reshape changes element count");
            return layer.target;
        }
        default:
            return in;
    }
}

inline Shape model_tap_shape(const ModelSpec& m) {
    Shape s = m.input_shape;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        s = layer_out_shape(m.layers[i], s);
        if (i == m.tap) return s;
    }
    throw ConfigError("model has no tap layer");
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

using GradMap = std::map<std::string, Array>;

struct ParamStore {
    std::map<std::string, Array> params;
    std::map<std::string, Array> state;  // batchnorm running statistics
    std::uint64_t version = 0;

    Array& at(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw ConfigError("missing parameter '" + name + "'");
        return it->second;
    }
    const Array& at(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw ConfigError("missing parameter '" + name + "'");
        return it->second;
    }
    void bump() { ++version; }
};

namespace detail {

inline Array glorot(Rng& rng, const Shape& shape, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Array w(shape);
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-limit, limit);
    return w;
}

inline void ensure_param(ParamStore& store, const std::string& name, Array value) {
    store.params.emplace(name, std::move(value));  // shared names keep the first init
}

inline std::size_t flat_count(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

}  // namespace detail

// Creates any missing parameters for the model. Parameters already present
// under the same name (a shared head initialized by a sibling model) are left
// untouched, so both branches agree on the shared weights.
inline void init_params(const ModelSpec& m, ParamStore& store, Rng& rng) {
    using K = LayerSpec::Kind;
    Shape in = m.input_shape;
    for (const LayerSpec& layer : m.layers) {
        const Shape out = layer_out_shape(layer, in);
        switch (layer.kind) {
            case K::Conv1d: {
                const std::size_t cin = in[0], k = layer.kernel;
                detail::ensure_param(store, layer.name + ".W",
                                     detail::glorot(rng, {layer.units, cin, k}, cin * k, layer.units * k));
                detail::ensure_param(store, layer.name + ".b", Array({layer.units}, 0.0));
                break;
            }
            case K::Conv2d: {
                const std::size_t cin = in[0], k = layer.kernel;
                detail::ensure_param(store, layer.name + ".W",
                                     detail::glorot(rng, {layer.units, cin, k, k}, cin * k * k, layer.units * k * k));
                detail::ensure_param(store, layer.name + ".b", Array({layer.units}, 0.0));
                break;
            }
            case K::Dense: {
                const std::size_t din = in[0];
                detail::ensure_param(store, layer.name + ".W",
                                     detail::glorot(rng, {layer.units, din}, din, layer.units));
                detail::ensure_param(store, layer.name + ".b", Array({layer.units}, 0.0));
                break;
            }
            case K::Lstm: {
                const std::size_t cin = in[0], u = layer.units;
                for (const char* gate : {"i", "f", "g", "o"}) {
                    detail::ensure_param(store, layer.name + ".W" + gate, detail::glorot(rng, {u, cin}, cin, u));
                    detail::ensure_param(store, layer.name + ".U" + gate, detail::glorot(rng, {u, u}, u, u));
                    detail::ensure_param(store, layer.name + ".b" + gate,
                                         Array({u}, gate[0] == 'f' ? 1.0 : 0.0));
                }
                break;
            }
            case K::BatchNorm: {
                const std::size_t c = in[0];
                detail::ensure_param(store, layer.name + ".gamma", Array({c}, 1.0));
                detail::ensure_param(store, layer.name + ".beta", Array({c}, 0.0));
                store.state.emplace(layer.name + ".rmean", Array({c}, 0.0));
                store.state.emplace(layer.name + ".rvar", Array({c}, 1.0));
                break;
            }
            case K::LayerNorm: {
                const std::size_t d = detail::flat_count(in);
                detail::ensure_param(store, layer.name + ".gamma", Array({d}, 1.0));
                detail::ensure_param(store, layer.name + ".beta", Array({d}, 0.0));
                break;
            }
            default:
                break;
        }
        in = out;
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct LayerTape {
    Array input;              // batched input to the layer
    std::vector<Array> aux;   // kind-specific caches
};

struct Tape {
    std::uint64_t version = 0;
    bool train = false;
    std::size_t batch = 0;
    std::vector<LayerTape> layers;
    Array tap_raw;                     // batched raw tap output
    std::vector<Embedding> embeddings; // per-sample normalized taps
};

struct Forward {
    Array output;
    Tape tape;
};

namespace detail {

struct Padding {
    std::size_t left = 0;
    std::size_t out = 0;
};

// Keras-style same padding: out = ceil(in/stride), pad split left-biased low.
inline Padding same_pad(std::size_t in, std::size_t kernel, std::size_t stride) {
    Padding p;
    p.out = (in + stride - 1) / stride;
    const std::size_t span = (p.out - 1) * stride + kernel;
    p.left = span > in ? (span - in) / 2 : 0;
    return p;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Channel geometry shared by batchnorm: {N,D} has D channels of width 1,
// {N,C,...} has C channels spanning the trailing dims.
struct ChannelView {
    std::size_t batch, channels, inner;
};
inline ChannelView channel_view(const Array& x) {
    if (x.rank() < 2) throw ShapeMismatch("batchnorm wants a batched input");
    ChannelView v{x.dim(0), x.dim(1), 1};
    for (std::size_t d = 2; d < x.rank(); ++d) v.inner *= x.dim(d);
    return v;
}

}  // namespace detail

inline Forward forward(const ModelSpec& m, ParamStore& store, const Array& input, bool train,
                       Rng* rng = nullptr) {
    using K = LayerSpec::Kind;
    if (input.rank() != m.input_shape.size() + 1) throw ShapeMismatch("model input rank");
    for (std::size_t d = 0; d < m.input_shape.size(); ++d)
        if (input.dim(d + 1) != m.input_shape[d]) throw ShapeMismatch("model input shape");
    const std::size_t N = input.dim(0);
    if (N == 0) throw EmptyBatch("forward on empty batch");

    Forward fw;
    fw.tape.version = store.version;
    fw.tape.train = train;
    fw.tape.batch = N;
    Array x = input;

    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        const LayerSpec& layer = m.layers[li];
        LayerTape lt;
        lt.input = x;
        Shape per_sample(x.shape().begin() + 1, x.shape().end());
        const Shape out_ps = layer_out_shape(layer, per_sample);
        Shape out_shape{N};
        out_shape.insert(out_shape.end(), out_ps.begin(), out_ps.end());
        Array y(out_shape);

        switch (layer.kind) {
            case K::Conv1d: {
                const std::size_t cin = x.dim(1), T = x.dim(2);
                const auto pad = detail::same_pad(T, layer.kernel, layer.stride);
                const Array& W = store.at(layer.name + ".W");
                const Array& b = store.at(layer.name + ".b");
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t co = 0; co < layer.units; ++co)
                        for (std::size_t t = 0; t < pad.out; ++t) {
                            double acc = b[co];
                            for (std::size_t ci = 0; ci < cin; ++ci)
                                for (std::size_t j = 0; j < layer.kernel; ++j) {
                                    const std::ptrdiff_t pos =
                                        static_cast<std::ptrdiff_t>(t * layer.stride + j) -
                                        static_cast<std::ptrdiff_t>(pad.left);
                                    if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(T)) continue;
                                    acc += W[(co * cin + ci) * layer.kernel + j] *
                                           x[(n * cin + ci) * T + static_cast<std::size_t>(pos)];
                                }
                            y[(n * layer.units + co) * pad.out + t] = acc;
                        }
                break;
            }
            case K::Conv2d: {
                const std::size_t cin = x.dim(1), H = x.dim(2), Wd = x.dim(3);
                const auto ph = detail::same_pad(H, layer.kernel, layer.stride);
                const auto pw = detail::same_pad(Wd, layer.kernel, layer.stride);
                const Array& W = store.at(layer.name + ".W");
                const Array& b = store.at(layer.name + ".b");
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t co = 0; co < layer.units; ++co)
                        for (std::size_t oy = 0; oy < ph.out; ++oy)
                            for (std::size_t ox = 0; ox < pw.out; ++ox) {
                                double acc = b[co];
                                for (std::size_t ci = 0; ci < cin; ++ci)
                                    for (std::size_t jy = 0; jy < layer.kernel; ++jy)
                                        for (std::size_t jx = 0; jx < layer.kernel; ++jx) {
                                            const std::ptrdiff_t py =
                                                static_cast<std::ptrdiff_t>(oy * layer.stride + jy) -
                                                static_cast<std::ptrdiff_t>(ph.left);
                                            const std::ptrdiff_t px =
                                                static_cast<std::ptrdiff_t>(ox * layer.stride + jx) -
                                                static_cast<std::ptrdiff_t>(pw.left);
                                            if (py < 0 || py >= static_cast<std::ptrdiff_t>(H) || px < 0 ||
                                                px >= static_cast<std::ptrdiff_t>(Wd))
                                                continue;
                                            acc += W[((co * cin + ci) * layer.kernel + jy) * layer.kernel + jx] *
                                                   x[((n * cin + ci) * H + static_cast<std::size_t>(py)) * Wd +
                                                     static_cast<std::size_t>(px)];
                                        }
                                y[((n * layer.units + co) * ph.out + oy) * pw.out + ox] = acc;
                            }
                break;
            }
            case K::MaxPool1d: {
                const std::size_t C = x.dim(1), T = x.dim(2), To = T / layer.pool;
                Array arg(y.shape());
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t t = 0; t < To; ++t) {
                            std::size_t best = t * layer.pool;
                            for (std::size_t j = 1; j < layer.pool; ++j)
                                if (x[(n * C + c) * T + t * layer.pool + j] > x[(n * C + c) * T + best])
                                    best = t * layer.pool + j;
                            y[(n * C + c) * To + t] = x[(n * C + c) * T + best];
                            arg[(n * C + c) * To + t] = static_cast<double>(best);
                        }
                lt.aux.push_back(std::move(arg));
                break;
            }
            case K::MaxPool2d: {
                const std::size_t C = x.dim(1), H = x.dim(2), Wd = x.dim(3);
                const std::size_t Ho = H / layer.pool, Wo = Wd / layer.pool;
                Array arg(y.shape());
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t oy = 0; oy < Ho; ++oy)
                            for (std::size_t ox = 0; ox < Wo; ++ox) {
                                std::size_t best = (oy * layer.pool) * Wd + ox * layer.pool;
                                for (std::size_t jy = 0; jy < layer.pool; ++jy)
                                    for (std::size_t jx = 0; jx < layer.pool; ++jx) {
                                        const std::size_t pos =
                                            (oy * layer.pool + jy) * Wd + ox * layer.pool + jx;
                                        if (x[(n * C + c) * H * Wd + pos] > x[(n * C + c) * H * Wd + best])
                                            best = pos;
                                    }
                                y[((n * C + c) * Ho + oy) * Wo + ox] = x[(n * C + c) * H * Wd + best];
                                arg[((n * C + c) * Ho + oy) * Wo + ox] = static_cast<double>(best);
                            }
                lt.aux.push_back(std::move(arg));
                break;
            }
            case K::BatchNorm: {
                const auto v = detail::channel_view(x);
                const Array& gamma = store.at(layer.name + ".gamma");
                const Array& beta = store.at(layer.name + ".beta");
                Array xhat(x.shape());
                Array inv_std(Shape{v.channels});
                const double M = static_cast<double>(v.batch * v.inner);
                if (train) {
                    Array& rmean = store.state.at(layer.name + ".rmean");
                    Array& rvar = store.state.at(layer.name + ".rvar");
                    for (std::size_t c = 0; c < v.channels; ++c) {
                        double mean = 0.0;
                        for (std::size_t n = 0; n < v.batch; ++n)
                            for (std::size_t i = 0; i < v.inner; ++i)
                                mean += x[(n * v.channels + c) * v.inner + i];
                        mean /= M;
                        double var = 0.0;
                        for (std::size_t n = 0; n < v.batch; ++n)
                            for (std::size_t i = 0; i < v.inner; ++i) {
                                const double d = x[(n * v.channels + c) * v.inner + i] - mean;
                                var += d * d;
                            }
                        var /= M;
                        inv_std[c] = 1.0 / std::sqrt(var + 1e-5);
                        for (std::size_t n = 0; n < v.batch; ++n)
                            for (std::size_t i = 0; i < v.inner; ++i) {
                                const std::size_t at = (n * v.channels + c) * v.inner + i;
                                xhat[at] = (x[at] - mean) * inv_std[c];
                                y[at] = gamma[c] * xhat[at] + beta[c];
                            }
                        rmean[c] = 0.9 * rmean[c] + 0.1 * mean;
                        rvar[c] = 0.9 * rvar[c] + 0.1 * var;
                    }
                } else {
                    const Array& rmean = store.state.at(layer.name + ".rmean");
                    const Array& rvar = store.state.at(layer.name + ".rvar");
                    for (std::size_t c = 0; c < v.channels; ++c) {
                        inv_std[c] = 1.0 / std::sqrt(rvar[c] + 1e-5);
                        for (std::size_t n = 0; n < v.batch; ++n)
                            for (std::size_t i = 0; i < v.inner; ++i) {
                                const std::size_t at = (n * v.channels + c) * v.inner + i;
                                xhat[at] = (x[at] - rmean[c]) * inv_std[c];
                                y[at] = gamma[c] * xhat[at] + beta[c];
                            }
                    }
                }
                lt.aux.push_back(std::move(xhat));
                lt.aux.push_back(std::move(inv_std));
                break;
            }
            case K::LayerNorm: {
                const std::size_t D = x.numel() / N;
                const Array& gamma = store.at(layer.name + ".gamma");
                const Array& beta = store.at(layer.name + ".beta");
                Array xhat(x.shape());
                Array inv_std(Shape{N});
                for (std::size_t n = 0; n < N; ++n) {
                    double mean = 0.0;
                    for (std::size_t d = 0; d < D; ++d) mean += x[n * D + d];
                    mean /= static_cast<double>(D);
                    double var = 0.0;
                    for (std::size_t d = 0; d < D; ++d) {
                        const double diff = x[n * D + d] - mean;
                        var += diff * diff;
                    }
                    var /= static_cast<double>(D);
                    inv_std[n] = 1.0 / std::sqrt(var + 1e-5);
                    for (std::size_t d = 0; d < D; ++d) {
                        xhat[n * D + d] = (x[n * D + d] - mean) * inv_std[n];
                        y[n * D + d] = gamma[d] * xhat[n * D + d] + beta[d];
                    }
                }
                lt.aux.push_back(std::move(xhat));
                lt.aux.push_back(std::move(inv_std));
                break;
            }
            case K::Dropout: {
                if (!train || layer.rate == 0.0) {
                    y = x;
                    break;
                }
                if (!rng) throw MissingRng("dropout in train mode needs an rng");
                Array mask(x.shape());
                const double keep = 1.0 - layer.rate;
                for (std::size_t i = 0; i < x.numel(); ++i) {
                    mask[i] = rng->uniform() < keep ? 1.0 / keep : 0.0;
                    y[i] = x[i] * mask[i];
                }
                lt.aux.push_back(std::move(mask));
                break;
            }
            case K::Dense: {
                const std::size_t din = x.dim(1);
                const Array& W = store.at(layer.name + ".W");
                const Array& b = store.at(layer.name + ".b");
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t o = 0; o < layer.units; ++o) {
                        double acc = b[o];
                        for (std::size_t i = 0; i < din; ++i) acc += W[o * din + i] * x[n * din + i];
                        y[n * layer.units + o] = acc;
                    }
                break;
            }
            case K::Lstm: {
                const std::size_t C = x.dim(1), T = x.dim(2), U = layer.units;
                const Array *W[4], *Uw[4], *b[4];
                const char* gates = "ifgo";
                for (int g = 0; g < 4; ++g) {
                    W[g] = &store.at(layer.name + ".W" + gates[g]);
                    Uw[g] = &store.at(layer.name + ".U" + gates[g]);
                    b[g] = &store.at(layer.name + ".b" + gates[g]);
                }
                Array h(Shape{T + 1, N, U});  // h[0] = 0
                Array cst(Shape{T + 1, N, U});
                Array acts(Shape{T, 4, N, U});  // post-nonlinearity gate values
                for (std::size_t t = 0; t < T; ++t) {
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t u = 0; u < U; ++u) {
                            double pre[4];
                            for (int g = 0; g < 4; ++g) {
                                double acc = (*b[g])[u];
                                for (std::size_t c = 0; c < C; ++c)
                                    acc += (*W[g])[u * C + c] * x[(n * C + c) * T + t];
                                for (std::size_t v2 = 0; v2 < U; ++v2)
                                    acc += (*Uw[g])[u * U + v2] * h[(t * N + n) * U + v2];
                                pre[g] = acc;
                            }
                            const double ig = detail::sigmoid(pre[0]);
                            const double fg = detail::sigmoid(pre[1]);
                            const double gg = std::tanh(pre[2]);
                            const double og = detail::sigmoid(pre[3]);
                            const double cprev = cst[(t * N + n) * U + u];
                            const double cnew = fg * cprev + ig * gg;
                            cst[((t + 1) * N + n) * U + u] = cnew;
                            h[((t + 1) * N + n) * U + u] = og * std::tanh(cnew);
                            acts[((t * 4 + 0) * N + n) * U + u] = ig;
                            acts[((t * 4 + 1) * N + n) * U + u] = fg;
                            acts[((t * 4 + 2) * N + n) * U + u] = gg;
                            acts[((t * 4 + 3) * N + n) * U + u] = og;
                        }
                }
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t u = 0; u < U; ++u) y[n * U + u] = h[(T * N + n) * U + u];
                lt.aux.push_back(std::move(h));
                lt.aux.push_back(std::move(cst));
                lt.aux.push_back(std::move(acts));
                break;
            }
            case K::Relu:
                for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
                break;
            case K::Elu:
                for (std::size_t i = 0; i < x.numel(); ++i)
                    y[i] = x[i] > 0.0 ? x[i] : std::expm1(x[i]);
                break;
            case K::Softmax: {
                const std::size_t D = x.dim(1);
                for (std::size_t n = 0; n < N; ++n) {
                    double hi = x[n * D];
                    for (std::size_t d = 1; d < D; ++d) hi = std::max(hi, x[n * D + d]);
                    double sum = 0.0;
                    for (std::size_t d = 0; d < D; ++d) {
                        y[n * D + d] = std::exp(x[n * D + d] - hi);
                        sum += y[n * D + d];
                    }
                    for (std::size_t d = 0; d < D; ++d) y[n * D + d] /= sum;
                }
                lt.aux.push_back(y);
                break;
            }
            case K::Reshape:
                y = x.reshaped(out_shape);
                break;
        }

        fw.tape.layers.push_back(std::move(lt));
        x = std::move(y);
        if (li == m.tap) {
            fw.tape.tap_raw = x;
            const std::size_t per = x.numel() / N;
            Shape emb_shape;
            if (m.tap_preserve_time && x.rank() == 3)
                emb_shape = {x.dim(1), x.dim(2)};
            else
                emb_shape = {per, 1};
            for (std::size_t n = 0; n < N; ++n) {
                Array raw(emb_shape);
                for (std::size_t i = 0; i < per; ++i) raw[i] = x[n * per + i];
                fw.tape.embeddings.push_back(normalize_embedding(raw, m.embed_norm));
            }
        }
    }
    fw.output = std::move(x);
    if (!fw.output.all_finite()) throw NonFiniteLoss("forward produced non-finite activations");
    return fw;
}

struct Backward {
    GradMap grads;
    Array input_grad;
};

// Reverse walk over the tape. `embedding_grads`, when given, hold per-sample
// gradients on the normalized embedding values; they are pulled through the
// normalization and added where the tap was taken.
inline Backward backward(const ModelSpec& m, const ParamStore& store, const Tape& tape,
                         const Array& output_grad,
                         const std::vector<Array>* embedding_grads = nullptr) {
    using K = LayerSpec::Kind;
    if (tape.version != store.version) throw StaleTape("parameters changed since forward");
    if (tape.layers.size() != m.layers.size()) throw StaleTape("tape does not match model");
    const std::size_t N = tape.batch;

    Backward bw;
    Array g = output_grad;

    const auto grad_slot = [&](const std::string& name) -> Array& {
        auto it = bw.grads.find(name);
        if (it == bw.grads.end()) it = bw.grads.emplace(name, Array(store.at(name).shape())).first;
        return it->second;
    };

    for (std::size_t li = m.layers.size(); li-- > 0;) {
        const LayerSpec& layer = m.layers[li];
        const LayerTape& lt = tape.layers[li];
        const Array& x = lt.input;

        if (li == m.tap && embedding_grads) {
            if (embedding_grads->size() != N) throw ShapeMismatch("one embedding gradient per sample");
            const std::size_t per = g.numel() / N;
            for (std::size_t n = 0; n < N; ++n) {
                const Array raw = normalize_backward(tape.embeddings[n], (*embedding_grads)[n]);
                for (std::size_t i = 0; i < per; ++i) g[n * per + i] += raw[i];
            }
        }

        Array gx(x.shape());
        switch (layer.kind) {
            case K::Conv1d: {
                const std::size_t cin = x.dim(1), T = x.dim(2);
                const auto pad = detail::same_pad(T, layer.kernel, layer.stride);
                const Array& W = store.at(layer.name + ".W");
                Array& gW = grad_slot(layer.name + ".W");
                Array& gb = grad_slot(layer.name + ".b");
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t co = 0; co < layer.units; ++co)
                        for (std::size_t t = 0; t < pad.out; ++t) {
                            const double go = g[(n * layer.units + co) * pad.out + t];
                            gb[co] += go;
                            for (std::size_t ci = 0; ci < cin; ++ci)
                                for (std::size_t j = 0; j < layer.kernel; ++j) {
                                    const std::ptrdiff_t pos =
                                        static_cast<std::ptrdiff_t>(t * layer.stride + j) -
                                        static_cast<std::ptrdiff_t>(pad.left);
                                    if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(T)) continue;
                                    const std::size_t xi = (n * cin + ci) * T + static_cast<std::size_t>(pos);
                                    gW[(co * cin + ci) * layer.kernel + j] += go * x[xi];
                                    gx[xi] += go * W[(co * cin + ci) * layer.kernel + j];
                                }
                        }
                break;
            }
            case K::Conv2d: {
                const std::size_t cin = x.dim(1), H = x.dim(2), Wd = x.dim(3);
                const auto ph = detail::same_pad(H, layer.kernel, layer.stride);
                const auto pw = detail::same_pad(Wd, layer.kernel, layer.stride);
                const Array& W = store.at(layer.name + ".W");
                Array& gW = grad_slot(layer.name + ".W");
                Array& gb = grad_slot(layer.name + ".b");
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t co = 0; co < layer.units; ++co)
                        for (std::size_t oy = 0; oy < ph.out; ++oy)
                            for (std::size_t ox = 0; ox < pw.out; ++ox) {
                                const double go = g[((n * layer.units + co) * ph.out + oy) * pw.out + ox];
                                gb[co] += go;
                                for (std::size_t ci = 0; ci < cin; ++ci)
                                    for (std::size_t jy = 0; jy < layer.kernel; ++jy)
                                        for (std::size_t jx = 0; jx < layer.kernel; ++jx) {
                                            const std::ptrdiff_t py =
                                                static_cast<std::ptrdiff_t>(oy * layer.stride + jy) -
                                                static_cast<std::ptrdiff_t>(ph.left);
                                            const std::ptrdiff_t px =
                                                static_cast<std::ptrdiff_t>(ox * layer.stride + jx) -
                                                static_cast<std::ptrdiff_t>(pw.left);
                                            if (py < 0 || py >= static_cast<std::ptrdiff_t>(H) || px < 0 ||
                                                px >= static_cast<std::ptrdiff_t>(Wd))
                                                continue;
                                            const std::size_t xi =
                                                ((n * cin + ci) * H + static_cast<std::size_t>(py)) * Wd +
                                                static_cast<std::size_t>(px);
                                            const std::size_t wi =
                                                ((co * cin + ci) * layer.kernel + jy) * layer.kernel + jx;
                                            gW[wi] += go * x[xi];
                                            gx[xi] += go * W[wi];
                                        }
                            }
                break;
            }
            case K::MaxPool1d: {
                const std::size_t C = x.dim(1), T = x.dim(2), To = T / layer.pool;
                const Array& arg = lt.aux[0];
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t t = 0; t < To; ++t)
                            gx[(n * C + c) * T + static_cast<std::size_t>(arg[(n * C + c) * To + t])] +=
                                g[(n * C + c) * To + t];
                break;
            }
            case K::MaxPool2d: {
                const std::size_t C = x.dim(1), H = x.dim(2), Wd = x.dim(3);
                const std::size_t Ho = H / layer.pool, Wo = Wd / layer.pool;
                const Array& arg = lt.aux[0];
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t oy = 0; oy < Ho; ++oy)
                            for (std::size_t ox = 0; ox < Wo; ++ox)
                                gx[(n * C + c) * H * Wd +
                                   static_cast<std::size_t>(arg[((n * C + c) * Ho + oy) * Wo + ox])] +=
                                    g[((n * C + c) * Ho + oy) * Wo + ox];
                break;
            }
            case K::BatchNorm: {
                const auto v = detail::channel_view(x);
                const Array& gamma = store.at(layer.name + ".gamma");
                const Array& xhat = lt.aux[0];
                const Array& inv_std = lt.aux[1];
                Array& ggamma = grad_slot(layer.name + ".gamma");
                Array& gbeta = grad_slot(layer.name + ".beta");
                const double M = static_cast<double>(v.batch * v.inner);
                for (std::size_t c = 0; c < v.channels; ++c) {
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (std::size_t n = 0; n < v.batch; ++n)
                        for (std::size_t i = 0; i < v.inner; ++i) {
                            const std::size_t at = (n * v.channels + c) * v.inner + i;
                            sum_g += g[at];
                            sum_gx += g[at] * xhat[at];
                        }
                    ggamma[c] += sum_gx;
                    gbeta[c] += sum_g;
                    for (std::size_t n = 0; n < v.batch; ++n)
                        for (std::size_t i = 0; i < v.inner; ++i) {
                            const std::size_t at = (n * v.channels + c) * v.inner + i;
                            if (tape.train)
                                gx[at] = gamma[c] * inv_std[c] / M *
                                         (M * g[at] - sum_g - xhat[at] * sum_gx);
                            else
                                gx[at] = gamma[c] * inv_std[c] * g[at];
                        }
                }
                break;
            }
            case K::LayerNorm: {
                const std::size_t D = x.numel() / N;
                const Array& gamma = store.at(layer.name + ".gamma");
                const Array& xhat = lt.aux[0];
                const Array& inv_std = lt.aux[1];
                Array& ggamma = grad_slot(layer.name + ".gamma");
                Array& gbeta = grad_slot(layer.name + ".beta");
                for (std::size_t n = 0; n < N; ++n) {
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (std::size_t d = 0; d < D; ++d) {
                        const double gh = g[n * D + d] * gamma[d];
                        ggamma[d] += g[n * D + d] * xhat[n * D + d];
                        gbeta[d] += g[n * D + d];
                        sum_g += gh;
                        sum_gx += gh * xhat[n * D + d];
                    }
                    for (std::size_t d = 0; d < D; ++d) {
                        const double gh = g[n * D + d] * gamma[d];
                        gx[n * D + d] = inv_std[n] / static_cast<double>(D) *
                                        (static_cast<double>(D) * gh - sum_g - xhat[n * D + d] * sum_gx);
                    }
                }
                break;
            }
            case K::Dropout: {
                if (!tape.train || layer.rate == 0.0) {
                    gx = g;
                    break;
                }
                const Array& mask = lt.aux[0];
                for (std::size_t i = 0; i < g.numel(); ++i) gx[i] = g[i] * mask[i];
                break;
            }
            case K::Dense: {
                const std::size_t din = x.dim(1);
                const Array& W = store.at(layer.name + ".W");
                Array& gW = grad_slot(layer.name + ".W");
                Array& gb = grad_slot(layer.name + ".b");
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t o = 0; o < layer.units; ++o) {
                        const double go = g[n * layer.units + o];
                        gb[o] += go;
                        for (std::size_t i = 0; i < din; ++i) {
                            gW[o * din + i] += go * x[n * din + i];
                            gx[n * din + i] += go * W[o * din + i];
                        }
                    }
                break;
            }
            case K::Lstm: {
                const std::size_t C = x.dim(1), T = x.dim(2), U = layer.units;
                const Array& h = lt.aux[0];
                const Array& cst = lt.aux[1];
                const Array& acts = lt.aux[2];
                const char* gates = "ifgo";
                const Array* W[4];
                const Array* Uw[4];
                Array* gW[4];
                Array* gU[4];
                Array* gb[4];
                for (int gi = 0; gi < 4; ++gi) {
                    W[gi] = &store.at(layer.name + ".W" + gates[gi]);
                    Uw[gi] = &store.at(layer.name + ".U" + gates[gi]);
                    gW[gi] = &grad_slot(layer.name + ".W" + gates[gi]);
                    gU[gi] = &grad_slot(layer.name + ".U" + gates[gi]);
                    gb[gi] = &grad_slot(layer.name + ".b" + gates[gi]);
                }
                Array dh(Shape{N, U});
                Array dc(Shape{N, U});
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t u = 0; u < U; ++u) dh[n * U + u] = g[n * U + u];
                for (std::size_t t = T; t-- > 0;) {
                    Array dh_prev(Shape{N, U});
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t u = 0; u < U; ++u) {
                            const double ig = acts[((t * 4 + 0) * N + n) * U + u];
                            const double fg = acts[((t * 4 + 1) * N + n) * U + u];
                            const double gg = acts[((t * 4 + 2) * N + n) * U + u];
                            const double og = acts[((t * 4 + 3) * N + n) * U + u];
                            const double cnew = cst[((t + 1) * N + n) * U + u];
                            const double cprev = cst[(t * N + n) * U + u];
                            const double tc = std::tanh(cnew);
                            const double dhv = dh[n * U + u];
                            double dcv = dc[n * U + u] + dhv * og * (1.0 - tc * tc);
                            const double da[4] = {
                                dcv * gg * ig * (1.0 - ig),        // input gate pre-act
                                dcv * cprev * fg * (1.0 - fg),     // forget gate
                                dcv * ig * (1.0 - gg * gg),        // candidate
                                dhv * tc * og * (1.0 - og),        // output gate
                            };
                            dc[n * U + u] = dcv * fg;
                            for (int gi = 0; gi < 4; ++gi) {
                                (*gb[gi])[u] += da[gi];
                                for (std::size_t c = 0; c < C; ++c) {
                                    (*gW[gi])[u * C + c] += da[gi] * x[(n * C + c) * T + t];
                                    gx[(n * C + c) * T + t] += da[gi] * (*W[gi])[u * C + c];
                                }
                                for (std::size_t v2 = 0; v2 < U; ++v2) {
                                    (*gU[gi])[u * U + v2] += da[gi] * h[(t * N + n) * U + v2];
                                    dh_prev[n * U + v2] += da[gi] * (*Uw[gi])[u * U + v2];
                                }
                            }
                        }
                    dh = std::move(dh_prev);
                }
                break;
            }
            case K::Relu:
                for (std::size_t i = 0; i < g.numel(); ++i) gx[i] = x[i] > 0.0 ? g[i] : 0.0;
                break;
            case K::Elu:
                for (std::size_t i = 0; i < g.numel(); ++i)
                    gx[i] = x[i] > 0.0 ? g[i] : g[i] * std::exp(x[i]);
                break;
            case K::Softmax: {
                const std::size_t D = x.dim(1);
                const Array& y = lt.aux[0];
                for (std::size_t n = 0; n < N; ++n) {
                    double inner = 0.0;
                    for (std::size_t d = 0; d < D; ++d) inner += g[n * D + d] * y[n * D + d];
                    for (std::size_t d = 0; d < D; ++d)
                        gx[n * D + d] = y[n * D + d] * (g[n * D + d] - inner);
                }
                break;
            }
            case K::Reshape:
                gx = g.reshaped(x.shape());
                break;
        }
        g = std::move(gx);
    }

    bw.input_grad = std::move(g);
    for (const auto& [name, grad] : bw.grads)
        if (!grad.all_finite()) throw NonFiniteGradient("gradient for '" + name + "' is not finite");
    return bw;
}

// ---------------------------------------------------------------------------
// Classification loss
// ---------------------------------------------------------------------------

struct CeResult {
    double loss = 0.0;
    Array grad;      // d loss / d probs
    bool clipped = false;
};

inline CeResult cross_entropy(const Array& probs, std::size_t label, double eps = 1e-12) {
    if (probs.rank() != 1) throw ShapeMismatch("cross_entropy takes one distribution");
    if (label >= probs.dim(0)) throw BadClass("label out of range");
    CeResult r;
    r.grad = Array(probs.shape());
    double p = probs[label];
    if (p <= 0.0) {
        p = eps;
        r.clipped = true;
    }
    r.loss = -std::log(p);
    r.grad[label] = -1.0 / p;
    return r;
}

}  // namespace xmtl
