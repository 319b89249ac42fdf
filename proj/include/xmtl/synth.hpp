#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "xmtl/array.hpp"
#include "xmtl/error.hpp"
#include "xmtl/rng.hpp"

namespace xmtl {

// ---------------------------------------------------------------------------
// Signals
// ---------------------------------------------------------------------------

struct SignalSample {
    Array values;        // length n
    std::size_t label;   // 0-based; class k = label + 1 sets the frequency
    double noise_b;
};

// Class-dependent sinusoid sin(0.05 * t / k) for t = 1..n plus uniform noise
// drawn from U(0, noise_b).
inline SignalSample gen_signal(std::size_t k, std::size_t n, double noise_b, Rng& rng) {
    if (k < 1 || k > 10) throw BadClass("class must lie in 1..10");
    if (n < 2) throw BadLength("signal needs at least two points");
    if (noise_b < 0.0) throw ConfigError("noise bound must be nonnegative");
    SignalSample s{Array(Shape{n}), k - 1, noise_b};
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i + 1);
        s.values[i] = std::sin(0.05 * t / static_cast<double>(k));
        if (noise_b > 0.0) s.values[i] += rng.uniform(0.0, noise_b);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

namespace detail {

// Natural cubic spline through (xs, ys); second derivative zero at the ends.
class CubicSpline {
  public:
    CubicSpline(std::vector<double> xs, std::vector<double> ys)
        : xs_(std::move(xs)), ys_(std::move(ys)), m_(xs_.size(), 0.0) {
        const std::size_t n = xs_.size();
        std::vector<double> diag(n, 1.0), rhs(n, 0.0), sub(n, 0.0), sup(n, 0.0);
        for (std::size_t i = 1; i + 1 < n; ++i) {
            const double h0 = xs_[i] - xs_[i - 1], h1 = xs_[i + 1] - xs_[i];
            sub[i] = h0 / 6.0;
            diag[i] = (h0 + h1) / 3.0;
            sup[i] = h1 / 6.0;
            rhs[i] = (ys_[i + 1] - ys_[i]) / h1 - (ys_[i] - ys_[i - 1]) / h0;
        }
        // Thomas algorithm on the interior rows; m_[0] = m_[n-1] = 0.
        for (std::size_t i = 2; i + 1 < n; ++i) {
            const double w = sub[i] / diag[i - 1];
            diag[i] -= w * sup[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        for (std::size_t i = n - 1; i-- > 1;) {
            const double upper = (i + 2 < n) ? sup[i] * m_[i + 1] : 0.0;
            m_[i] = (rhs[i] - upper) / diag[i];
        }
    }

    double operator()(double x) const {
        const std::size_t n = xs_.size();
        std::size_t hi = 1;
        while (hi + 1 < n && xs_[hi] < x) ++hi;
        const std::size_t lo = hi - 1;
        const double h = xs_[hi] - xs_[lo];
        const double a = (xs_[hi] - x) / h, b = (x - xs_[lo]) / h;
        return a * ys_[lo] + b * ys_[hi] +
               ((a * a * a - a) * m_[lo] + (b * b * b - b) * m_[hi]) * h * h / 6.0;
    }

  private:
    std::vector<double> xs_, ys_, m_;
};

// Smooth envelope around 1.0: interior knot values are N(1, sigma^2), both
// endpoints pinned at exactly 1.
inline CubicSpline random_envelope(std::size_t n, std::size_t knots, double sigma, Rng& rng) {
    std::vector<double> xs, ys;
    const std::size_t total = knots + 2;
    for (std::size_t j = 0; j < total; ++j) {
        xs.push_back(static_cast<double>(n - 1) * static_cast<double>(j) /
                     static_cast<double>(total - 1));
        ys.push_back(j == 0 || j + 1 == total ? 1.0 : 1.0 + sigma * rng.normal());
    }
    return CubicSpline(std::move(xs), std::move(ys));
}

}  // namespace detail

enum class AugmentKind { TimeWarp, MagnitudeWarp, Jitter };

struct WarpParams {
    double sigma = 0.2;
    std::size_t knots = 4;
};

inline SignalSample augment(const SignalSample& in, AugmentKind kind, Rng& rng,
                            const WarpParams& params = {}) {
    const std::size_t n = in.values.numel();
    SignalSample out = in;
    switch (kind) {
        case AugmentKind::MagnitudeWarp: {
            const auto env = detail::random_envelope(n, params.knots, params.sigma, rng);
            for (std::size_t i = 0; i < n; ++i) out.values[i] = in.values[i] * env(static_cast<double>(i));
            break;
        }
        case AugmentKind::TimeWarp: {
            const auto env = detail::random_envelope(n, params.knots, params.sigma, rng);
            // Positive local speed, accumulated then renormalized so the first
            // and last positions stay fixed.
            std::vector<double> pos(n, 0.0);
            for (std::size_t i = 1; i < n; ++i)
                pos[i] = pos[i - 1] + std::max(env(static_cast<double>(i)), 0.05);
            const double scale = static_cast<double>(n - 1) / pos[n - 1];
            for (std::size_t i = 0; i < n; ++i) {
                const double x = pos[i] * scale;
                const std::size_t lo = std::min(static_cast<std::size_t>(x), n - 2);
                const double frac = x - static_cast<double>(lo);
                out.values[i] = in.values[lo] * (1.0 - frac) + in.values[lo + 1] * frac;
            }
            break;
        }
        case AugmentKind::Jitter:
            for (std::size_t i = 0; i < n; ++i) out.values[i] = in.values[i] + params.sigma * rng.normal();
            break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// GASF images
// ---------------------------------------------------------------------------

// Affine map onto [p, q] with both endpoints attained.
inline Array rescale(const Array& x, double p = -1.0, double q = 1.0) {
    if (!(p >= -1.0 && p < q && q <= 1.0)) throw ConfigError("rescale range must satisfy -1 <= p < q <= 1");
    const double lo = x.min(), hi = x.max();
    if (lo == hi) throw ConstantSeries("cannot rescale a constant series");
    Array out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i)
        out[i] = p + (q - p) * (x[i] - lo) / (hi - lo);
    return out;
}

// Piecewise aggregate approximation: mean over contiguous segments.
inline Array paa(const Array& x, std::size_t target) {
    const std::size_t n = x.numel();
    if (target < 2 || target > n) throw BadLength("aggregation target out of range");
    Array out(Shape{target});
    for (std::size_t i = 0; i < target; ++i) {
        const std::size_t start = i * n / target;
        const std::size_t stop = (i + 1) * n / target;
        double acc = 0.0;
        for (std::size_t j = start; j < stop; ++j) acc += x[j];
        out[i] = acc / static_cast<double>(stop - start);
    }
    return out;
}

struct GasfImage {
    Array matrix;  // n' x n', entries in [-1, 1], symmetric
    double lo = -1.0, hi = 1.0;
};

// Gramian angular summation field: aggregate, rescale onto [p,q], map through
// arccos, and emit the pairwise cos(phi_i + phi_j) matrix.
inline GasfImage gasf(const Array& x, double p = -1.0, double q = 1.0, std::size_t aggregate_to = 100) {
    const Array pooled = paa(x, aggregate_to);
    const Array scaled = rescale(pooled, p, q);
    const std::size_t n = scaled.numel();
    std::vector<double> phi(n);
    for (std::size_t i = 0; i < n; ++i) phi[i] = std::acos(std::clamp(scaled[i], -1.0, 1.0));
    GasfImage img;
    img.lo = p;
    img.hi = q;
    img.matrix = Array(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            const double v = std::cos(phi[i] + phi[j]);
            img.matrix[i * n + j] = v;
            img.matrix[j * n + i] = v;
        }
    return img;
}

// ---------------------------------------------------------------------------
// Paired dataset
// ---------------------------------------------------------------------------

struct GenConfig {
    std::size_t classes = 10;
    std::size_t timesteps = 1000;
    std::size_t per_class_train = 100;
    std::size_t per_class_val = 20;
    double signal_noise = 0.3;   // noise bound on the time-series modality
    double image_noise = 0.0;    // noise bound on the signals behind the images
    std::size_t image_size = 100;
    std::uint64_t seed = 7;
};

struct PairedSample {
    Array signal;       // {timesteps}
    Array image;        // {image_size, image_size}
    std::size_t label;
};

struct SyntheticDataset {
    std::vector<PairedSample> train, val;
    GenConfig config;
};

// One pair per sample id: a noisy time-series and the GASF of an independent
// same-class draw at the image noise level. Sample ids seed split rng streams,
// so generation order (or parallelism) cannot change the data.
inline SyntheticDataset gen_dataset(const GenConfig& cfg) {
    if (cfg.classes < 2 || cfg.classes > 10) throw ConfigError("classes must lie in 2..10");
    if (cfg.per_class_train == 0 || cfg.per_class_val == 0) throw ConfigError("empty split");
    SyntheticDataset ds;
    ds.config = cfg;
    Rng root(cfg.seed);
    const std::size_t per_class = cfg.per_class_train + cfg.per_class_val;
    for (std::size_t k = 1; k <= cfg.classes; ++k) {
        for (std::size_t i = 0; i < per_class; ++i) {
            Rng stream = root.split((k - 1) * per_class + i);
            const SignalSample ts = gen_signal(k, cfg.timesteps, cfg.signal_noise, stream);
            const SignalSample src = gen_signal(k, cfg.timesteps, cfg.image_noise, stream);
            PairedSample pair{ts.values, gasf(src.values, -1.0, 1.0, cfg.image_size).matrix, k - 1};
            (i < cfg.per_class_train ? ds.train : ds.val).push_back(std::move(pair));
        }
    }
    return ds;
}

}  // namespace xmtl
