#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xmtl/array.hpp"
#include "xmtl/embedding.hpp"
#include "xmtl/error.hpp"

namespace xmtl {

enum class DmlKind { MSE, CS, PC, KL, KMMD, BC, PO };

inline std::string_view dml_kind_name(DmlKind kind) {
    switch (kind) {
        case DmlKind::MSE: return "mse";
        case DmlKind::CS: return "cs";
        case DmlKind::PC: return "pc";
        case DmlKind::KL: return "kl";
        case DmlKind::KMMD: return "kmmd";
        case DmlKind::BC: return "bc";
        case DmlKind::PO: return "po";
    }
    throw ConfigError("unknown dml kind");
}

inline DmlKind dml_kind_from_name(std::string_view name) {
    for (DmlKind k : {DmlKind::MSE, DmlKind::CS, DmlKind::PC, DmlKind::KL, DmlKind::KMMD,
                      DmlKind::BC, DmlKind::PO})
        if (dml_kind_name(k) == name) return k;
    throw ConfigError("unknown dml kind '" + std::string(name) + "'");
}

struct DmlOptions {
    double eps = 1e-12;
    // Gaussian kernel bandwidth for kMMD; empty selects the median heuristic.
    std::optional<double> bandwidth;
};

struct DmlResult {
    double loss = 0.0;
    Array grad_a, grad_b;
    bool degenerate = false;  // constant input hit the PC / CS fallback
};

namespace detail {

// Median of the nonzero pairwise distances between the pooled t columns of
// both embeddings; 1.0 when every column coincides.
inline double median_column_distance(const Array& a, const Array& b) {
    const std::size_t q = a.dim(0), t = a.dim(1);
    std::vector<const Array*> mats{&a, &b};
    std::vector<double> dists;
    for (std::size_t u = 0; u < 2 * t; ++u) {
        for (std::size_t v = u + 1; v < 2 * t; ++v) {
            const Array& mu = *mats[u / t];
            const Array& mv = *mats[v / t];
            const std::size_t cu = u % t, cv = v % t;
            double sq = 0.0;
            for (std::size_t i = 0; i < q; ++i) {
                const double d = mu[i * t + cu] - mv[i * t + cv];
                sq += d * d;
            }
            if (sq > 0.0) dists.push_back(std::sqrt(sq));
        }
    }
    if (dists.empty()) return 1.0;
    std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
    return dists[dists.size() / 2];
}

}  // namespace detail

inline double kmmd_median_bandwidth(const Embedding& a, const Embedding& b) {
    return detail::median_column_distance(a.values, b.values);
}

// Scalar distance between two embeddings plus exact gradients with respect
// to both. All kinds read the flattened values except kMMD, which treats the
// t columns as samples of a q-dimensional distribution.
inline DmlResult dml_loss(DmlKind kind, const Embedding& a, const Embedding& b,
                          const DmlOptions& opt = {}) {
    if (!a.values.same_shape(b.values)) throw ShapeMismatch("dml embeddings differ in shape");
    if (a.mode != b.mode) throw ConfigError("dml embeddings differ in normalization mode");
    if (opt.bandwidth && *opt.bandwidth <= 0.0) throw ConfigError("kmmd bandwidth must be positive");

    const Array& u = a.values;
    const Array& v = b.values;
    const std::size_t n = u.numel();
    DmlResult r;
    r.grad_a = Array(u.shape());
    r.grad_b = Array(u.shape());

    switch (kind) {
        case DmlKind::MSE: {
            for (std::size_t i = 0; i < n; ++i) {
                const double d = u[i] - v[i];
                r.loss += d * d;
                r.grad_a[i] = 2.0 * d / static_cast<double>(n);
                r.grad_b[i] = -r.grad_a[i];
            }
            r.loss /= static_cast<double>(n);
            break;
        }
        case DmlKind::CS: {
            double c = 0.0, pp = 0.0, qq = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                c += u[i] * v[i];
                pp += u[i] * u[i];
                qq += v[i] * v[i];
            }
            const double p = std::sqrt(pp), q = std::sqrt(qq);
            if (p == 0.0 || q == 0.0) {
                r.loss = 1.0;
                r.degenerate = true;
                break;
            }
            const double s = c / (p * q);
            r.loss = 1.0 - s;
            for (std::size_t i = 0; i < n; ++i) {
                r.grad_a[i] = s * u[i] / pp - v[i] / (p * q);
                r.grad_b[i] = s * v[i] / qq - u[i] / (p * q);
            }
            break;
        }
        case DmlKind::PC: {
            double mu = 0.0, mv = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                mu += u[i];
                mv += v[i];
            }
            mu /= static_cast<double>(n);
            mv /= static_cast<double>(n);
            double c = 0.0, pp = 0.0, qq = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double du = u[i] - mu, dv = v[i] - mv;
                c += du * dv;
                pp += du * du;
                qq += dv * dv;
            }
            if (pp == 0.0 || qq == 0.0) {
                r.loss = 1.0;
                r.degenerate = true;
                break;
            }
            const double p = std::sqrt(pp), q = std::sqrt(qq);
            const double s = c / (p * q);
            r.loss = 1.0 - s;
            // Cosine gradient on the centered vectors, then remove the mean
            // (the centering map is its own adjoint).
            double ga_sum = 0.0, gb_sum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double du = u[i] - mu, dv = v[i] - mv;
                r.grad_a[i] = s * du / pp - dv / (p * q);
                r.grad_b[i] = s * dv / qq - du / (p * q);
                ga_sum += r.grad_a[i];
                gb_sum += r.grad_b[i];
            }
            for (std::size_t i = 0; i < n; ++i) {
                r.grad_a[i] -= ga_sum / static_cast<double>(n);
                r.grad_b[i] -= gb_sum / static_cast<double>(n);
            }
            break;
        }
        case DmlKind::KL: {
            // Values are renormalized to unit L1 mass internally so that the
            // divergence stays nonnegative in the l2-rescaled mode too.
            double su = 0.0, sv = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                su += u[i];
                sv += v[i];
            }
            if (su <= 0.0 || sv <= 0.0) throw NonFiniteLoss("kl needs positive total mass");
            std::vector<double> glp(n), glq(n);  // dL/dp_i, dL/dq_i
            double gp_dot = 0.0, gq_dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double p = u[i] / su, q = v[i] / sv;
                r.loss += p * std::log((p + opt.eps) / (q + opt.eps));
                glp[i] = std::log((p + opt.eps) / (q + opt.eps)) + p / (p + opt.eps);
                glq[i] = -p / (q + opt.eps);
                gp_dot += p * glp[i];
                gq_dot += q * glq[i];
            }
            for (std::size_t i = 0; i < n; ++i) {
                r.grad_a[i] = (glp[i] - gp_dot) / su;
                r.grad_b[i] = (glq[i] - gq_dot) / sv;
            }
            break;
        }
        case DmlKind::KMMD: {
            const std::size_t q = u.dim(0), t = u.dim(1);
            const double sigma = opt.bandwidth ? *opt.bandwidth : detail::median_column_distance(u, v);
            const double inv = 1.0 / (2.0 * sigma * sigma);
            const double tt = static_cast<double>(t) * static_cast<double>(t);
            const auto col = [&](const Array& m, std::size_t jc, std::size_t i) { return m[i * t + jc]; };
            const auto kernel = [&](const Array& ma, std::size_t ja, const Array& mb, std::size_t jb) {
                double sq = 0.0;
                for (std::size_t i = 0; i < q; ++i) {
                    const double d = col(ma, ja, i) - col(mb, jb, i);
                    sq += d * d;
                }
                return std::exp(-sq * inv);
            };
            // Biased estimator: mean k(x,x') + mean k(y,y') - 2 mean k(x,y).
            // The bandwidth is held constant in the backward pass.
            for (std::size_t j = 0; j < t; ++j) {
                for (std::size_t l = 0; l < t; ++l) {
                    const double kxx = kernel(u, j, u, l);
                    const double kyy = kernel(v, j, v, l);
                    const double kxy = kernel(u, j, v, l);
                    r.loss += (kxx + kyy - 2.0 * kxy) / tt;
                    for (std::size_t i = 0; i < q; ++i) {
                        const double dxx = col(u, j, i) - col(u, l, i);
                        const double dyy = col(v, j, i) - col(v, l, i);
                        const double dxy = col(u, j, i) - col(v, l, i);
                        // dk/d(first arg) = -2 inv (first - second) k; the
                        // within-set sums hit each column from both argument
                        // slots, hence the factor 4.
                        r.grad_a[i * t + j] += (4.0 * inv / tt) * (dxy * kxy - dxx * kxx);
                        r.grad_b[i * t + l] += (4.0 * inv / tt) * (dyy * kyy - dxy * kxy);
                    }
                }
            }
            break;
        }
        case DmlKind::BC: {
            double num = 0.0, den = opt.eps;
            for (std::size_t i = 0; i < n; ++i) {
                num += std::fabs(u[i] - v[i]);
                den += u[i] + v[i];
            }
            r.loss = num / den;
            for (std::size_t i = 0; i < n; ++i) {
                const double sg = u[i] > v[i] ? 1.0 : (u[i] < v[i] ? -1.0 : 0.0);
                r.grad_a[i] = sg / den - num / (den * den);
                r.grad_b[i] = -sg / den - num / (den * den);
            }
            break;
        }
        case DmlKind::PO: {
            for (std::size_t i = 0; i < n; ++i) {
                r.loss += v[i] - u[i] * std::log(v[i] + opt.eps);
                r.grad_a[i] = -std::log(v[i] + opt.eps) / static_cast<double>(n);
                r.grad_b[i] = (1.0 - u[i] / (v[i] + opt.eps)) / static_cast<double>(n);
            }
            r.loss /= static_cast<double>(n);
            break;
        }
    }
    if (!std::isfinite(r.loss)) throw NonFiniteLoss("dml loss is not finite");
    return r;
}

}  // namespace xmtl
