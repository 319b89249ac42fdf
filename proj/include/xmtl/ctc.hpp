#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "xmtl/array.hpp"
#include "xmtl/error.hpp"

namespace xmtl {

// Alignment-free sequence loss. Frame probabilities are a T x (K+1) array
// with the blank symbol at index K; labels are class indices < K.
struct CtcProblem {
    Array frame_probs;
    std::vector<std::size_t> label;

    std::size_t frames() const { return frame_probs.dim(0); }
    std::size_t symbols() const { return frame_probs.dim(1); }
    std::size_t blank() const { return symbols() - 1; }
};

struct CtcResult {
    double loss = 0.0;
    Array grad;  // d loss / d frame_probs, same shape as frame_probs
};

namespace detail {

constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
    if (a == kLogZero) return b;
    if (b == kLogZero) return a;
    const double hi = std::max(a, b), lo = std::min(a, b);
    return hi + std::log1p(std::exp(lo - hi));
}

inline double safe_log(double p) { return p > 0.0 ? std::log(p) : kLogZero; }

}  // namespace detail

// Minimum number of frames that admits a valid alignment: one per label plus
// one mandatory blank between equal neighbours.
inline std::size_t ctc_min_frames(const std::vector<std::size_t>& label) {
    std::size_t repeats = 0;
    for (std::size_t i = 1; i < label.size(); ++i)
        if (label[i] == label[i - 1]) ++repeats;
    return label.size() + repeats;
}

// Forward-backward in log space over the blank-extended label. Gradients are
// taken with respect to the probabilities themselves; fusing with a softmax
// happens in the layer stack.
inline CtcResult ctc_loss(const CtcProblem& problem) {
    using detail::kLogZero;
    if (problem.frame_probs.rank() != 2 || problem.frame_probs.dim(1) < 2)
        throw ShapeMismatch("ctc expects frame probabilities shaped (frames, classes + blank)");
    const std::size_t T = problem.frames();
    const std::size_t symbols = problem.symbols();
    const std::size_t blank = problem.blank();
    const std::size_t L = problem.label.size();
    for (std::size_t v : problem.label)
        if (v >= blank) throw Error("ctc label symbol " + std::to_string(v) + " out of range");
    if (T < ctc_min_frames(problem.label))
        throw InfeasibleLabel("label needs at least " + std::to_string(ctc_min_frames(problem.label)) +
                              " frames, got " + std::to_string(T));

    // Extended label: blank, y1, blank, y2, ..., blank.
    const std::size_t S = 2 * L + 1;
    std::vector<std::size_t> ext(S, blank);
    for (std::size_t i = 0; i < L; ++i) ext[2 * i + 1] = problem.label[i];

    const auto logp = [&](std::size_t t, std::size_t s) {
        return detail::safe_log(problem.frame_probs[t * symbols + ext[s]]);
    };

    // pre(t,s): path probability into state s at time t, excluding the
    // emission at t. alpha(t,s) = pre(t,s) + logp(t,s).
    std::vector<double> pre(T * S, kLogZero);
    std::vector<double> alpha(T * S, kLogZero);
    pre[0 * S + 0] = 0.0;
    if (S > 1) pre[0 * S + 1] = 0.0;
    for (std::size_t s = 0; s < std::min<std::size_t>(S, 2); ++s)
        alpha[0 * S + s] = pre[0 * S + s] + logp(0, s);
    for (std::size_t t = 1; t < T; ++t) {
        for (std::size_t s = 0; s < S; ++s) {
            double acc = alpha[(t - 1) * S + s];
            if (s >= 1) acc = detail::log_add(acc, alpha[(t - 1) * S + s - 1]);
            if (s >= 2 && ext[s] != blank && ext[s] != ext[s - 2])
                acc = detail::log_add(acc, alpha[(t - 1) * S + s - 2]);
            pre[t * S + s] = acc;
            alpha[t * S + s] = acc + logp(t, s);
        }
    }

    // post(t,s): completion probability from state s at time t, excluding the
    // emission at t.
    std::vector<double> post(T * S, kLogZero);
    post[(T - 1) * S + (S - 1)] = 0.0;
    if (S > 1) post[(T - 1) * S + (S - 2)] = 0.0;
    for (std::size_t t = T - 1; t-- > 0;) {
        for (std::size_t s = 0; s < S; ++s) {
            double acc = post[(t + 1) * S + s] + logp(t + 1, s);
            if (s + 1 < S) acc = detail::log_add(acc, post[(t + 1) * S + s + 1] + logp(t + 1, s + 1));
            if (s + 2 < S && ext[s + 2] != blank && ext[s + 2] != ext[s])
                acc = detail::log_add(acc, post[(t + 1) * S + s + 2] + logp(t + 1, s + 2));
            post[t * S + s] = acc;
        }
    }

    double log_prob = alpha[(T - 1) * S + (S - 1)];
    if (S > 1) log_prob = detail::log_add(log_prob, alpha[(T - 1) * S + (S - 2)]);

    CtcResult result;
    result.loss = -log_prob;
    result.grad = Array(problem.frame_probs.shape());
    if (log_prob == kLogZero) return result;  // no probability mass; gradient undefined, report 0

    // d loss / d p_{t,k} = -sum_{s: ext_s = k} exp(pre + post - logP)
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t s = 0; s < S; ++s) {
            const double contrib = pre[t * S + s] + post[t * S + s] - log_prob;
            if (contrib == kLogZero) continue;
            result.grad[t * symbols + ext[s]] -= std::exp(contrib);
        }
    }
    return result;
}

// Best-path decoding: argmax per frame, collapse repeats, drop blanks.
inline std::vector<std::size_t> greedy_decode(const Array& frame_probs) {
    const std::size_t T = frame_probs.dim(0);
    const std::size_t symbols = frame_probs.dim(1);
    const std::size_t blank = symbols - 1;
    std::vector<std::size_t> out;
    std::size_t prev = symbols;  // sentinel
    for (std::size_t t = 0; t < T; ++t) {
        const double* row = frame_probs.data() + t * symbols;
        std::size_t best = 0;
        for (std::size_t k = 1; k < symbols; ++k)
            if (row[k] > row[best]) best = k;
        if (best != prev && best != blank) out.push_back(best);
        prev = best;
    }
    return out;
}

}  // namespace xmtl
