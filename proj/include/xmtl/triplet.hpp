#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "xmtl/dml.hpp"
#include "xmtl/embedding.hpp"
#include "xmtl/error.hpp"
#include "xmtl/rng.hpp"

namespace xmtl {

// ---------------------------------------------------------------------------
// Pairing objectives
// ---------------------------------------------------------------------------

struct TripletResult {
    double loss = 0.0;
    std::vector<Array> grad_anchor, grad_positive, grad_negative;
    std::vector<bool> active;  // hinge open for this triplet
};

// Sum over triplets of max(d(a,p) - d(a,n) + alpha, 0). Clamped terms
// contribute nothing to the gradients.
inline TripletResult triplet_loss(DmlKind kind, const std::vector<Embedding>& anchors,
                                  const std::vector<Embedding>& positives,
                                  const std::vector<Embedding>& negatives, double alpha,
                                  const DmlOptions& opt = {}) {
    if (anchors.size() != positives.size() || anchors.size() != negatives.size())
        throw ShapeMismatch("triplet batch cardinality");
    TripletResult r;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const DmlResult dp = dml_loss(kind, anchors[i], positives[i], opt);
        const DmlResult dn = dml_loss(kind, anchors[i], negatives[i], opt);
        const double term = dp.loss - dn.loss + alpha;
        const bool open = term > 0.0;
        r.active.push_back(open);
        if (open) {
            r.loss += term;
            r.grad_anchor.push_back(sub(dp.grad_a, dn.grad_a));
            r.grad_positive.push_back(dp.grad_b);
            r.grad_negative.push_back(scale(dn.grad_b, -1.0));
        } else {
            r.grad_anchor.push_back(Array(anchors[i].values.shape()));
            r.grad_positive.push_back(Array(anchors[i].values.shape()));
            r.grad_negative.push_back(Array(anchors[i].values.shape()));
        }
    }
    return r;
}

struct ContrastiveResult {
    double loss = 0.0;
    Array grad_anchor, grad_other;
    bool active = false;
};

// Positive pairs pull together (plain distance); negative pairs push apart
// through a hinge at alpha.
inline ContrastiveResult contrastive_loss(DmlKind kind, const Embedding& anchor,
                                          const Embedding& other, bool is_positive, double alpha,
                                          const DmlOptions& opt = {}) {
    const DmlResult d = dml_loss(kind, anchor, other, opt);
    ContrastiveResult r;
    if (is_positive) {
        r.loss = d.loss;
        r.grad_anchor = d.grad_a;
        r.grad_other = d.grad_b;
        r.active = true;
        return r;
    }
    if (alpha - d.loss > 0.0) {
        r.loss = alpha - d.loss;
        r.grad_anchor = scale(d.grad_a, -1.0);
        r.grad_other = scale(d.grad_b, -1.0);
        r.active = true;
    } else {
        r.grad_anchor = Array(anchor.values.shape());
        r.grad_other = Array(anchor.values.shape());
    }
    return r;
}

// ---------------------------------------------------------------------------
// Curriculum
// ---------------------------------------------------------------------------

struct CurriculumSchedule {
    std::size_t max_epochs = 100;
    std::size_t divisor = 25;
    double beta = 0.1;
    double distance_cap = 5.0;  // margin inputs are clamped to this ceiling
};

inline double sequence_beta(DmlKind kind) {
    switch (kind) {
        case DmlKind::MSE: return 1e-3;
        case DmlKind::CS:
        case DmlKind::PC: return 0.1;
        case DmlKind::KL: return 1.0;
        default: return 0.1;  // extrapolated; only mse/cs/pc/kl coefficients are sourced
    }
}

inline CurriculumSchedule single_label_schedule() { return {100, 25, 0.1, 5.0}; }

// Margin coefficient matched to the numeric range each metric spans between
// normalized embeddings: ratio- and correlation-style metrics sit near 1, but
// elementwise squared error shrinks with embedding size and the Poisson score
// moves only a few hundredths between unrelated inputs.
inline double single_label_beta(DmlKind kind) {
    switch (kind) {
        case DmlKind::MSE: return 3e-4;
        case DmlKind::PO: return 4e-3;
        default: return 0.1;
    }
}

inline CurriculumSchedule single_label_schedule(DmlKind kind) {
    return {100, 25, single_label_beta(kind), 5.0};
}

inline CurriculumSchedule sequence_schedule(DmlKind kind) {
    return {1000, 100, sequence_beta(kind), 11.0};
}

// Easy-to-hard lower bound on the label distance of mined negatives.
inline std::size_t curriculum_bound(const CurriculumSchedule& sched, std::size_t epoch) {
    if (epoch >= sched.max_epochs) throw EpochOutOfRange("epoch beyond schedule");
    return 1 + (sched.max_epochs - epoch - 1) / sched.divisor;
}

// Batch margin: beta times the mean capped label distance.
inline double dynamic_margin(const CurriculumSchedule& sched, const std::vector<double>& distances) {
    if (distances.empty()) throw EmptyBatch("margin needs at least one distance");
    double acc = 0.0;
    for (double d : distances) acc += std::min(d, sched.distance_cap);
    return sched.beta * acc / static_cast<double>(distances.size());
}

// ---------------------------------------------------------------------------
// Negative mining
// ---------------------------------------------------------------------------

// Label-distance pools: by_label[label_id][distance] lists the samples at
// that distance from the given label. Built once, then shared read-only.
struct NegativeIndex {
    std::vector<std::map<std::size_t, std::vector<std::size_t>>> by_label;
    std::vector<std::size_t> sample_label;
    std::vector<double> widths;  // per-sample length attribute; empty disables the constraint
};

inline NegativeIndex build_negative_index(
    const std::vector<std::size_t>& sample_label, std::size_t num_labels,
    const std::function<std::optional<std::size_t>(std::size_t, std::size_t)>& label_distance,
    std::vector<double> widths = {}) {
    NegativeIndex idx;
    idx.sample_label = sample_label;
    idx.widths = std::move(widths);
    if (!idx.widths.empty() && idx.widths.size() != sample_label.size())
        throw ShapeMismatch("one width per sample");
    idx.by_label.resize(num_labels);
    for (std::size_t l = 0; l < num_labels; ++l)
        for (std::size_t s = 0; s < sample_label.size(); ++s)
            if (const auto d = label_distance(l, sample_label[s]))
                idx.by_label[l][*d].push_back(s);
    return idx;
}

struct MinePolicy {
    bool length_constraint = false;
    double anchor_steps = 0.0;  // m; candidates need |p - m/2| <= 20
};

struct Mined {
    std::size_t sample = 0;
    std::size_t distance = 0;
    bool lowered_bound = false;   // had to accept bound-1
    bool unconstrained = false;   // had to drop every constraint
};

// Uniform draw from the pools at label distance >= bound, honoring the
// length constraint when enabled. Throws when that pool is empty.
inline Mined mine_negatives(const NegativeIndex& idx, std::size_t anchor_label, std::size_t bound,
                            Rng& rng, const MinePolicy& policy = {}) {
    if (anchor_label >= idx.by_label.size()) throw BadClass("anchor label outside index");
    std::vector<std::pair<std::size_t, std::size_t>> pool;  // (sample, distance)
    for (const auto& [dist, samples] : idx.by_label[anchor_label]) {
        if (dist < std::max<std::size_t>(bound, 1)) continue;
        for (std::size_t s : samples) {
            if (policy.length_constraint && !idx.widths.empty() &&
                std::fabs(idx.widths[s] - policy.anchor_steps / 2.0) > 20.0)
                continue;
            pool.emplace_back(s, dist);
        }
    }
    if (pool.empty()) throw NoCandidate("no negative at distance >= " + std::to_string(bound));
    const auto& [sample, dist] = pool[rng.uniform_int(pool.size())];
    return {sample, dist, false, false};
}

// Fallback ladder: exact bound, then bound-1, then anything at distance >= 1
// with the length constraint dropped. Which rung fired is reported.
inline Mined mine_with_fallback(const NegativeIndex& idx, std::size_t anchor_label,
                                std::size_t bound, Rng& rng, const MinePolicy& policy = {}) {
    try {
        return mine_negatives(idx, anchor_label, bound, rng, policy);
    } catch (const NoCandidate&) {
    }
    if (bound > 1) {
        try {
            Mined m = mine_negatives(idx, anchor_label, bound - 1, rng, policy);
            m.lowered_bound = true;
            return m;
        } catch (const NoCandidate&) {
        }
    }
    Mined m = mine_negatives(idx, anchor_label, 1, rng, MinePolicy{});
    m.lowered_bound = bound > 1;
    m.unconstrained = true;
    return m;
}

}  // namespace xmtl
