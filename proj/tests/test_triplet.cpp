#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "support/fd.hpp"
#include "xmtl/edit_distance.hpp"
#include "xmtl/rng.hpp"
#include "xmtl/triplet.hpp"

using namespace xmtl;

namespace {

Embedding plain(std::vector<double> vals, EmbedNorm mode = EmbedNorm::Softmax) {
    const std::size_t n = vals.size();
    Embedding e;
    e.values = Array(Shape{n, 1}, std::move(vals));
    e.mode = mode;
    return e;
}

Embedding random_embedding(Rng& rng, std::size_t q, std::size_t t,
                           EmbedNorm mode = EmbedNorm::Softmax) {
    Array raw(Shape{q, t});
    for (std::size_t i = 0; i < raw.numel(); ++i) raw[i] = rng.uniform(-2.0, 2.0);
    return normalize_embedding(raw, mode);
}

constexpr DmlKind kAllKinds[] = {DmlKind::MSE, DmlKind::CS, DmlKind::PC, DmlKind::KL,
                                 DmlKind::KMMD, DmlKind::BC, DmlKind::PO};

}  // namespace

TEST_CASE("triplet hinge hand values") {
    const auto a = plain({1.0, 0.0});
    const auto b = plain({0.0, 1.0});
    SECTION("satisfied margin clamps to zero") {
        const auto r = triplet_loss(DmlKind::MSE, {a}, {a}, {b}, 0.5);
        CHECK(r.loss == 0.0);
        CHECK_FALSE(r.active[0]);
        for (std::size_t i = 0; i < 2; ++i) {
            CHECK(r.grad_anchor[0][i] == 0.0);
            CHECK(r.grad_positive[0][i] == 0.0);
            CHECK(r.grad_negative[0][i] == 0.0);
        }
    }
    SECTION("violated margin pays the full term") {
        const auto r = triplet_loss(DmlKind::MSE, {a}, {b}, {a}, 0.1);
        CHECK(r.loss == Catch::Approx(1.1).epsilon(1e-12));
        CHECK(r.active[0]);
    }
    SECTION("identical positive and negative cancel for every kind") {
        Rng rng(700);
        for (DmlKind kind : kAllKinds) {
            const auto x = random_embedding(rng, 4, 3);
            const auto y = random_embedding(rng, 4, 3);
            INFO(dml_kind_name(kind));
            CHECK(triplet_loss(kind, {x}, {y}, {y}, 0.0).loss == 0.0);
        }
    }
}

TEST_CASE("triplet batches sum per-triplet terms") {
    Rng rng(701);
    std::vector<Embedding> a, p, n;
    for (int i = 0; i < 4; ++i) {
        a.push_back(random_embedding(rng, 5, 2));
        p.push_back(random_embedding(rng, 5, 2));
        n.push_back(random_embedding(rng, 5, 2));
    }
    const auto whole = triplet_loss(DmlKind::CS, a, p, n, 0.3);
    double sum = 0.0;
    for (int i = 0; i < 4; ++i)
        sum += triplet_loss(DmlKind::CS, {a[i]}, {p[i]}, {n[i]}, 0.3).loss;
    CHECK(whole.loss == Catch::Approx(sum).epsilon(1e-12));
    CHECK_THROWS_AS(triplet_loss(DmlKind::CS, a, p, {n[0]}, 0.3), ShapeMismatch);
}

TEST_CASE("margin satisfaction is exactly the zero-loss condition") {
    Rng rng(702);
    for (int trial = 0; trial < 50; ++trial) {
        const auto a = random_embedding(rng, 4, 2);
        const auto p = random_embedding(rng, 4, 2);
        const auto n = random_embedding(rng, 4, 2);
        const double alpha = rng.uniform(0.0, 0.5);
        const double dp = dml_loss(DmlKind::MSE, a, p).loss;
        const double dn = dml_loss(DmlKind::MSE, a, n).loss;
        const auto r = triplet_loss(DmlKind::MSE, {a}, {p}, {n}, alpha);
        CHECK((r.loss == 0.0) == (dp + alpha <= dn));
    }
}

TEST_CASE("hinge activation pattern survives joint rescaling") {
    Rng rng(703);
    for (int trial = 0; trial < 20; ++trial) {
        const auto a = random_embedding(rng, 4, 2);
        const auto p = random_embedding(rng, 4, 2);
        const auto n = random_embedding(rng, 4, 2);
        const double alpha = rng.uniform(0.0, 0.3);
        const double dp = dml_loss(DmlKind::KL, a, p).loss;
        const double dn = dml_loss(DmlKind::KL, a, n).loss;
        const bool active = triplet_loss(DmlKind::KL, {a}, {p}, {n}, alpha).active[0];
        for (double c : {0.25, 1.0, 7.5})
            CHECK((c * dp - c * dn + c * alpha > 0.0) == active);
    }
}

TEST_CASE("triplet gradients match finite differences on open hinges") {
    Rng rng(704);
    for (DmlKind kind : {DmlKind::MSE, DmlKind::CS, DmlKind::KL}) {
        int done = 0;
        while (done < 4) {
            const auto a = random_embedding(rng, 4, 2);
            const auto p = random_embedding(rng, 4, 2);
            const auto n = random_embedding(rng, 4, 2);
            const double alpha = 0.75;  // big enough that most draws stay active
            const auto r = triplet_loss(kind, {a}, {p}, {n}, alpha);
            if (!r.active[0]) continue;
            const auto loss_of = [&](const Array& x, int which) {
                Embedding ea = a, ep = p, en = n;
                (which == 0 ? ea : which == 1 ? ep : en).values = x;
                return triplet_loss(kind, {ea}, {ep}, {en}, alpha).loss;
            };
            INFO(dml_kind_name(kind));
            CHECK(testing::max_rel_err(
                      r.grad_anchor[0],
                      testing::fd_gradient([&](const Array& x) { return loss_of(x, 0); }, a.values)) < 1e-4);
            CHECK(testing::max_rel_err(
                      r.grad_positive[0],
                      testing::fd_gradient([&](const Array& x) { return loss_of(x, 1); }, p.values)) < 1e-4);
            CHECK(testing::max_rel_err(
                      r.grad_negative[0],
                      testing::fd_gradient([&](const Array& x) { return loss_of(x, 2); }, n.values)) < 1e-4);
            ++done;
        }
    }
}

TEST_CASE("contrastive loss") {
    Rng rng(705);
    SECTION("identical positive pair has zero mse") {
        const auto x = random_embedding(rng, 4, 2);
        CHECK(contrastive_loss(DmlKind::MSE, x, x, true, 1.0).loss == 0.0);
    }
    SECTION("distant negative pair clears the hinge") {
        const auto a = plain({0.0});
        const auto b = plain({std::sqrt(2.0)});
        const auto r = contrastive_loss(DmlKind::MSE, a, b, false, 1.0);
        CHECK(r.loss == 0.0);
        CHECK_FALSE(r.active);
    }
    SECTION("close negative pair pays the gap") {
        const auto a = plain({0.0});
        const auto b = plain({std::sqrt(0.2)});
        const auto r = contrastive_loss(DmlKind::MSE, a, b, false, 1.0);
        CHECK(r.loss == Catch::Approx(0.8).epsilon(1e-12));
        CHECK(r.active);
    }
    SECTION("gradients match finite differences both ways") {
        const auto a = random_embedding(rng, 3, 2);
        const auto b = random_embedding(rng, 3, 2);
        for (bool positive : {true, false}) {
            const double alpha = 2.0;  // negative branch stays active for softmax-scale mse
            const auto r = contrastive_loss(DmlKind::CS, a, b, positive, alpha);
            REQUIRE(r.active);
            const auto loss_of = [&](const Array& x, bool first) {
                Embedding ea = a, eb = b;
                (first ? ea : eb).values = x;
                return contrastive_loss(DmlKind::CS, ea, eb, positive, alpha).loss;
            };
            CHECK(testing::max_rel_err(
                      r.grad_anchor,
                      testing::fd_gradient([&](const Array& x) { return loss_of(x, true); }, a.values)) < 1e-4);
            CHECK(testing::max_rel_err(
                      r.grad_other,
                      testing::fd_gradient([&](const Array& x) { return loss_of(x, false); }, b.values)) < 1e-4);
        }
    }
}

TEST_CASE("curriculum bound schedule") {
    const CurriculumSchedule single = single_label_schedule();
    CHECK(curriculum_bound(single, 0) == 4);
    CHECK(curriculum_bound(single, 99) == 1);
    const CurriculumSchedule seq = sequence_schedule(DmlKind::CS);
    CHECK(curriculum_bound(seq, 0) == 10);
    CHECK(curriculum_bound(seq, 950) == 1);
    CHECK_THROWS_AS(curriculum_bound(single, 100), EpochOutOfRange);

    for (const CurriculumSchedule& sched : {single, seq}) {
        std::size_t prev = curriculum_bound(sched, 0);
        for (std::size_t e = 1; e < sched.max_epochs; ++e) {
            const std::size_t cur = curriculum_bound(sched, e);
            CHECK(cur <= prev);
            CHECK(cur >= 1);
            prev = cur;
        }
        CHECK(curriculum_bound(sched, sched.max_epochs - 1) == 1);
    }
}

TEST_CASE("sequence margin coefficients") {
    CHECK(sequence_beta(DmlKind::MSE) == 1e-3);
    CHECK(sequence_beta(DmlKind::CS) == 0.1);
    CHECK(sequence_beta(DmlKind::PC) == 0.1);
    CHECK(sequence_beta(DmlKind::KL) == 1.0);
    CHECK(sequence_beta(DmlKind::BC) == 0.1);
}

TEST_CASE("dynamic margin") {
    const CurriculumSchedule single = single_label_schedule();
    CHECK(dynamic_margin(single, {4.0}) == Catch::Approx(0.4).epsilon(1e-12));
    CHECK(dynamic_margin(single, {0.0}) == 0.0);
    CHECK(dynamic_margin(single, {9.0}) == Catch::Approx(0.5).epsilon(1e-12));  // capped at 5
    const CurriculumSchedule seq = sequence_schedule(DmlKind::MSE);
    CHECK(dynamic_margin(seq, {2.0, 4.0}) == Catch::Approx(0.003).epsilon(1e-12));
    CHECK_THROWS_AS(dynamic_margin(single, {}), EmptyBatch);
}

TEST_CASE("single-label negative mining") {
    // Labels 0..9, samples 3 per class; distance = absolute class difference.
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < 10; ++c)
        for (int k = 0; k < 3; ++k) labels.push_back(c);
    const auto idx = build_negative_index(labels, 10, [&](std::size_t a, std::size_t b) {
        return std::optional<std::size_t>(a > b ? a - b : b - a);
    });

    Rng rng(706);
    SECTION("honors the lower bound") {
        std::set<std::size_t> seen;
        for (int i = 0; i < 200; ++i) {
            const Mined m = mine_negatives(idx, 3, 4, rng);
            CHECK(m.distance >= 4);
            CHECK(labels[m.sample] == idx.sample_label[m.sample]);
            seen.insert(m.distance);
        }
        CHECK(seen.count(4) == 1);  // distances 4..6 all reachable from label 3
        CHECK(seen.count(6) == 1);
    }
    SECTION("never returns the anchor class") {
        for (int i = 0; i < 100; ++i) CHECK(mine_negatives(idx, 5, 1, rng).distance >= 1);
    }
    SECTION("empty pool raises") {
        const auto only_zero = build_negative_index({0, 0}, 1, [](std::size_t, std::size_t) {
            return std::optional<std::size_t>(0);
        });
        CHECK_THROWS_AS(mine_negatives(only_zero, 0, 1, rng), NoCandidate);
    }
    SECTION("fallback ladder reports its rung") {
        // From label 0 the largest reachable distance is 9.
        const Mined direct = mine_with_fallback(idx, 0, 9, rng);
        CHECK(direct.distance == 9);
        CHECK_FALSE(direct.lowered_bound);
        // Bound 10 is unreachable; bound-1 = 9 works.
        const Mined lowered = mine_with_fallback(idx, 0, 10, rng);
        CHECK(lowered.distance == 9);
        CHECK(lowered.lowered_bound);
        CHECK_FALSE(lowered.unconstrained);
        // From a single-class index every distance >= 1 is unreachable except
        // via the unconstrained rung, which still refuses distance 0.
        const auto two_class =
            build_negative_index({0, 0, 1}, 2, [](std::size_t a, std::size_t b) {
                return std::optional<std::size_t>(a > b ? a - b : b - a);
            });
        const Mined un = mine_with_fallback(two_class, 0, 12, rng);
        CHECK(un.distance == 1);
        CHECK(un.sample == 2);
        CHECK(un.unconstrained);
    }
}

TEST_CASE("length constraint boundary") {
    // Two candidates in class 1, widths 420 and 421; anchor has 800 steps.
    const std::vector<std::size_t> labels{0, 1, 1};
    const std::vector<double> widths{400.0, 420.0, 421.0};
    const auto idx = build_negative_index(
        labels, 2,
        [](std::size_t a, std::size_t b) {
            return std::optional<std::size_t>(a > b ? a - b : b - a);
        },
        widths);
    Rng rng(707);
    MinePolicy policy;
    policy.length_constraint = true;
    policy.anchor_steps = 800.0;
    for (int i = 0; i < 50; ++i) {
        const Mined m = mine_negatives(idx, 0, 1, rng, policy);
        CHECK(m.sample == 1);  // |420 - 400| = 20 passes, |421 - 400| = 21 does not
    }
}

TEST_CASE("sequence-regime mining over a word corpus") {
    const std::vector<std::string> words{"export", "expert", "import", "vorort",
                                         "exporq", "ex",     "inport"};
    const auto idx = build_negative_index(
        std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}, words.size(),
        [&](std::size_t a, std::size_t b) { return substitution_distance(words[a], words[b]); });
    Rng rng(708);
    // "ex" has a different length, so it is never a candidate for "export".
    for (int i = 0; i < 200; ++i) {
        const Mined m = mine_negatives(idx, 0, 1, rng);
        CHECK(m.sample != 5);
        CHECK(m.sample != 0);
        CHECK(words[m.sample].size() == 6);
        CHECK(*substitution_distance(words[0], words[m.sample]) == m.distance);
    }
    // From "export": expert/exporq sit at 1, import/inport at 2, vorort at 3,
    // so bound 3 leaves vorort alone.
    std::set<std::size_t> seen;
    for (int i = 0; i < 200; ++i) seen.insert(mine_negatives(idx, 0, 3, rng).sample);
    CHECK(seen == std::set<std::size_t>{3});
}
