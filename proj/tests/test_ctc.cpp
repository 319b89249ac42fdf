#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "support/fd.hpp"
#include "support/oracles.hpp"
#include "xmtl/ctc.hpp"
#include "xmtl/rng.hpp"

using namespace xmtl;

namespace {

// Random frame distributions with entries bounded away from zero so finite
// differences stay well behaved.
Array random_frames(Rng& rng, std::size_t frames, std::size_t symbols) {
    Array probs(Shape{frames, symbols});
    for (std::size_t t = 0; t < frames; ++t) {
        double sum = 0.0;
        for (std::size_t k = 0; k < symbols; ++k) {
            probs[t * symbols + k] = rng.uniform(0.1, 1.0);
            sum += probs[t * symbols + k];
        }
        for (std::size_t k = 0; k < symbols; ++k) probs[t * symbols + k] /= sum;
    }
    return probs;
}

std::vector<std::size_t> nth_label(std::size_t index, std::size_t length, std::size_t classes) {
    std::vector<std::size_t> label(length);
    for (std::size_t i = 0; i < length; ++i) {
        label[i] = index % classes;
        index /= classes;
    }
    return label;
}

}  // namespace

TEST_CASE("single frame emits the label directly") {
    CtcProblem p{Array({1, 2}, {0.7, 0.3}), {0}};
    const auto res = ctc_loss(p);
    CHECK(res.loss == Catch::Approx(-std::log(0.7)).epsilon(1e-12));
    // d(-ln p0)/dp0 = -1/0.7; blank column unused by any path.
    CHECK(res.grad[0] == Catch::Approx(-1.0 / 0.7).epsilon(1e-12));
    CHECK(res.grad[1] == 0.0);
}

TEST_CASE("two uniform frames sum the three alignments of a single symbol") {
    CtcProblem p{Array({2, 2}, {0.5, 0.5, 0.5, 0.5}), {0}};
    // Paths aa, a-, -a out of four: probability 0.75.
    CHECK(ctc_loss(p).loss == Catch::Approx(-std::log(0.75)).epsilon(1e-12));
}

TEST_CASE("empty label scores the all-blank path") {
    CtcProblem p{Array({3, 3}, {0.2, 0.3, 0.5, 0.1, 0.1, 0.8, 0.4, 0.2, 0.4}), {}};
    CHECK(ctc_loss(p).loss == Catch::Approx(-std::log(0.5 * 0.8 * 0.4)).epsilon(1e-12));
}

TEST_CASE("repeated symbols need a separating blank frame") {
    CHECK(ctc_min_frames({0, 0}) == 3);
    CHECK(ctc_min_frames({0, 1, 1, 0}) == 5);
    CHECK(ctc_min_frames({}) == 0);
    CtcProblem p{Array({2, 2}, {0.5, 0.5, 0.5, 0.5}), {0, 0}};
    CHECK_THROWS_AS(ctc_loss(p), InfeasibleLabel);
}

TEST_CASE("label symbols must be actual classes, not the blank") {
    CtcProblem p{Array({2, 2}, {0.5, 0.5, 0.5, 0.5}), {1}};
    CHECK_THROWS_AS(ctc_loss(p), Error);
    CtcProblem flat{Array({4}, 0.25), {0}};
    CHECK_THROWS_AS(ctc_loss(flat), ShapeMismatch);
}

TEST_CASE("loss matches brute-force path enumeration") {
    Rng rng(416);
    for (std::size_t frames = 1; frames <= 6; ++frames) {
        for (std::size_t classes = 1; classes <= 3; ++classes) {
            const std::size_t symbols = classes + 1;
            const Array probs = random_frames(rng, frames, symbols);
            const std::vector<double> flat(probs.data(), probs.data() + probs.numel());
            for (std::size_t len = 0; len <= 3; ++len) {
                std::size_t count = 1;
                for (std::size_t i = 0; i < len; ++i) count *= classes;
                for (std::size_t idx = 0; idx < count; ++idx) {
                    const auto label = nth_label(idx, len, classes);
                    if (frames < ctc_min_frames(label)) continue;
                    const double expected = testing::ctc_enumerate(flat, frames, classes, label);
                    const double got = std::exp(-ctc_loss({probs, label}).loss);
                    CHECK(got == Catch::Approx(expected).margin(1e-10));
                }
            }
        }
    }
}

TEST_CASE("probability of the label stays in (0, 1]") {
    Rng rng(417);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t frames = 1 + rng.uniform_int(6);
        const std::size_t classes = 1 + rng.uniform_int(3);
        std::vector<std::size_t> label;
        for (std::size_t i = 0; i < rng.uniform_int(4); ++i) label.push_back(rng.uniform_int(classes));
        if (frames < ctc_min_frames(label)) continue;
        const double p = std::exp(-ctc_loss({random_frames(rng, frames, classes + 1), label}).loss);
        CHECK(p > 0.0);
        CHECK(p <= 1.0 + 1e-12);
    }
}

TEST_CASE("analytic gradient agrees with finite differences") {
    Rng rng(418);
    int checked = 0;
    while (checked < 20) {
        const std::size_t frames = 2 + rng.uniform_int(5);
        const std::size_t classes = 1 + rng.uniform_int(3);
        std::vector<std::size_t> label;
        for (std::size_t i = 0; i < 1 + rng.uniform_int(3); ++i) label.push_back(rng.uniform_int(classes));
        if (frames < ctc_min_frames(label)) continue;
        const Array probs = random_frames(rng, frames, classes + 1);
        const auto res = ctc_loss({probs, label});
        const Array fd = testing::fd_gradient(
            [&](const Array& x) { return ctc_loss({x, label}).loss; }, probs);
        CHECK(testing::max_rel_err(res.grad, fd) < 1e-4);
        ++checked;
    }
}

TEST_CASE("relabeling classes permutes the problem without changing the loss") {
    Rng rng(419);
    const std::size_t frames = 5, classes = 3, symbols = classes + 1;
    const Array probs = random_frames(rng, frames, symbols);
    const std::vector<std::size_t> label{0, 2, 0};
    const auto base = ctc_loss({probs, label});

    const std::vector<std::size_t> perm{2, 0, 1};  // class k becomes perm[k], blank fixed
    Array shuffled(Shape{frames, symbols});
    for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t k = 0; k < classes; ++k) shuffled[t * symbols + perm[k]] = probs[t * symbols + k];
        shuffled[t * symbols + classes] = probs[t * symbols + classes];
    }
    std::vector<std::size_t> relabeled;
    for (std::size_t v : label) relabeled.push_back(perm[v]);

    const auto moved = ctc_loss({shuffled, relabeled});
    CHECK(moved.loss == Catch::Approx(base.loss).epsilon(1e-12));
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t k = 0; k < classes; ++k)
            CHECK(moved.grad[t * symbols + perm[k]] == Catch::Approx(base.grad[t * symbols + k]).margin(1e-12));
}

TEST_CASE("greedy decode collapses repeats and drops blanks") {
    // Columns: class0, class1, blank.
    const auto frame = [](std::size_t best) {
        std::vector<double> row(3, 0.1);
        row[best] = 0.8;
        return row;
    };
    const auto build = [&](const std::vector<std::size_t>& picks) {
        Array probs(Shape{picks.size(), 3});
        for (std::size_t t = 0; t < picks.size(); ++t) {
            const auto row = frame(picks[t]);
            for (std::size_t k = 0; k < 3; ++k) probs[t * 3 + k] = row[k];
        }
        return probs;
    };
    CHECK(greedy_decode(build({0, 0, 2, 1})) == std::vector<std::size_t>{0, 1});
    CHECK(greedy_decode(build({2, 2, 2})).empty());
    CHECK(greedy_decode(build({0, 2, 0})) == std::vector<std::size_t>{0, 0});
    CHECK(greedy_decode(build({2, 1, 1, 2, 1})) == std::vector<std::size_t>{1, 1});
}
