#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "xmtl/dataset_io.hpp"
#include "xmtl/synth.hpp"

using namespace xmtl;
using Catch::Matchers::WithinAbs;

TEST_CASE("clean signal matches the closed form") {
    Rng rng(1);
    const auto s = gen_signal(1, 200, 0.0, rng);
    REQUIRE(s.label == 0);
    // t = 100 for class 1 gives sin(5.0).
    REQUIRE_THAT(s.values[99], WithinAbs(std::sin(5.0), 1e-15));
    REQUIRE_THAT(s.values[99], WithinAbs(-0.95892427466, 1e-10));
    for (std::size_t i = 0; i < 200; ++i)
        REQUIRE_THAT(s.values[i], WithinAbs(std::sin(0.05 * double(i + 1)), 1e-15));

    const auto s4 = gen_signal(4, 50, 0.0, rng);
    REQUIRE(s4.label == 3);
    REQUIRE_THAT(s4.values[0], WithinAbs(std::sin(0.05 / 4.0), 1e-15));
}

TEST_CASE("noise is additive and stays within its bound") {
    Rng rng(2);
    const double b = 0.3;
    Rng clean_rng(2);
    const auto noisy = gen_signal(3, 400, b, rng);
    const auto clean = gen_signal(3, 400, 0.0, clean_rng);
    double lo = 1e9, hi = -1e9;
    for (std::size_t i = 0; i < 400; ++i) {
        const double d = noisy.values[i] - clean.values[i];
        REQUIRE(d >= 0.0);
        REQUIRE(d < b);
        lo = std::min(lo, d);
        hi = std::max(hi, d);
    }
    // The offsets actually spread over the interval rather than collapsing.
    REQUIRE(lo < 0.05);
    REQUIRE(hi > 0.25);
}

TEST_CASE("signal argument validation") {
    Rng rng(3);
    REQUIRE_THROWS_AS(gen_signal(0, 10, 0.0, rng), BadClass);
    REQUIRE_THROWS_AS(gen_signal(11, 10, 0.0, rng), BadClass);
    REQUIRE_THROWS_AS(gen_signal(1, 1, 0.0, rng), BadLength);
    REQUIRE_THROWS_AS(gen_signal(1, 10, -0.1, rng), ConfigError);
}

TEST_CASE("class separability grows with the frequency gap on short windows") {
    // Clean signals are ordered by |1/k - 1/k'| only while the phase gap stays
    // well below a quarter period; long windows saturate the trig cross terms
    // and scramble the ranking, so the check uses a 20-step window.
    const std::size_t n = 20;
    std::vector<Array> clean;
    Rng rng(4);
    for (std::size_t k = 1; k <= 10; ++k) clean.push_back(gen_signal(k, n, 0.0, rng).values);
    struct Pair { double gap, mse; };
    std::vector<Pair> pairs;
    for (std::size_t a = 0; a < 10; ++a)
        for (std::size_t b = a + 1; b < 10; ++b) {
            double mse = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = clean[a][i] - clean[b][i];
                mse += d * d;
            }
            pairs.push_back({std::abs(1.0 / double(a + 1) - 1.0 / double(b + 1)), mse / double(n)});
        }
    for (const auto& p : pairs)
        for (const auto& q : pairs)
            if (p.gap < q.gap - 1e-12) REQUIRE(p.mse < q.mse);
}

TEST_CASE("augmentation with zero sigma is the identity for warps") {
    Rng rng(5);
    const auto s = gen_signal(2, 120, 0.0, rng);
    for (auto kind : {AugmentKind::TimeWarp, AugmentKind::MagnitudeWarp, AugmentKind::Jitter}) {
        Rng arng(6);
        const auto out = augment(s, kind, arng, WarpParams{0.0, 4});
        for (std::size_t i = 0; i < 120; ++i) REQUIRE_THAT(out.values[i], WithinAbs(s.values[i], 1e-12));
    }
}

TEST_CASE("magnitude warp applies a smooth envelope near one") {
    Rng rng(7);
    Array base(Shape{300});
    for (std::size_t i = 0; i < 300; ++i) base[i] = 1.0;
    SignalSample s{base, 0, 0.0};
    Rng arng(8);
    const auto out = augment(s, AugmentKind::MagnitudeWarp, arng);
    double mean = 0.0;
    for (std::size_t i = 0; i < 300; ++i) mean += out.values[i];
    mean /= 300.0;
    REQUIRE_THAT(mean, WithinAbs(1.0, 0.3));
    // Endpoints are pinned, the interior moves, and steps stay small (smooth).
    REQUIRE_THAT(out.values[0], WithinAbs(1.0, 1e-9));
    REQUIRE_THAT(out.values[299], WithinAbs(1.0, 1e-9));
    double interior_dev = 0.0, max_step = 0.0;
    for (std::size_t i = 1; i < 299; ++i) {
        interior_dev = std::max(interior_dev, std::abs(out.values[i] - 1.0));
        max_step = std::max(max_step, std::abs(out.values[i + 1] - out.values[i]));
    }
    REQUIRE(interior_dev > 0.01);
    REQUIRE(max_step < 0.02);
}

TEST_CASE("time warp preserves endpoints and stays on the signal's range") {
    Rng rng(9);
    const auto s = gen_signal(1, 250, 0.0, rng);
    Rng arng(10);
    const auto out = augment(s, AugmentKind::TimeWarp, arng);
    REQUIRE_THAT(out.values[0], WithinAbs(s.values[0], 1e-9));
    REQUIRE_THAT(out.values[249], WithinAbs(s.values[249], 1e-9));
    const double lo = s.values.min(), hi = s.values.max();
    bool moved = false;
    for (std::size_t i = 0; i < 250; ++i) {
        REQUIRE(out.values[i] >= lo - 1e-12);
        REQUIRE(out.values[i] <= hi + 1e-12);
        if (std::abs(out.values[i] - s.values[i]) > 1e-6) moved = true;
    }
    REQUIRE(moved);
}

TEST_CASE("jitter adds independent gaussian noise") {
    Rng rng(11);
    Array base(Shape{2000});
    SignalSample s{base, 0, 0.0};
    Rng arng(12);
    const auto out = augment(s, AugmentKind::Jitter, arng, WarpParams{0.2, 4});
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < 2000; ++i) mean += out.values[i];
    mean /= 2000.0;
    for (std::size_t i = 0; i < 2000; ++i) var += (out.values[i] - mean) * (out.values[i] - mean);
    var /= 2000.0;
    REQUIRE_THAT(mean, WithinAbs(0.0, 0.02));
    REQUIRE_THAT(std::sqrt(var), WithinAbs(0.2, 0.02));
}

TEST_CASE("rescale maps extremes exactly and is idempotent on the target range") {
    Array x({3}, {0.0, 5.0, 10.0});
    const Array y = rescale(x, -1.0, 1.0);
    REQUIRE_THAT(y[0], WithinAbs(-1.0, 1e-15));
    REQUIRE_THAT(y[1], WithinAbs(0.0, 1e-15));
    REQUIRE_THAT(y[2], WithinAbs(1.0, 1e-15));
    const Array z = rescale(y, -1.0, 1.0);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE_THAT(z[i], WithinAbs(y[i], 1e-15));

    const Array half = rescale(x, 0.0, 1.0);
    REQUIRE_THAT(half[0], WithinAbs(0.0, 1e-15));
    REQUIRE_THAT(half[2], WithinAbs(1.0, 1e-15));

    Array flat({4}, {2.0, 2.0, 2.0, 2.0});
    REQUIRE_THROWS_AS(rescale(flat), ConstantSeries);
    REQUIRE_THROWS_AS(rescale(x, 0.5, 0.5), ConfigError);
    REQUIRE_THROWS_AS(rescale(x, -2.0, 1.0), ConfigError);
}

TEST_CASE("paa averages contiguous segments") {
    Array x({6}, {1.0, 3.0, 2.0, 4.0, 10.0, 20.0});
    const Array y = paa(x, 3);
    REQUIRE_THAT(y[0], WithinAbs(2.0, 1e-15));
    REQUIRE_THAT(y[1], WithinAbs(3.0, 1e-15));
    REQUIRE_THAT(y[2], WithinAbs(15.0, 1e-15));
    REQUIRE_THROWS_AS(paa(x, 7), BadLength);
    REQUIRE_THROWS_AS(paa(x, 1), BadLength);
}

TEST_CASE("gasf of the three-point ramp is the signed sum-angle matrix") {
    Array x({3}, {0.0, 5.0, 10.0});  // rescales to [-1, 0, 1]
    const auto img = gasf(x, -1.0, 1.0, 3);
    const double expect[9] = {1.0, 0.0, -1.0, 0.0, -1.0, 0.0, -1.0, 0.0, 1.0};
    for (std::size_t i = 0; i < 9; ++i) REQUIRE_THAT(img.matrix[i], WithinAbs(expect[i], 1e-12));
}

TEST_CASE("gasf invariants: symmetry, range, and the doubled-square diagonal") {
    Rng rng(13);
    const auto s = gen_signal(5, 600, 0.2, rng);
    const auto img = gasf(s.values, -1.0, 1.0, 40);
    const Array scaled = rescale(paa(s.values, 40), -1.0, 1.0);
    REQUIRE(img.matrix.dim(0) == 40);
    REQUIRE(img.matrix.dim(1) == 40);
    for (std::size_t i = 0; i < 40; ++i) {
        REQUIRE_THAT(img.matrix[i * 40 + i], WithinAbs(2.0 * scaled[i] * scaled[i] - 1.0, 1e-12));
        for (std::size_t j = 0; j < 40; ++j) {
            REQUIRE(img.matrix[i * 40 + j] >= -1.0 - 1e-12);
            REQUIRE(img.matrix[i * 40 + j] <= 1.0 + 1e-12);
            REQUIRE_THAT(img.matrix[i * 40 + j], WithinAbs(img.matrix[j * 40 + i], 0.0));
        }
    }
}

TEST_CASE("dataset generation is stratified, labeled, and deterministic") {
    GenConfig cfg;
    cfg.classes = 4;
    cfg.timesteps = 120;
    cfg.per_class_train = 6;
    cfg.per_class_val = 2;
    cfg.image_size = 16;
    cfg.seed = 99;
    const auto a = gen_dataset(cfg);
    const auto b = gen_dataset(cfg);
    REQUIRE(a.train.size() == 24);
    REQUIRE(a.val.size() == 8);
    std::vector<std::size_t> train_counts(4, 0), val_counts(4, 0);
    for (const auto& s : a.train) train_counts[s.label]++;
    for (const auto& s : a.val) val_counts[s.label]++;
    for (std::size_t k = 0; k < 4; ++k) {
        REQUIRE(train_counts[k] == 6);
        REQUIRE(val_counts[k] == 2);
    }
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        REQUIRE(a.train[i].signal.shape() == Shape{120});
        REQUIRE(a.train[i].image.shape() == (Shape{16, 16}));
        for (std::size_t j = 0; j < 120; ++j)
            REQUIRE(a.train[i].signal[j] == b.train[i].signal[j]);
        for (std::size_t j = 0; j < 256; ++j)
            REQUIRE(a.train[i].image[j] == b.train[i].image[j]);
    }

    // A different seed changes the noisy signals.
    cfg.seed = 100;
    const auto c = gen_dataset(cfg);
    bool differs = false;
    for (std::size_t j = 0; j < 120 && !differs; ++j)
        differs = a.train[0].signal[j] != c.train[0].signal[j];
    REQUIRE(differs);

    // Signal and image come from independent same-class draws: the image of a
    // clean-image config is noise-free even though the signal is noisy.
    cfg.seed = 99;
    cfg.image_noise = 0.0;
    const auto d = gen_dataset(cfg);
    Rng probe(0);
    for (const auto& s : d.val) {
        const auto clean = gen_signal(s.label + 1, cfg.timesteps, 0.0, probe);
        const auto expect = gasf(clean.values, -1.0, 1.0, cfg.image_size);
        for (std::size_t j = 0; j < 256; ++j)
            REQUIRE_THAT(s.image[j], WithinAbs(expect.matrix[j], 1e-12));
    }

    REQUIRE_THROWS_AS(gen_dataset(GenConfig{1}), ConfigError);
}

TEST_CASE("dataset round-trips through disk bit-exactly") {
    GenConfig cfg;
    cfg.classes = 3;
    cfg.timesteps = 80;
    cfg.per_class_train = 3;
    cfg.per_class_val = 1;
    cfg.image_size = 10;
    cfg.seed = 21;
    cfg.image_noise = 0.05;
    const auto ds = gen_dataset(cfg);
    const auto dir = std::filesystem::temp_directory_path() / "xmtl_synth_test";
    std::filesystem::remove_all(dir);
    save_dataset(ds, dir, true);
    REQUIRE(std::filesystem::exists(dir / "manifest.json"));
    REQUIRE(std::filesystem::exists(dir / "train_00000.sig"));
    REQUIRE(std::filesystem::exists(dir / "train_00000.pgm"));
    const auto back = load_dataset(dir);
    REQUIRE(back.config.classes == 3);
    REQUIRE(back.config.seed == 21);
    REQUIRE(back.train.size() == ds.train.size());
    REQUIRE(back.val.size() == ds.val.size());
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        REQUIRE(back.train[i].label == ds.train[i].label);
        for (std::size_t j = 0; j < 80; ++j)
            REQUIRE(back.train[i].signal[j] == ds.train[i].signal[j]);
        for (std::size_t j = 0; j < 100; ++j)
            REQUIRE(back.train[i].image[j] == ds.train[i].image[j]);
    }
    REQUIRE_THROWS_AS(load_dataset(dir / "missing"), IoError);
    std::filesystem::remove_all(dir);
}
