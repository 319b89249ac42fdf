#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "xmtl/adam.hpp"
#include "xmtl/checkpoint.hpp"
#include "xmtl/layers.hpp"
#include "xmtl/synth.hpp"
#include "xmtl/triplet.hpp"

namespace xmtl {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class RunMode { Ts, Image, Combined };
enum class Pairing { None, Contrastive, Triplet };

inline const char* run_mode_name(RunMode m) {
    switch (m) {
        case RunMode::Ts: return "ts";
        case RunMode::Image: return "image";
        default: return "combined";
    }
}

inline RunMode run_mode_from_name(const std::string& s) {
    if (s == "ts") return RunMode::Ts;
    if (s == "image") return RunMode::Image;
    if (s == "combined") return RunMode::Combined;
    throw ConfigError("unknown mode '" + s + "'");
}

inline const char* pairing_name(Pairing p) {
    switch (p) {
        case Pairing::None: return "none";
        case Pairing::Contrastive: return "contrastive";
        default: return "triplet";
    }
}

inline Pairing pairing_from_name(const std::string& s) {
    if (s == "none") return Pairing::None;
    if (s == "contrastive") return Pairing::Contrastive;
    if (s == "triplet") return Pairing::Triplet;
    throw ConfigError("unknown pairing '" + s + "'");
}

struct ExperimentConfig {
    RunMode mode = RunMode::Ts;
    Pairing pairing = Pairing::None;
    DmlKind dml = DmlKind::CS;
    std::size_t batch_size = 100;
    std::size_t max_epochs = 100;
    double lr = 1e-4;
    std::uint64_t seed = 1;
    EmbedNorm embed_norm = EmbedNorm::SoftmaxL2;
    CurriculumSchedule schedule = single_label_schedule();
    double dwa_temperature = 2.0;
    double dwa_smoothing = 0.9;
    double dropout_rate = 0.2;

    void validate() const {
        if (batch_size == 0) throw ConfigError("batch size must be positive");
        if (max_epochs == 0) throw ConfigError("max epochs must be positive");
        if (lr <= 0.0) throw ConfigError("learning rate must be positive");
        if (pairing != Pairing::None && mode != RunMode::Combined)
            throw ConfigError("pairing objectives need combined mode");
        if (schedule.max_epochs != max_epochs)
            throw ConfigError("schedule horizon must match max epochs");
    }
};

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    return {{"mode", run_mode_name(c.mode)},
            {"pairing", pairing_name(c.pairing)},
            {"dml", dml_kind_name(c.dml)},
            {"batch_size", c.batch_size},
            {"max_epochs", c.max_epochs},
            {"lr", c.lr},
            {"seed", c.seed},
            {"embed_norm", c.embed_norm == EmbedNorm::SoftmaxL2 ? "softmax_l2" : "softmax"},
            {"schedule",
             {{"max_epochs", c.schedule.max_epochs},
              {"divisor", c.schedule.divisor},
              {"beta", c.schedule.beta},
              {"distance_cap", c.schedule.distance_cap}}},
            {"dwa_temperature", c.dwa_temperature},
            {"dwa_smoothing", c.dwa_smoothing},
            {"dropout_rate", c.dropout_rate}};
}

inline std::string config_hash(const ExperimentConfig& c) {
    const std::string s = config_to_json(c).dump();
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

// Both encoders reduce their modality to a (50, 16) feature sequence, which is
// the embedding tap, and then run a recurrent classification head whose
// parameter names are shared so combined mode trains one head over both
// modalities.
namespace detail {

// Feature-sequence length at the tap. Both encoders pool down to this length
// so embeddings from the two modalities are directly comparable.
constexpr std::size_t kTapSteps = 16;

// Gain on the batch-averaged pairing loss relative to the cross-entropy means.
// The pairing term must dominate for the alignment to carry the image head
// over to the time-series branch; damping it measurably erases the transfer.
constexpr double kPairGain = 100.0;

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

inline void append_head(ModelSpec& m, std::size_t classes) {
    m.layers.push_back(lstm("head.lstm", 10));
    m.layers.push_back(dense("head.fc1", 20));
    m.layers.push_back(elu());
    // Per-sample normalization: the head serves both modalities, so batch
    // statistics would mix two input distributions and skew eval behavior.
    m.layers.push_back(layernorm("head.ln"));
    m.layers.push_back(dense("head.fc2", classes));
    m.layers.push_back(softmax());
}

}  // namespace detail

inline ModelSpec ts_model_spec(const ExperimentConfig& cfg, std::size_t timesteps,
                               std::size_t classes) {
    ModelSpec m;
    m.input_shape = {1, timesteps};
    const std::size_t stride = std::max<std::size_t>(1, timesteps / 64);
    m.layers.push_back(conv1d("ts.conv1", 50, 4, stride));
    m.layers.push_back(elu());
    const std::size_t conv_out = detail::ceil_div(timesteps, stride);
    m.layers.push_back(maxpool1d(std::max<std::size_t>(1, conv_out / detail::kTapSteps)));
    m.layers.push_back(batchnorm("ts.bn1"));
    m.layers.push_back(dropout(cfg.dropout_rate));
    m.tap = m.layers.size() - 1;
    m.embed_norm = cfg.embed_norm;
    m.tap_preserve_time = cfg.pairing != Pairing::None && cfg.dml == DmlKind::KMMD;
    detail::append_head(m, classes);
    return m;
}

inline ModelSpec image_model_spec(const ExperimentConfig& cfg, std::size_t image_size,
                                  std::size_t classes) {
    ModelSpec m;
    m.input_shape = {1, image_size, image_size};
    const std::size_t stride2d = std::max<std::size_t>(1, image_size / 20);
    m.layers.push_back(layernorm("img.ln"));
    m.layers.push_back(conv2d("img.conv1", 8, 3, stride2d));
    m.layers.push_back(batchnorm("img.bn1"));
    m.layers.push_back(elu());
    const std::size_t side = detail::ceil_div(image_size, stride2d);
    m.layers.push_back(reshape(Shape{8, side * side}));
    const std::size_t stride1d = std::max<std::size_t>(1, (side * side) / 64);
    m.layers.push_back(conv1d("img.conv2", 50, 4, stride1d));
    m.layers.push_back(elu());
    const std::size_t conv_out = detail::ceil_div(side * side, stride1d);
    m.layers.push_back(maxpool1d(std::max<std::size_t>(1, conv_out / detail::kTapSteps)));
    m.layers.push_back(batchnorm("img.bn2"));
    m.layers.push_back(dropout(cfg.dropout_rate));
    m.tap = m.layers.size() - 1;
    m.embed_norm = cfg.embed_norm;
    m.tap_preserve_time = cfg.pairing != Pairing::None && cfg.dml == DmlKind::KMMD;
    detail::append_head(m, classes);
    return m;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsRow {
    std::size_t epoch;
    std::string split;
    std::string metric;
    double value;
};

struct MetricsRecord {
    std::vector<MetricsRow> rows;

    void add(std::size_t epoch, std::string split, std::string metric, double value) {
        rows.push_back({epoch, std::move(split), std::move(metric), value});
    }

    std::string to_csv() const {
        std::string out = "epoch,split,metric,value\n";
        char buf[64];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf), "%zu,%s,%s,%.17g\n", r.epoch, r.split.c_str(),
                          r.metric.c_str(), r.value);
            out += buf;
        }
        return out;
    }

    std::optional<double> find(std::size_t epoch, const std::string& split,
                               const std::string& metric) const {
        for (const auto& r : rows)
            if (r.epoch == epoch && r.split == split && r.metric == metric) return r.value;
        return std::nullopt;
    }

    std::vector<double> series(const std::string& split, const std::string& metric) const {
        std::vector<double> out;
        for (const auto& r : rows)
            if (r.split == split && r.metric == metric) out.push_back(r.value);
        return out;
    }
};

// First epoch whose (split, metric) value reaches the threshold; censored to
// the total epoch count when it never does.
inline std::size_t first_epoch_at_least(const MetricsRecord& rec, const std::string& split,
                                        const std::string& metric, double threshold) {
    std::size_t epochs = 0;
    for (const auto& r : rec.rows) {
        if (r.split != split || r.metric != metric) continue;
        if (r.value >= threshold) return r.epoch;
        epochs = std::max(epochs, r.epoch + 1);
    }
    return epochs;
}

// ---------------------------------------------------------------------------
// Dynamic weight averaging
// ---------------------------------------------------------------------------

// Weights derive from the ratio of the two previous smoothed per-task losses;
// the first two updates run with uniform weights.
struct DwaState {
    std::size_t tasks = 1;
    double temperature = 2.0;
    double smoothing = 0.9;
    std::vector<double> ema, prev1, prev2;
    std::size_t updates = 0;

    explicit DwaState(std::size_t k = 1, double T = 2.0, double s = 0.9)
        : tasks(k), temperature(T), smoothing(s), ema(k, 0.0), prev1(k, 0.0), prev2(k, 0.0) {}
};

inline std::vector<double> dwa_weights(const DwaState& st) {
    std::vector<double> w(st.tasks, 1.0);
    if (st.updates < 2) return w;
    std::vector<double> r(st.tasks);
    for (std::size_t i = 0; i < st.tasks; ++i)
        r[i] = st.prev2[i] > 0.0 ? st.prev1[i] / st.prev2[i] : 1.0;
    const double rmax = *std::max_element(r.begin(), r.end());
    double denom = 0.0;
    for (std::size_t i = 0; i < st.tasks; ++i) denom += std::exp((r[i] - rmax) / st.temperature);
    for (std::size_t i = 0; i < st.tasks; ++i)
        w[i] = static_cast<double>(st.tasks) * std::exp((r[i] - rmax) / st.temperature) / denom;
    return w;
}

inline void dwa_update(DwaState& st, const std::vector<double>& batch_losses) {
    if (batch_losses.size() != st.tasks) throw ShapeMismatch("dwa task count");
    st.prev2 = st.prev1;
    for (std::size_t i = 0; i < st.tasks; ++i)
        st.ema[i] = st.updates == 0 ? batch_losses[i]
                                    : st.smoothing * st.ema[i] + (1.0 - st.smoothing) * batch_losses[i];
    st.prev1 = st.ema;
    ++st.updates;
}

// ---------------------------------------------------------------------------
// Optimizer over a parameter store
// ---------------------------------------------------------------------------

struct Optimizer {
    double lr = 1e-4;
    std::map<std::string, AdamState> slots;

    explicit Optimizer(double lr_ = 1e-4) : lr(lr_) {}

    void step(ParamStore& store, const GradMap& grads) {
        for (const auto& [name, g] : grads) {
            auto it = slots.find(name);
            if (it == slots.end()) it = slots.emplace(name, AdamState(g.shape(), lr)).first;
            store.at(name) = adam_step(it->second, store.at(name), g);
        }
        store.bump();
    }
};

inline void accumulate_grads(GradMap& into, const GradMap& from) {
    for (const auto& [name, g] : from) {
        auto it = into.find(name);
        if (it == into.end())
            into.emplace(name, g);
        else
            it->second = add(it->second, g);
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
    MetricsRecord metrics;
    Checkpoint best;
    double best_val_acc = 0.0;
    std::size_t best_epoch = 0;
    double final_val_acc = 0.0;
    double wall_seconds = 0.0;  // reported in summaries, never in the CSV
};

namespace detail {

inline Array batch_signals(const std::vector<PairedSample>& samples,
                           const std::vector<std::size_t>& ids, std::size_t from, std::size_t to) {
    const std::size_t T = samples[ids[from]].signal.numel();
    Array out(Shape{to - from, 1, T});
    for (std::size_t b = from; b < to; ++b)
        std::copy(samples[ids[b]].signal.data(), samples[ids[b]].signal.data() + T,
                  out.data() + (b - from) * T);
    return out;
}

inline Array batch_images(const std::vector<PairedSample>& samples,
                          const std::vector<std::size_t>& ids, std::size_t from, std::size_t to) {
    const std::size_t H = samples[ids[from]].image.dim(0);
    const std::size_t n = H * H;
    Array out(Shape{to - from, 1, H, H});
    for (std::size_t b = from; b < to; ++b)
        std::copy(samples[ids[b]].image.data(), samples[ids[b]].image.data() + n,
                  out.data() + (b - from) * n);
    return out;
}

struct CeBatch {
    double mean_loss = 0.0;
    Array grad;  // {B, C}, already divided by B
    std::size_t correct = 0;
};

inline CeBatch ce_on_batch(const Array& probs, const std::vector<PairedSample>& samples,
                           const std::vector<std::size_t>& ids, std::size_t from, std::size_t to) {
    const std::size_t B = to - from, C = probs.dim(1);
    CeBatch out;
    out.grad = Array(probs.shape());
    Array row(Shape{C});
    for (std::size_t b = 0; b < B; ++b) {
        std::copy(probs.data() + b * C, probs.data() + (b + 1) * C, row.data());
        const std::size_t label = samples[ids[from + b]].label;
        const CeResult ce = cross_entropy(row, label);
        out.mean_loss += ce.loss;
        for (std::size_t c = 0; c < C; ++c) out.grad[b * C + c] = ce.grad[c] / double(B);
        std::size_t arg = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (probs[b * C + c] > probs[b * C + arg]) arg = c;
        if (arg == label) ++out.correct;
    }
    out.mean_loss /= double(B);
    return out;
}

}  // namespace detail

// Fraction of argmax-correct predictions over a split, in eval mode.
inline double evaluate(const ModelSpec& model, ParamStore& store,
                       const std::vector<PairedSample>& split, bool image_modality,
                       std::size_t batch_size = 100) {
    if (split.empty()) throw EmptySplit("evaluate on empty split");
    std::vector<std::size_t> ids(split.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::size_t correct = 0;
    for (std::size_t start = 0; start < split.size(); start += batch_size) {
        const std::size_t stop = std::min(split.size(), start + batch_size);
        const Array input = image_modality ? detail::batch_images(split, ids, start, stop)
                                           : detail::batch_signals(split, ids, start, stop);
        const Forward fw = forward(model, store, input, false);
        const std::size_t C = fw.output.dim(1);
        for (std::size_t b = 0; b < stop - start; ++b) {
            std::size_t arg = 0;
            for (std::size_t c = 1; c < C; ++c)
                if (fw.output[b * C + c] > fw.output[b * C + arg]) arg = c;
            if (arg == split[start + b].label) ++correct;
        }
    }
    return double(correct) / double(split.size());
}

inline Checkpoint snapshot_params(const ParamStore& store, const ExperimentConfig& cfg,
                                  std::size_t epoch, double val_acc) {
    Checkpoint ckpt;
    ckpt.meta["config"] = config_to_json(cfg);
    ckpt.meta["config_hash"] = config_hash(cfg);
    ckpt.meta["epoch"] = epoch;
    ckpt.meta["val_acc"] = val_acc;
    for (const auto& [name, arr] : store.params) ckpt.tensors.emplace(name, arr);
    for (const auto& [name, arr] : store.state) ckpt.tensors.emplace("state/" + name, arr);
    return ckpt;
}

inline ParamStore store_from_checkpoint(const Checkpoint& ckpt) {
    ParamStore store;
    for (const auto& [name, arr] : ckpt.tensors) {
        if (name.rfind("state/", 0) == 0)
            store.state.emplace(name.substr(6), arr);
        else
            store.params.emplace(name, arr);
    }
    return store;
}

inline TrainResult train(const ExperimentConfig& cfg, const SyntheticDataset& data) {
    cfg.validate();
    if (data.train.empty() || data.val.empty()) throw EmptySplit("train needs both splits");
    const auto t0 = std::chrono::steady_clock::now();

    const std::size_t classes = data.config.classes;
    const bool use_ts = cfg.mode != RunMode::Image;
    const bool use_img = cfg.mode != RunMode::Ts;
    const bool pair = cfg.pairing != Pairing::None;

    const ModelSpec ts_model = ts_model_spec(cfg, data.config.timesteps, classes);
    const ModelSpec img_model = image_model_spec(cfg, data.config.image_size, classes);

    ParamStore store;
    Rng rng(cfg.seed);
    Rng init_rng = rng.split(0), shuffle_rng = rng.split(1), drop_rng = rng.split(2),
        mine_rng = rng.split(3);
    if (use_ts) init_params(ts_model, store, init_rng);
    if (use_img) init_params(img_model, store, init_rng);

    Optimizer opt(cfg.lr);
    const std::size_t tasks = std::size_t(use_ts) + std::size_t(use_img) + std::size_t(pair);
    DwaState dwa(tasks, cfg.dwa_temperature, cfg.dwa_smoothing);
    const DmlOptions dml_opt;

    TrainResult result;
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const std::size_t bound = curriculum_bound(cfg.schedule, epoch);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

        double sum_ce_ts = 0.0, sum_ce_img = 0.0, sum_pair = 0.0, sum_total = 0.0;
        double sum_margin = 0.0;
        std::vector<double> sum_w(tasks, 0.0);
        std::size_t correct_ts = 0, correct_img = 0, batches = 0;

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            const std::size_t B = stop - start;

            std::optional<Forward> fw_ts, fw_img;
            detail::CeBatch ce_ts, ce_img;
            if (use_ts) {
                fw_ts = forward(ts_model, store, detail::batch_signals(data.train, order, start, stop),
                                true, &drop_rng);
                ce_ts = detail::ce_on_batch(fw_ts->output, data.train, order, start, stop);
                correct_ts += ce_ts.correct;
            }
            if (use_img) {
                fw_img = forward(img_model, store, detail::batch_images(data.train, order, start, stop),
                                 true, &drop_rng);
                ce_img = detail::ce_on_batch(fw_img->output, data.train, order, start, stop);
                correct_img += ce_img.correct;
            }

            double pair_loss = 0.0, margin = 0.0;
            std::vector<Array> grad_a, grad_img;
            if (pair) {
                // Negatives are other batch members' paired images, so the
                // batch is mined against itself and the image forward pass
                // above already covers every triplet role.
                std::vector<std::size_t> batch_labels(B);
                for (std::size_t b = 0; b < B; ++b)
                    batch_labels[b] = data.train[order[start + b]].label;
                const NegativeIndex neg_index = build_negative_index(
                    batch_labels, classes,
                    [](std::size_t a, std::size_t b) -> std::optional<std::size_t> {
                        return a > b ? a - b : b - a;
                    });
                std::vector<std::size_t> neg_pos(B);
                std::vector<double> distances(B);
                for (std::size_t b = 0; b < B; ++b) {
                    // The positive is the anchor's own paired image, so the
                    // positive label distance is zero by construction; mined
                    // negatives sit at a positive label distance.
                    const Mined m = mine_with_fallback(neg_index, batch_labels[b], bound, mine_rng);
                    neg_pos[b] = m.sample;
                    distances[b] = double(m.distance);
                    if (batch_labels[neg_pos[b]] == batch_labels[b])
                        throw Error("mined negative shares the anchor label");
                }
                margin = dynamic_margin(cfg.schedule, distances);
                std::vector<Embedding> neg_emb;
                neg_emb.reserve(B);
                for (std::size_t b = 0; b < B; ++b)
                    neg_emb.push_back(fw_img->tape.embeddings[neg_pos[b]]);

                std::vector<Array> grad_p, grad_n;
                if (cfg.pairing == Pairing::Triplet) {
                    const TripletResult tr =
                        triplet_loss(cfg.dml, fw_ts->tape.embeddings, fw_img->tape.embeddings,
                                     neg_emb, margin, dml_opt);
                    pair_loss = tr.loss;
                    grad_a = tr.grad_anchor;
                    grad_p = tr.grad_positive;
                    grad_n = tr.grad_negative;
                } else {
                    for (std::size_t b = 0; b < B; ++b) {
                        const ContrastiveResult pos = contrastive_loss(
                            cfg.dml, fw_ts->tape.embeddings[b], fw_img->tape.embeddings[b], true,
                            margin, dml_opt);
                        const ContrastiveResult neg = contrastive_loss(
                            cfg.dml, fw_ts->tape.embeddings[b], neg_emb[b], false, margin, dml_opt);
                        pair_loss += pos.loss + neg.loss;
                        grad_a.push_back(add(pos.grad_anchor, neg.grad_anchor));
                        grad_p.push_back(pos.grad_other);
                        grad_n.push_back(neg.grad_other);
                    }
                }
                // One image embedding can serve as several anchors' negative;
                // fold every role's gradient into its batch slot.
                grad_img = std::move(grad_p);
                for (std::size_t b = 0; b < B; ++b)
                    grad_img[neg_pos[b]] = add(grad_img[neg_pos[b]], grad_n[b]);
                // The pairing terms accumulate per anchor; average them so the
                // scale does not depend on batch size, then apply the gain.
                const double pair_scale = detail::kPairGain / double(B);
                pair_loss *= pair_scale;
                for (auto& g : grad_a) g = scale(g, pair_scale);
                for (auto& g : grad_img) g = scale(g, pair_scale);
            }

            // Weights come from the state before this batch enters the history.
            const std::vector<double> w = dwa_weights(dwa);
            std::vector<double> losses;
            std::size_t ti = 0;
            double total = 0.0;
            if (use_ts) {
                losses.push_back(ce_ts.mean_loss);
                total += w[ti] * ce_ts.mean_loss;
                ++ti;
            }
            if (use_img) {
                losses.push_back(ce_img.mean_loss);
                total += w[ti] * ce_img.mean_loss;
                ++ti;
            }
            if (pair) {
                losses.push_back(pair_loss);
                total += w[ti] * pair_loss;
                ++ti;
            }
            if (!std::isfinite(total)) throw NonFiniteLoss("training batch total");
            dwa_update(dwa, losses);

            GradMap grads;
            ti = 0;
            if (use_ts) {
                const double wt = w[ti++];
                Array og = scale(ce_ts.grad, wt);
                std::vector<Array> emb;
                if (pair) {
                    const double wp = w[tasks - 1];
                    for (const auto& g : grad_a) emb.push_back(scale(g, wp));
                }
                const Backward bw =
                    backward(ts_model, store, fw_ts->tape, og, pair ? &emb : nullptr);
                accumulate_grads(grads, bw.grads);
            }
            if (use_img) {
                const double wt = w[ti++];
                Array og = scale(ce_img.grad, wt);
                std::vector<Array> emb;
                if (pair) {
                    const double wp = w[tasks - 1];
                    for (const auto& g : grad_img) emb.push_back(scale(g, wp));
                }
                const Backward bw =
                    backward(img_model, store, fw_img->tape, og, pair ? &emb : nullptr);
                accumulate_grads(grads, bw.grads);
            }
            opt.step(store, grads);

            sum_ce_ts += ce_ts.mean_loss;
            sum_ce_img += ce_img.mean_loss;
            sum_pair += pair_loss;
            sum_total += total;
            sum_margin += margin;
            for (std::size_t k = 0; k < tasks; ++k) sum_w[k] += w[k];
            ++batches;
        }

        const double inv_b = 1.0 / double(batches);
        result.metrics.add(epoch, "train", "bound", double(bound));
        result.metrics.add(epoch, "train", "loss_total", sum_total * inv_b);
        std::size_t ti = 0;
        if (use_ts) {
            result.metrics.add(epoch, "train", "ce_ts", sum_ce_ts * inv_b);
            result.metrics.add(epoch, "train", "acc_ts",
                               double(correct_ts) / double(data.train.size()));
            result.metrics.add(epoch, "train", "w_ce_ts", sum_w[ti++] * inv_b);
        }
        if (use_img) {
            result.metrics.add(epoch, "train", "ce_img", sum_ce_img * inv_b);
            result.metrics.add(epoch, "train", "acc_img",
                               double(correct_img) / double(data.train.size()));
            result.metrics.add(epoch, "train", "w_ce_img", sum_w[ti++] * inv_b);
        }
        if (pair) {
            result.metrics.add(epoch, "train", "pair_loss", sum_pair * inv_b);
            result.metrics.add(epoch, "train", "margin", sum_margin * inv_b);
            result.metrics.add(epoch, "train", "w_pair", sum_w[ti++] * inv_b);
        }

        double primary_acc = 0.0;
        if (use_ts) {
            const double acc = evaluate(ts_model, store, data.val, false, cfg.batch_size);
            result.metrics.add(epoch, "val", "acc_ts", acc);
            primary_acc = acc;
        }
        if (use_img) {
            const double acc = evaluate(img_model, store, data.val, true, cfg.batch_size);
            result.metrics.add(epoch, "val", "acc_img", acc);
            if (!use_ts) primary_acc = acc;
        }

        result.final_val_acc = primary_acc;
        if (result.best.tensors.empty() || primary_acc > result.best_val_acc) {
            result.best_val_acc = primary_acc;
            result.best_epoch = epoch;
            result.best = snapshot_params(store, cfg, epoch, primary_acc);
        }
    }

    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

// Rebuilds parameters from a checkpoint and evaluates the primary modality on
// the validation split.
inline double evaluate_checkpoint(const Checkpoint& ckpt, const ExperimentConfig& cfg,
                                  const SyntheticDataset& data) {
    ParamStore store = store_from_checkpoint(ckpt);
    if (cfg.mode == RunMode::Image) {
        const ModelSpec img_model = image_model_spec(cfg, data.config.image_size, data.config.classes);
        return evaluate(img_model, store, data.val, true, cfg.batch_size);
    }
    const ModelSpec ts_model = ts_model_spec(cfg, data.config.timesteps, data.config.classes);
    return evaluate(ts_model, store, data.val, false, cfg.batch_size);
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct RunPlan {
    std::string label;
    ExperimentConfig config;
    GenConfig data;
};

struct RunOutcome {
    std::string label;
    double image_noise = 0.0;
    std::uint64_t seed = 0;
    double best_val_acc = 0.0;
    double final_val_acc = 0.0;
    double best_image_acc = 0.0;
    std::size_t first_epoch_90 = 0;
    MetricsRecord metrics;
};

// Standard plan grid: one cell per (label row, image noise, seed); each seed
// also shifts the dataset seed so repeated rows see fresh data draws.
inline std::vector<RunPlan> build_plans(const ExperimentConfig& base, const GenConfig& data_base,
                                        const std::vector<std::string>& rows,
                                        const std::vector<double>& image_noise_grid,
                                        const std::vector<std::uint64_t>& seeds) {
    std::vector<RunPlan> plans;
    for (const auto& row : rows) {
        ExperimentConfig cfg = base;
        if (row == "ts") {
            cfg.mode = RunMode::Ts;
            cfg.pairing = Pairing::None;
        } else if (row == "image") {
            cfg.mode = RunMode::Image;
            cfg.pairing = Pairing::None;
        } else if (row.rfind("combined_", 0) == 0) {
            cfg.mode = RunMode::Combined;
            if (cfg.pairing == Pairing::None) cfg.pairing = Pairing::Triplet;
            cfg.dml = dml_kind_from_name(row.substr(9));
            cfg.schedule.beta = single_label_beta(cfg.dml);
        } else {
            throw ConfigError("unknown sweep row '" + row + "'");
        }
        // Single-modality rows do not depend on the image noise grid.
        const std::vector<double> grid =
            row == "ts" ? std::vector<double>{data_base.image_noise} : image_noise_grid;
        for (double noise : grid) {
            for (std::uint64_t seed : seeds) {
                RunPlan p{row, cfg, data_base};
                p.config.seed = seed;
                p.data.image_noise = noise;
                p.data.seed = data_base.seed + seed;
                plans.push_back(std::move(p));
            }
        }
    }
    return plans;
}

inline std::vector<RunOutcome> run_plans(const std::vector<RunPlan>& plans, std::size_t jobs) {
    std::vector<RunOutcome> outcomes(plans.size());
    if (plans.empty()) return outcomes;
    jobs = std::max<std::size_t>(1, std::min(jobs, plans.size()));

    std::mutex cache_mutex;
    std::map<std::string, std::shared_ptr<const SyntheticDataset>> cache;
    const auto dataset_for = [&](const GenConfig& g) {
        char key[160];
        std::snprintf(key, sizeof(key), "%zu|%zu|%zu|%zu|%.17g|%.17g|%zu|%llu", g.classes,
                      g.timesteps, g.per_class_train, g.per_class_val, g.signal_noise,
                      g.image_noise, g.image_size, static_cast<unsigned long long>(g.seed));
        {
            std::lock_guard<std::mutex> lock(cache_mutex);
            auto it = cache.find(key);
            if (it != cache.end()) return it->second;
        }
        auto ds = std::make_shared<const SyntheticDataset>(gen_dataset(g));
        std::lock_guard<std::mutex> lock(cache_mutex);
        return cache.emplace(key, std::move(ds)).first->second;
    };

    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w)
        workers.emplace_back([&]() {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= plans.size()) return;
                const RunPlan& p = plans[i];
                const auto ds = dataset_for(p.data);
                const TrainResult r = train(p.config, *ds);
                RunOutcome& o = outcomes[i];
                o.label = p.label;
                o.image_noise = p.data.image_noise;
                o.seed = p.config.seed;
                o.best_val_acc = r.best_val_acc;
                o.final_val_acc = r.final_val_acc;
                o.first_epoch_90 = first_epoch_at_least(
                    r.metrics, "val", p.config.mode == RunMode::Image ? "acc_img" : "acc_ts", 0.9);
                if (p.config.mode != RunMode::Ts) {
                    const auto accs = r.metrics.series("val", "acc_img");
                    for (double a : accs) o.best_image_acc = std::max(o.best_image_acc, a);
                }
                o.metrics = r.metrics;
            }
        });
    for (auto& t : workers) t.join();
    return outcomes;
}

struct SweepRow {
    std::string label;
    double mean_acc = 0.0;
    double stddev_acc = 0.0;
    double mean_first_90 = 0.0;
    std::size_t cells = 0;
};

// Mean and stddev of best val accuracy per row label, preserving first-seen
// label order.
inline std::vector<SweepRow> aggregate(const std::vector<RunOutcome>& outcomes) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<const RunOutcome*>> groups;
    for (const auto& o : outcomes) {
        if (!groups.count(o.label)) order.push_back(o.label);
        groups[o.label].push_back(&o);
    }
    std::vector<SweepRow> rows;
    for (const auto& label : order) {
        const auto& cells = groups[label];
        SweepRow row;
        row.label = label;
        row.cells = cells.size();
        for (const auto* c : cells) {
            row.mean_acc += c->best_val_acc;
            row.mean_first_90 += double(c->first_epoch_90);
        }
        row.mean_acc /= double(cells.size());
        row.mean_first_90 /= double(cells.size());
        for (const auto* c : cells) {
            const double d = c->best_val_acc - row.mean_acc;
            row.stddev_acc += d * d;
        }
        row.stddev_acc = std::sqrt(row.stddev_acc / double(cells.size()));
        rows.push_back(row);
    }
    return rows;
}

}  // namespace xmtl
