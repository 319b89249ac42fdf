// Command-line front end: dataset generation, training, sweeps, and reports.
// Exit codes: 0 ok, 2 usage error, 3 IO failure, 4 numeric failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "xmtl/dataset_io.hpp"
#include "xmtl/experiment.hpp"

namespace fs = std::filesystem;
using namespace xmtl;

namespace {

std::size_t default_jobs() {
    if (const char* env = std::getenv("XMTL_JOBS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

void write_text(const fs::path& path, const std::string& body) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << body;
    if (!os) throw IoError("short write to " + path.string());
}

struct DataFlags {
    GenConfig cfg;
    std::size_t per_class = 120;

    void attach(CLI::App* cmd) {
        cmd->add_option("--classes", cfg.classes, "number of signal classes (2..10)");
        cmd->add_option("--timesteps", cfg.timesteps, "signal length");
        cmd->add_option("--per-class", per_class, "samples per class (1/6 held out)");
        cmd->add_option("--signal-noise", cfg.signal_noise, "uniform noise bound on signals");
        cmd->add_option("--image-noise", cfg.image_noise, "uniform noise bound behind images");
        cmd->add_option("--image-size", cfg.image_size, "image side length");
    }

    GenConfig resolve(std::uint64_t seed) const {
        GenConfig g = cfg;
        g.seed = seed;
        g.per_class_val = std::max<std::size_t>(1, per_class / 6);
        g.per_class_train = per_class - g.per_class_val;
        return g;
    }
};

struct TrainFlags {
    std::string mode = "ts";
    std::string pairing = "none";
    std::string dml = "cs";
    std::size_t epochs = 100;
    std::size_t batch = 100;
    double lr = 1e-4;

    void attach(CLI::App* cmd) {
        cmd->add_option("--mode", mode, "ts | image | combined")
            ->check(CLI::IsMember({"ts", "image", "combined"}));
        cmd->add_option("--pairing", pairing, "none | contrastive | triplet")
            ->check(CLI::IsMember({"none", "contrastive", "triplet"}));
        cmd->add_option("--dml", dml, "mse | cs | pc | kl | kmmd | bc | po")
            ->check(CLI::IsMember({"mse", "cs", "pc", "kl", "kmmd", "bc", "po"}));
        cmd->add_option("--epochs", epochs, "training epochs");
        cmd->add_option("--batch", batch, "batch size");
        cmd->add_option("--lr", lr, "Adam learning rate");
    }

    ExperimentConfig resolve(std::uint64_t seed) const {
        ExperimentConfig c;
        c.mode = run_mode_from_name(mode);
        c.pairing = pairing_from_name(pairing);
        if (c.mode == RunMode::Combined && c.pairing == Pairing::None)
            c.pairing = Pairing::Triplet;
        c.dml = dml_kind_from_name(dml);
        c.max_epochs = epochs;
        c.schedule = single_label_schedule(c.dml);
        c.schedule.max_epochs = epochs;
        c.batch_size = batch;
        c.lr = lr;
        c.seed = seed;
        return c;
    }
};

std::string sweep_csv(const std::vector<RunOutcome>& outcomes) {
    std::string out = "label,image_noise,seed,best_val_acc,final_val_acc,first_epoch_90,image_acc\n";
    char buf[256];
    for (const auto& o : outcomes) {
        std::snprintf(buf, sizeof(buf), "%s,%.17g,%llu,%.17g,%.17g,%zu,%.17g\n", o.label.c_str(),
                      o.image_noise, static_cast<unsigned long long>(o.seed), o.best_val_acc,
                      o.final_val_acc, o.first_epoch_90, o.best_image_acc);
        out += buf;
    }
    return out;
}

std::string curves_csv(const std::vector<RunOutcome>& outcomes) {
    // Per-label mean validation accuracy of the primary modality, per epoch.
    std::vector<std::string> order;
    std::map<std::string, std::vector<const RunOutcome*>> groups;
    for (const auto& o : outcomes) {
        if (!groups.count(o.label)) order.push_back(o.label);
        groups[o.label].push_back(&o);
    }
    std::string out = "label,epoch,mean_val_acc\n";
    char buf[128];
    for (const auto& label : order) {
        const auto& cells = groups[label];
        const std::string metric = label == "image" ? "acc_img" : "acc_ts";
        const std::size_t epochs = cells[0]->metrics.series("val", metric).size();
        for (std::size_t e = 0; e < epochs; ++e) {
            double mean = 0.0;
            for (const auto* c : cells) mean += c->metrics.series("val", metric)[e];
            mean /= double(cells.size());
            std::snprintf(buf, sizeof(buf), "%s,%zu,%.17g\n", label.c_str(), e, mean);
            out += buf;
        }
    }
    return out;
}

std::string markdown_table(const std::vector<SweepRow>& rows) {
    std::string out = "| method | mean val acc | stddev | mean epoch to 90% | cells |\n";
    out += "|---|---|---|---|---|\n";
    char buf[192];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "| %s | %.4f | %.4f | %.1f | %zu |\n", r.label.c_str(),
                      r.mean_acc, r.stddev_acc, r.mean_first_90, r.cells);
        out += buf;
    }
    return out;
}

int cmd_gen(const DataFlags& data, std::uint64_t seed, const std::string& out_dir, bool pgm) {
    const GenConfig g = data.resolve(seed);
    const SyntheticDataset ds = gen_dataset(g);
    save_dataset(ds, out_dir, pgm);
    std::printf("wrote %zu train + %zu val pairs to %s\n", ds.train.size(), ds.val.size(),
                out_dir.c_str());
    return 0;
}

int cmd_train(const TrainFlags& tf, std::uint64_t seed, const std::string& data_dir,
              const std::string& out_dir) {
    const SyntheticDataset ds = load_dataset(data_dir);
    const ExperimentConfig cfg = tf.resolve(seed);
    const TrainResult r = train(cfg, ds);

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "metrics.csv", r.metrics.to_csv());
        save_checkpoint(r.best, fs::path(out_dir) / "model.xmtl");
        nlohmann::json summary;
        summary["config"] = config_to_json(cfg);
        summary["config_hash"] = config_hash(cfg);
        summary["best_val_acc"] = r.best_val_acc;
        summary["best_epoch"] = r.best_epoch;
        summary["final_val_acc"] = r.final_val_acc;
        summary["wall_seconds"] = r.wall_seconds;
        write_text(fs::path(out_dir) / "summary.json", summary.dump(2) + "\n");
    }
    std::printf("best_val_acc=%.17g epoch=%zu\n", r.best_val_acc, r.best_epoch);
    std::printf("final_val_acc=%.17g\n", r.final_val_acc);
    return 0;
}

int cmd_sweep(const DataFlags& data, const TrainFlags& tf, std::uint64_t seed,
              const std::string& rows_flag, const std::string& grid_flag,
              const std::string& seeds_flag, std::size_t jobs, const std::string& out_dir) {
    std::vector<double> grid;
    for (const auto& s : split_list(grid_flag)) grid.push_back(std::stod(s));
    std::vector<std::uint64_t> seeds;
    for (const auto& s : split_list(seeds_flag)) seeds.push_back(std::stoull(s));
    const std::vector<std::string> rows = split_list(rows_flag);
    if (rows.empty() || grid.empty() || seeds.empty())
        throw ConfigError("sweep needs rows, a noise grid, and seeds");

    const ExperimentConfig base = tf.resolve(seed);
    const GenConfig data_base = data.resolve(seed);
    const auto plans = build_plans(base, data_base, rows, grid, seeds);
    std::printf("running %zu cells on %zu workers\n", plans.size(), jobs);
    const auto outcomes = run_plans(plans, jobs);
    const auto table = aggregate(outcomes);

    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "sweep.csv", sweep_csv(outcomes));
    write_text(fs::path(out_dir) / "curves.csv", curves_csv(outcomes));
    write_text(fs::path(out_dir) / "table.md", markdown_table(table));
    std::fputs(markdown_table(table).c_str(), stdout);
    return 0;
}

int cmd_report(const std::string& runs_dir) {
    const fs::path dir(runs_dir);
    std::ifstream is(dir / "sweep.csv");
    if (!is) throw IoError("no sweep.csv under " + runs_dir);
    std::string header;
    std::getline(is, header);
    std::vector<RunOutcome> outcomes;
    std::string line;
    while (std::getline(is, line)) {
        const auto cols = split_list(line);
        if (cols.size() < 7) continue;
        RunOutcome o;
        o.label = cols[0];
        o.image_noise = std::stod(cols[1]);
        o.seed = std::stoull(cols[2]);
        o.best_val_acc = std::stod(cols[3]);
        o.final_val_acc = std::stod(cols[4]);
        o.first_epoch_90 = std::stoull(cols[5]);
        o.best_image_acc = std::stod(cols[6]);
        outcomes.push_back(std::move(o));
    }
    if (outcomes.empty()) throw IoError("sweep.csv under " + runs_dir + " has no rows");
    std::fputs(markdown_table(aggregate(outcomes)).c_str(), stdout);
    if (fs::exists(dir / "curves.csv")) {
        std::ifstream cs(dir / "curves.csv");
        std::printf("curves: %s\n", (dir / "curves.csv").string().c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-modal metric learning toolkit"};
    app.require_subcommand(1);
    app.fallthrough();  // global --seed/--jobs may follow the subcommand

    std::uint64_t seed = 7;
    std::size_t jobs = default_jobs();
    app.add_option("--seed", seed, "global seed")->capture_default_str();
    app.add_option("--jobs", jobs, "parallel workers (default: XMTL_JOBS or cores)");

    auto* gen = app.add_subcommand("gen", "generate a paired synthetic dataset");
    DataFlags gen_data;
    gen_data.attach(gen);
    std::string gen_out;
    bool gen_pgm = false;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_flag("--pgm", gen_pgm, "also export images as PGM");

    auto* tr = app.add_subcommand("train", "train one model");
    TrainFlags train_flags;
    train_flags.attach(tr);
    std::string train_data_dir, train_out;
    tr->add_option("--data", train_data_dir, "dataset directory")->required();
    tr->add_option("--out", train_out, "run output directory");

    auto* sw = app.add_subcommand("sweep", "train a grid of cells and aggregate");
    DataFlags sweep_data;
    TrainFlags sweep_train;
    sweep_data.attach(sw);
    sweep_train.attach(sw);
    std::string sweep_rows = "ts,combined_mse,combined_cs,combined_pc,combined_kl,combined_kmmd,combined_bc,combined_po,image";
    std::string sweep_grid = "0,0.5,1.0,1.5,1.95";
    std::string sweep_seeds = "1,2,3";
    std::string sweep_out = "runs/sweep";
    sw->add_option("--rows", sweep_rows, "comma list of method rows");
    sw->add_option("--noise-grid", sweep_grid, "comma list of image noise bounds");
    sw->add_option("--seeds", sweep_seeds, "comma list of run seeds");
    sw->add_option("--out", sweep_out, "output directory");

    auto* rp = app.add_subcommand("report", "summarize a finished sweep");
    std::string report_runs;
    rp->add_option("--runs", report_runs, "sweep output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exit 0
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen(gen_data, seed, gen_out, gen_pgm);
        if (tr->parsed()) return cmd_train(train_flags, seed, train_data_dir, train_out);
        if (sw->parsed())
            return cmd_sweep(sweep_data, sweep_train, seed, sweep_rows, sweep_grid, sweep_seeds,
                             jobs, sweep_out);
        if (rp->parsed()) return cmd_report(report_runs);
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const NonFiniteLoss& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const NonFiniteGradient& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
