#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fume/config.hpp"
#include "fume/metrics.hpp"
#include "fume/network.hpp"
#include "fume/params.hpp"
#include "fume/synth.hpp"
#include "fume/train.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct Options {
    std::string config_path;
    std::string checkpoint;
    std::string split = "test";
    std::string out_dir;
};

fume::TrainConfig load_config(const Options& opt) {
    fume::TrainConfig cfg;
    if (!opt.config_path.empty()) cfg = fume::TrainConfig::from_file(opt.config_path);
    if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
    return cfg;
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw fume::DataError("cannot write " + path);
    os << content;
}

int cmd_generate(const Options& opt) {
    fume::TrainConfig cfg = load_config(opt);
    auto m = fume::synth::build_dataset(fume::synth::default_ph_counts(cfg.samples_per_ph),
                                        cfg.seed, cfg.dataset, cfg.size);
    std::size_t tr = m.split("train").size(), va = m.split("val").size(),
                te = m.split("test").size();
    std::cout << "dataset " << cfg.dataset << ": " << m.rows.size() << " samples ("
              << tr << " train / " << va << " val / " << te << " test)\n";
    return kExitOk;
}

int cmd_train(const Options& opt) {
    fume::TrainConfig cfg = load_config(opt);
    fume::train::RunRecord rec = fume::train::train_loop<float>(cfg);
    std::cout << rec.to_text();
    return kExitOk;
}

template <typename F>
void with_checkpoint_net(const Options& opt, const fume::TrainConfig& cfg, F&& fn) {
    std::string path = opt.checkpoint.empty() ? cfg.out_dir + "/checkpoint.bin" : opt.checkpoint;
    fume::ckpt::Header h = fume::ckpt::peek(path);
    fume::FumeNet<float> net(fume::parse_variant(h.variant), h.seed);
    fume::ckpt::load(path, net.params);
    fn(net);
}

int cmd_eval(const Options& opt) {
    fume::TrainConfig cfg = load_config(opt);
    if (opt.split != "train" && opt.split != "val" && opt.split != "test")
        throw fume::ConfigError("split must be train, val or test, got " + opt.split);
    auto manifest = fume::synth::load_manifest(cfg.dataset);
    auto pairs = fume::train::load_split(cfg.dataset, manifest, opt.split);
    with_checkpoint_net(opt, cfg, [&](fume::FumeNet<float>& net) {
        fume::train::EvalResult res = fume::train::evaluate(net, pairs);
        fume::MetricsReport& r = res.report;
        r.params_m = static_cast<double>(net.count_params()) / 1e6;
        r.macs_g = static_cast<double>(net.count_macs(512, 512)) / 1e9;
        std::filesystem::create_directories(cfg.out_dir);
        write_file(cfg.out_dir + "/report.txt", r.to_key_value());
        write_file(cfg.out_dir + "/report.csv",
                   fume::MetricsReport::csv_header() + "\n" + r.to_csv_row() + "\n");
        std::cout << r.to_key_value();
    });
    return kExitOk;
}

int cmd_bench(const Options& opt) {
    fume::TrainConfig cfg = load_config(opt);
    auto run = [&](fume::FumeNet<float>& net) {
        auto lat = fume::train::bench_variant(net, cfg.bench_size);
        std::printf("variant = %s\nlatency_ms = %.6f\nfps = %.6f\n",
                    fume::variant_name(net.variant), lat.latency_ms, lat.fps);
    };
    if (!opt.checkpoint.empty()) {
        with_checkpoint_net(opt, cfg, run);
    } else {
        fume::FumeNet<float> net(cfg.variant, cfg.seed);
        run(net);
    }
    return kExitOk;
}

int cmd_count(const Options& opt) {
    fume::TrainConfig cfg = load_config(opt);
    std::printf("%-24s %12s %14s\n", "variant", "params", "macs@512x512");
    for (fume::Variant v : fume::all_variants()) {
        fume::FumeNet<float> net(v, cfg.seed);
        std::printf("%-24s %12zu %14llu\n", fume::variant_name(v), net.count_params(),
                    static_cast<unsigned long long>(net.count_macs(512, 512)));
    }
    return kExitOk;
}

int cmd_ablate(const Options& opt) {
    fume::TrainConfig cfg = load_config(opt);
    auto rows = fume::train::ablation_sweep<float>(cfg);
    std::string csv = fume::train::ablation_csv(rows);
    std::filesystem::create_directories(cfg.out_dir);
    write_file(cfg.out_dir + "/ablation.csv", csv);
    std::cout << csv;
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-gas plume segmentation and acidosis classification toolkit"};
    app.require_subcommand(1);
    Options opt;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config_path, "flat key = value config file");
        sub->add_option("--checkpoint", opt.checkpoint, "checkpoint path");
        sub->add_option("--split", opt.split, "dataset split (train|val|test)");
        sub->add_option("--out", opt.out_dir, "output directory override");
        return sub;
    };
    auto* generate = add_common(app.add_subcommand("generate", "synthesize a dataset"));
    auto* train = add_common(app.add_subcommand("train", "train a variant"));
    auto* eval = add_common(app.add_subcommand("eval", "evaluate a checkpoint"));
    auto* bench = add_common(app.add_subcommand("bench", "latency protocol"));
    auto* count = add_common(app.add_subcommand("count", "parameter and MAC table"));
    auto* ablate = add_common(app.add_subcommand("ablate", "train and evaluate all variants"));

    try {
        app.parse(argc, argv);
        if (generate->parsed()) return cmd_generate(opt);
        if (train->parsed()) return cmd_train(opt);
        if (eval->parsed()) return cmd_eval(opt);
        if (bench->parsed()) return cmd_bench(opt);
        if (count->parsed()) return cmd_count(opt);
        if (ablate->parsed()) return cmd_ablate(opt);
        return kExitConfig;
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    } catch (const fume::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const fume::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    }
}
