#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fume/common.hpp"
#include "fume/config.hpp"
#include "fume/loss.hpp"
#include "fume/metrics.hpp"
#include "fume/network.hpp"
#include "fume/params.hpp"
#include "fume/synth.hpp"
#include "fume/tensor.hpp"

namespace fume {
namespace train {

// eta_t = eta_0 * (1 + cos(pi * t / T)) / 2, t = 0-based epoch index
inline double cosine_lr(double lr0, int t, int total) {
    return lr0 * (1.0 + std::cos(3.14159265358979323846 * t / total)) / 2.0;
}

// Decoupled weight decay, then bias-corrected adaptive moments.
template <typename T>
void adamw_step(ParamStore<T>& params, int step, double lr, double beta1, double beta2,
                double weight_decay, double eps = 1e-8) {
    double bc1 = 1.0 - std::pow(beta1, step);
    double bc2 = 1.0 - std::pow(beta2, step);
    params.for_each([&](typename ParamStore<T>::Entry& e) {
        if (!e.trainable) return;
        for (std::size_t i = 0; i < e.value.numel(); ++i) {
            double g = static_cast<double>(e.grad[i]);
            double m = beta1 * e.adam_m[i] + (1.0 - beta1) * g;
            double v = beta2 * e.adam_v[i] + (1.0 - beta2) * g * g;
            e.adam_m[i] = static_cast<T>(m);
            e.adam_v[i] = static_cast<T>(v);
            double p = static_cast<double>(e.value[i]);
            p -= lr * weight_decay * p;
            p -= lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
            e.value[i] = static_cast<T>(p);
        }
    });
}

template <typename T>
struct Batch {
    Tensor<T> co2, ch4;                  // N x 1 x H x W intensities in [0, 1]
    std::vector<int> tgt_co2, tgt_ch4;   // N*H*W labels
    std::vector<int> labels;             // N
    std::vector<std::uint8_t> has_co2, has_ch4;

    bool any_co2() const {
        return std::any_of(has_co2.begin(), has_co2.end(), [](auto v) { return v != 0; });
    }
    bool any_ch4() const {
        return std::any_of(has_ch4.begin(), has_ch4.end(), [](auto v) { return v != 0; });
    }
};

template <typename T>
Batch<T> make_batch(const std::vector<GasFramePair>& pairs) {
    if (pairs.empty()) throw DataError("empty batch");
    int H = pairs[0].co2_frame.shape[0], W = pairs[0].co2_frame.shape[1];
    int N = static_cast<int>(pairs.size());
    Batch<T> b;
    b.co2 = Tensor<T>::zeros({N, 1, H, W});
    b.ch4 = Tensor<T>::zeros({N, 1, H, W});
    b.tgt_co2.assign(static_cast<std::size_t>(N) * H * W, 0);
    b.tgt_ch4.assign(static_cast<std::size_t>(N) * H * W, 0);
    for (int n = 0; n < N; ++n) {
        const GasFramePair& p = pairs[n];
        if (p.co2_frame.shape != Shape{H, W} || p.ch4_frame.shape != Shape{H, W})
            throw ShapeError("inconsistent frame sizes within batch");
        std::size_t off = static_cast<std::size_t>(n) * H * W;
        for (std::size_t i = 0; i < p.co2_frame.numel(); ++i) {
            b.co2[off + i] = static_cast<T>(p.co2_frame[i] / 255.0);
            b.ch4[off + i] = static_cast<T>(p.ch4_frame[i] / 255.0);
            b.tgt_co2[off + i] = p.co2_mask[i];
            b.tgt_ch4[off + i] = p.ch4_mask[i];
        }
        b.labels.push_back(static_cast<int>(p.label));
        b.has_co2.push_back(p.has_co2 ? 1 : 0);
        b.has_ch4.push_back(p.has_ch4 ? 1 : 0);
    }
    return b;
}

// Inverse-frequency class weights from the training split: segmentation over
// {background, tube, gas} pixels of present modalities, classification over
// health labels.
inline void fit_class_weights(const std::vector<GasFramePair>& train_pairs, LossConfig& cfg) {
    std::array<std::uint64_t, 3> pix{}, lab{};
    for (const auto& p : train_pairs) {
        lab[static_cast<int>(p.label)]++;
        if (p.has_co2)
            for (std::size_t i = 0; i < p.co2_mask.numel(); ++i) pix[p.co2_mask[i]]++;
        if (p.has_ch4)
            for (std::size_t i = 0; i < p.ch4_mask.numel(); ++i) pix[p.ch4_mask[i]]++;
    }
    auto sw = inverse_frequency_weights(pix);
    auto cw = inverse_frequency_weights(lab);
    std::copy(sw.begin(), sw.end(), cfg.seg_class_weights.begin());
    std::copy(cw.begin(), cw.end(), cfg.cls_class_weights.begin());
}

inline std::vector<GasFramePair> load_split(const std::string& dataset_dir,
                                            const synth::DatasetManifest& m,
                                            const std::string& split) {
    std::vector<GasFramePair> out;
    for (const auto* r : m.split(split)) out.push_back(synth::load_pair(dataset_dir, *r));
    if (out.empty()) throw DataError("split '" + split + "' is empty");
    return out;
}

// ---- evaluation ----

struct EvalResult {
    MetricsReport report;
    metrics::ConfusionMatrix cm;
};

template <typename T>
Mask argmax_mask(const Tensor<T>& scores, int sample) {
    int C = scores.shape[1], H = scores.shape[2], W = scores.shape[3];
    Mask m = Mask::zeros({H, W});
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            int best = 0;
            T bv = scores[((static_cast<std::size_t>(sample) * C) * H + h) * W + w];
            for (int c = 1; c < C; ++c) {
                T v = scores[((static_cast<std::size_t>(sample) * C + c) * H + h) * W + w];
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            m[static_cast<std::size_t>(h) * W + w] = best;
        }
    return m;
}

template <typename T>
int argmax_row(const Tensor<T>& logits, int sample) {
    int C = logits.shape[1];
    int best = 0;
    for (int c = 1; c < C; ++c)
        if (logits[static_cast<std::size_t>(sample) * C + c] >
            logits[static_cast<std::size_t>(sample) * C + best])
            best = c;
    return best;
}

// Per-image metrics averaged over the split; mIoU/Dice average the 3 class
// scores per head, then the available heads. Boundary metrics cover the gas
// class and a class average, pooled over heads, with undefined cases excluded
// and counted.
template <typename T>
EvalResult evaluate(FumeNet<T>& net, const std::vector<GasFramePair>& pairs,
                    int batch_size = 16) {
    struct HeadAcc {
        std::array<double, 3> iou_sum{};
        std::array<double, 3> dice_sum{};
        std::size_t images = 0;
    };
    HeadAcc acc_co2, acc_ch4;
    double hd95_gas = 0, asd_gas = 0, hd95_all = 0, asd_all = 0;
    std::size_t n_gas = 0, n_all = 0, excluded = 0;
    EvalResult res;
    bool any_labels = net.has_cls_head();

    for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
        std::vector<GasFramePair> chunk(
            pairs.begin() + start,
            pairs.begin() + std::min(pairs.size(), start + batch_size));
        Batch<T> b = make_batch<T>(chunk);
        typename FumeNet<T>::Pass f;
        net.run(f, b.co2, b.ch4, /*train=*/false, /*with_grad=*/false, nullptr,
                b.any_co2(), b.any_ch4());
        for (std::size_t n = 0; n < chunk.size(); ++n) {
            if (any_labels && f.logits >= 0)
                res.cm.add(b.labels[n], argmax_row(f.tape.val(f.logits), static_cast<int>(n)));
            auto head = [&](int scores_id, bool present, const Mask& gt, HeadAcc& acc) {
                if (scores_id < 0 || !present) return;
                Mask pred = argmax_mask(f.tape.val(scores_id), static_cast<int>(n));
                for (int c = 0; c < 3; ++c) {
                    acc.iou_sum[c] += metrics::iou(pred, gt, c);
                    acc.dice_sum[c] += metrics::dice_coeff(pred, gt, c);
                }
                acc.images++;
                for (int c = 0; c < 3; ++c) {
                    auto h = metrics::hd95(pred, gt, c);
                    auto a = metrics::asd(pred, gt, c);
                    if (h && a) {
                        hd95_all += *h;
                        asd_all += *a;
                        ++n_all;
                        if (c == synth::kLabelGas) {
                            hd95_gas += *h;
                            asd_gas += *a;
                            ++n_gas;
                        }
                    } else {
                        ++excluded;
                    }
                }
            };
            head(f.seg_co2, chunk[n].has_co2, chunk[n].co2_mask, acc_co2);
            head(f.seg_ch4, chunk[n].has_ch4, chunk[n].ch4_mask, acc_ch4);
        }
    }

    MetricsReport& r = res.report;
    if (any_labels && res.cm.total() > 0) {
        auto cmx = metrics::classification_metrics(res.cm);
        r.accuracy_pct = 100.0 * cmx.accuracy;
        for (int k = 0; k < 3; ++k) r.f1_pct[k] = 100.0 * cmx.f1[k];
        r.macro_f1_pct = 100.0 * cmx.macro_f1;
        r.balanced_accuracy_pct = 100.0 * cmx.balanced_accuracy;
    }
    double miou_sum = 0, dice_sum = 0;
    int heads = 0;
    auto fold = [&](const HeadAcc& acc, std::array<double, 3>& iou_out) {
        if (!acc.images) return;
        double mi = 0, md = 0;
        for (int c = 0; c < 3; ++c) {
            iou_out[c] = 100.0 * acc.iou_sum[c] / acc.images;
            mi += acc.iou_sum[c] / acc.images;
            md += acc.dice_sum[c] / acc.images;
        }
        miou_sum += 100.0 * mi / 3.0;
        dice_sum += 100.0 * md / 3.0;
        ++heads;
    };
    fold(acc_co2, r.iou_co2_pct);
    fold(acc_ch4, r.iou_ch4_pct);
    if (heads) {
        r.miou_pct = miou_sum / heads;
        r.dice_pct = dice_sum / heads;
    }
    if (n_gas) {
        r.hd95_gas_px = hd95_gas / n_gas;
        r.asd_gas_px = asd_gas / n_gas;
    }
    if (n_all) {
        r.hd95_class_avg_px = hd95_all / n_all;
        r.asd_class_avg_px = asd_all / n_all;
    }
    r.boundary_excluded = excluded;
    return res;
}

// ---- training loop ----

struct EpochRecord {
    int epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double val_score = 0;  // val mIoU, or val accuracy for classification-only
};

struct RunRecord {
    std::vector<EpochRecord> epochs;
    std::string checkpoint_path;
    int best_epoch = -1;
    double best_score = -1;
    double wall_clock_s = 0;

    std::string to_text() const {
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(6);
        os << "epoch,lr,train_loss,val_score\n";
        for (const auto& e : epochs)
            os << e.epoch << "," << e.lr << "," << e.train_loss << "," << e.val_score << "\n";
        os << "best_epoch = " << best_epoch << "\n";
        os << "best_score = " << best_score << "\n";
        os << "checkpoint = " << checkpoint_path << "\n";
        return os.str();
    }
};

template <typename T>
double validation_score(FumeNet<T>& net, const std::vector<GasFramePair>& val_pairs) {
    EvalResult r = evaluate(net, val_pairs);
    if (net.has_seg_heads()) return r.report.miou_pct;
    return r.report.accuracy_pct;  // classification-only has no mIoU
}

template <typename T = float>
RunRecord train_loop(const TrainConfig& cfg, FumeNet<T>* out_net = nullptr) {
    auto t0 = std::chrono::steady_clock::now();
    cfg.validate();
    synth::DatasetManifest manifest = synth::load_manifest(cfg.dataset);
    std::vector<GasFramePair> train_pairs = load_split(cfg.dataset, manifest, "train");
    std::vector<GasFramePair> val_pairs = load_split(cfg.dataset, manifest, "val");

    std::array<bool, 3> seen{};
    for (const auto& p : train_pairs) seen[static_cast<int>(p.label)] = true;
    if (!(seen[0] && seen[1] && seen[2]))
        throw DataError("training split must contain all three health classes");

    LossConfig loss_cfg = cfg.loss;
    fit_class_weights(train_pairs, loss_cfg);

    FumeNet<T> local_net(cfg.variant, cfg.seed);
    FumeNet<T>& net = out_net ? *out_net : local_net;
    if (out_net && (out_net->variant != cfg.variant || out_net->seed != cfg.seed))
        throw ConfigError("provided network does not match config variant/seed");

    std::filesystem::create_directories(cfg.out_dir);
    RunRecord rec;
    rec.checkpoint_path = cfg.out_dir + "/checkpoint.bin";
    Rng dropout_rng(derive_seed(cfg.seed, 0xd409));
    int step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        std::vector<std::size_t> order(train_pairs.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(cfg.seed, 0x54f1e + static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(static_cast<std::uint32_t>(i))]);

        double loss_sum = 0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<GasFramePair> chunk;
            for (std::size_t i = start;
                 i < std::min(order.size(), start + cfg.batch_size); ++i) {
                const GasFramePair& p = train_pairs[order[i]];
                if (cfg.augment) {
                    std::uint64_t aseed = derive_seed(
                        cfg.seed, 0xa000000ull + static_cast<std::uint64_t>(epoch) * 1000003ull +
                                      order[i]);
                    chunk.push_back(synth::augment(p, aseed));
                } else {
                    chunk.push_back(p);
                }
            }
            Batch<T> b = make_batch<T>(chunk);
            typename FumeNet<T>::Pass f;
            net.run(f, b.co2, b.ch4, /*train=*/true, /*with_grad=*/true, &dropout_rng,
                    b.any_co2(), b.any_ch4());
            int loss_id = loss::total_loss_node(f.tape, f.seg_co2, f.seg_ch4, f.logits,
                                                b.tgt_co2, b.tgt_ch4, b.labels, b.has_co2,
                                                b.has_ch4, loss_cfg);
            double loss_v = static_cast<double>(f.tape.val(loss_id)[0]);
            if (!std::isfinite(loss_v))
                throw NumericError("non-finite training loss at epoch " +
                                   std::to_string(epoch + 1) + ", batch " +
                                   std::to_string(batches) + " (first sample id in batch: " +
                                   std::to_string(order[start]) + ")");
            f.tape.backward(loss_id);
            net.params.zero_grad();
            net.accumulate_grads(f);
            adamw_step(net.params, ++step, lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
            loss_sum += loss_v;
            ++batches;
        }

        EpochRecord er;
        er.epoch = epoch + 1;
        er.lr = lr;
        er.train_loss = loss_sum / std::max(batches, 1);
        er.val_score = validation_score(net, val_pairs);
        rec.epochs.push_back(er);
        if (er.val_score > rec.best_score) {
            rec.best_score = er.val_score;
            rec.best_epoch = er.epoch;
            ckpt::save(rec.checkpoint_path, net.params, variant_name(cfg.variant), cfg.seed);
        }
    }

    rec.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ofstream os(cfg.out_dir + "/run.txt", std::ios::binary);
    if (os) os << rec.to_text();
    // leave the best-val weights in the returned network
    ckpt::load(rec.checkpoint_path, net.params);
    return rec;
}

// ---- latency protocol ----

template <typename T>
metrics::LatencyResult bench_variant(FumeNet<T>& net, int size, int warmup = 100,
                                     int iterations = 1000) {
    Tensor<T> co2 = Tensor<T>::zeros({1, 1, size, size});
    Tensor<T> ch4 = Tensor<T>::zeros({1, 1, size, size});
    Rng fill(derive_seed(net.seed, 0xbe9c));
    for (auto& v : co2.data) v = static_cast<T>(fill.uniform());
    for (auto& v : ch4.data) v = static_cast<T>(fill.uniform());
    return metrics::bench_latency(
        [&]() {
            typename FumeNet<T>::Pass f;
            net.run(f, co2, ch4, false, false);
        },
        warmup, iterations);
}

// ---- ablation sweep ----

struct AblationRow {
    std::string variant;
    double acc = MetricsReport::nan_();
    double miou = MetricsReport::nan_();
    double dice = MetricsReport::nan_();
    double latency_ms = MetricsReport::nan_();
    double delta_miou = MetricsReport::nan_();
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "variant,acc,miou,dice,latency_ms,delta_miou\n";
    auto cell = [](double v) {
        return std::isnan(v) ? std::string() : MetricsReport::format_value(v);
    };
    for (const auto& r : rows)
        os << r.variant << "," << cell(r.acc) << "," << cell(r.miou) << "," << cell(r.dice)
           << "," << cell(r.latency_ms) << "," << cell(r.delta_miou) << "\n";
    return os.str();
}

// Trains and evaluates all 7 variants with the shared seed and dataset.
template <typename T = float>
std::vector<AblationRow> ablation_sweep(const TrainConfig& base_cfg,
                                        int bench_warmup = 100, int bench_iters = 1000) {
    std::vector<AblationRow> rows;
    double fume_miou = MetricsReport::nan_();
    synth::DatasetManifest manifest = synth::load_manifest(base_cfg.dataset);
    for (Variant v : all_variants()) {
        TrainConfig cfg = base_cfg;
        cfg.variant = v;
        cfg.out_dir = base_cfg.out_dir + "/" + variant_name(v);
        FumeNet<T> net(v, cfg.seed);
        train_loop<T>(cfg, &net);
        std::vector<GasFramePair> test_pairs = load_split(cfg.dataset, manifest, "test");
        EvalResult er = evaluate(net, test_pairs);
        AblationRow row;
        row.variant = variant_name(v);
        row.acc = er.report.accuracy_pct;
        row.miou = er.report.miou_pct;
        row.dice = er.report.dice_pct;
        row.latency_ms = bench_variant(net, cfg.bench_size, bench_warmup, bench_iters).latency_ms;
        if (v == Variant::Fume) fume_miou = row.miou;
        rows.push_back(row);
    }
    for (auto& row : rows)
        if (!std::isnan(row.miou) && !std::isnan(fume_miou))
            row.delta_miou = row.miou - fume_miou;
    return rows;
}

}  // namespace train
}  // namespace fume
