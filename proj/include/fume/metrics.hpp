#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fume/common.hpp"
#include "fume/tensor.hpp"

namespace fume {

using Mask = Tensor<int>;  // H x W labels

namespace metrics {

inline void check_masks(const Mask& pred, const Mask& gt) {
    if (pred.shape.size() != 2 || gt.shape.size() != 2)
        throw ShapeError("masks must be rank 2, got " + shape_str(pred.shape) + " and " +
                         shape_str(gt.shape));
    if (pred.shape != gt.shape)
        throw ShapeError("mask shape mismatch: " + shape_str(pred.shape) + " vs " +
                         shape_str(gt.shape));
}

inline double iou(const Mask& pred, const Mask& gt, int cls) {
    check_masks(pred, gt);
    std::uint64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        bool p = pred[i] == cls, g = gt[i] == cls;
        inter += p && g;
        uni += p || g;
    }
    if (uni == 0) return 1.0;  // correctly absent class
    return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double dice_coeff(const Mask& pred, const Mask& gt, int cls) {
    check_masks(pred, gt);
    std::uint64_t inter = 0, np = 0, ng = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        bool p = pred[i] == cls, g = gt[i] == cls;
        inter += p && g;
        np += p;
        ng += g;
    }
    if (np + ng == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

// Class pixels 4-adjacent to a non-class pixel; image border pixels of the
// class count as boundary.
inline std::vector<std::pair<int, int>> boundary_pixels(const Mask& m, int cls) {
    int H = m.shape[0], W = m.shape[1];
    std::vector<std::pair<int, int>> out;
    auto at = [&](int r, int c) { return m[static_cast<std::size_t>(r) * W + c]; };
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            if (at(r, c) != cls) continue;
            bool border = r == 0 || c == 0 || r == H - 1 || c == W - 1;
            bool edge = border || at(r - 1, c) != cls || at(r + 1, c) != cls ||
                        at(r, c - 1) != cls || at(r, c + 1) != cls;
            if (edge) out.emplace_back(r, c);
        }
    return out;
}

// Pooled symmetric multiset of directed boundary-to-boundary Euclidean
// distances. Empty when either boundary is empty (metric undefined).
inline std::optional<std::vector<double>> surface_distances(const Mask& pred, const Mask& gt,
                                                            int cls) {
    check_masks(pred, gt);
    auto bp = boundary_pixels(pred, cls);
    auto bg = boundary_pixels(gt, cls);
    if (bp.empty() || bg.empty()) return std::nullopt;
    std::vector<double> pooled;
    pooled.reserve(bp.size() + bg.size());
    auto directed = [&](const std::vector<std::pair<int, int>>& from,
                        const std::vector<std::pair<int, int>>& to) {
        for (const auto& [r, c] : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& [r2, c2] : to) {
                double dr = r - r2, dc = c - c2;
                best = std::min(best, dr * dr + dc * dc);
            }
            pooled.push_back(std::sqrt(best));
        }
    };
    directed(bp, bg);
    directed(bg, bp);
    return pooled;
}

// Nearest-rank percentile of a multiset: element at rank ceil(p/100 * n).
inline double nearest_rank_percentile(std::vector<double> v, double p) {
    if (v.empty()) throw DataError("percentile of empty multiset");
    std::sort(v.begin(), v.end());
    std::size_t rank = static_cast<std::size_t>(
        std::ceil(p / 100.0 * static_cast<double>(v.size())));
    rank = std::max<std::size_t>(rank, 1);
    return v[std::min(rank, v.size()) - 1];
}

inline std::optional<double> hd95(const Mask& pred, const Mask& gt, int cls) {
    auto d = surface_distances(pred, gt, cls);
    if (!d) return std::nullopt;
    return nearest_rank_percentile(std::move(*d), 95.0);
}

inline std::optional<double> asd(const Mask& pred, const Mask& gt, int cls) {
    auto d = surface_distances(pred, gt, cls);
    if (!d) return std::nullopt;
    double s = 0;
    for (double x : *d) s += x;
    return s / static_cast<double>(d->size());
}

struct ConfusionMatrix {
    std::array<std::array<std::uint64_t, 3>, 3> m{};  // [truth][prediction]

    void add(int truth, int pred, std::uint64_t n = 1) {
        if (truth < 0 || truth > 2 || pred < 0 || pred > 2)
            throw DataError("confusion matrix labels must be in {0,1,2}");
        m[truth][pred] += n;
    }
    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (const auto& row : m)
            for (auto v : row) t += v;
        return t;
    }
};

struct ClassificationMetrics {
    double accuracy = 0;                 // fractions in [0,1]
    std::array<double, 3> f1{};
    double macro_f1 = 0;
    double balanced_accuracy = 0;
};

inline ClassificationMetrics classification_metrics(const ConfusionMatrix& cm) {
    ClassificationMetrics out;
    std::uint64_t total = cm.total();
    if (total == 0) throw DataError("classification metrics on empty confusion matrix");
    std::uint64_t diag = 0;
    for (int k = 0; k < 3; ++k) diag += cm.m[k][k];
    out.accuracy = static_cast<double>(diag) / total;
    double recall_sum = 0;
    for (int k = 0; k < 3; ++k) {
        std::uint64_t tp = cm.m[k][k], fp = 0, fn = 0;
        for (int j = 0; j < 3; ++j) {
            if (j != k) {
                fp += cm.m[j][k];
                fn += cm.m[k][j];
            }
        }
        double precision = (tp + fp) ? static_cast<double>(tp) / (tp + fp) : 0.0;
        double recall = (tp + fn) ? static_cast<double>(tp) / (tp + fn) : 0.0;
        out.f1[k] = (precision + recall > 0) ? 2 * precision * recall / (precision + recall)
                                             : 0.0;
        out.macro_f1 += out.f1[k] / 3.0;
        recall_sum += recall;
    }
    out.balanced_accuracy = recall_sum / 3.0;
    return out;
}

// Mean wall-clock per forward call; warmup calls are not timed.
// FPS * latency_ms = 1000 by construction.
struct LatencyResult {
    double latency_ms = 0;
    double fps = 0;
};

inline LatencyResult bench_latency(const std::function<void()>& forward, int warmup = 100,
                                   int iterations = 1000) {
    if (iterations <= 0) throw ConfigError("benchmark iterations must be positive");
    for (int i = 0; i < warmup; ++i) forward();
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < iterations; ++i) forward();
    auto t1 = std::chrono::steady_clock::now();
    double ms = std::chrono::duration<double, std::milli>(t1 - t0).count() / iterations;
    LatencyResult r;
    r.latency_ms = ms;
    r.fps = 1000.0 / ms;
    return r;
}

}  // namespace metrics

// Flat evaluation report. Percent-scaled fields carry a _pct suffix; distances
// are in pixels. NaN marks quantities a variant does not produce.
struct MetricsReport {
    double accuracy_pct = nan_();
    std::array<double, 3> f1_pct{nan_(), nan_(), nan_()};
    double macro_f1_pct = nan_();
    double balanced_accuracy_pct = nan_();
    std::array<double, 3> iou_co2_pct{nan_(), nan_(), nan_()};
    std::array<double, 3> iou_ch4_pct{nan_(), nan_(), nan_()};
    double miou_pct = nan_();
    double dice_pct = nan_();
    double hd95_gas_px = nan_();
    double hd95_class_avg_px = nan_();
    double asd_gas_px = nan_();
    double asd_class_avg_px = nan_();
    std::uint64_t boundary_excluded = 0;
    double params_m = nan_();
    double macs_g = nan_();
    double latency_ms = nan_();
    double fps = nan_();

    static double nan_() { return std::numeric_limits<double>::quiet_NaN(); }

    std::vector<std::pair<std::string, double>> items() const {
        return {
            {"accuracy_pct", accuracy_pct},
            {"f1_healthy_pct", f1_pct[0]},
            {"f1_transitional_pct", f1_pct[1]},
            {"f1_acidotic_pct", f1_pct[2]},
            {"macro_f1_pct", macro_f1_pct},
            {"balanced_accuracy_pct", balanced_accuracy_pct},
            {"iou_co2_background_pct", iou_co2_pct[0]},
            {"iou_co2_tube_pct", iou_co2_pct[1]},
            {"iou_co2_gas_pct", iou_co2_pct[2]},
            {"iou_ch4_background_pct", iou_ch4_pct[0]},
            {"iou_ch4_tube_pct", iou_ch4_pct[1]},
            {"iou_ch4_gas_pct", iou_ch4_pct[2]},
            {"miou_pct", miou_pct},
            {"dice_pct", dice_pct},
            {"hd95_gas_px", hd95_gas_px},
            {"hd95_class_avg_px", hd95_class_avg_px},
            {"asd_gas_px", asd_gas_px},
            {"asd_class_avg_px", asd_class_avg_px},
            {"boundary_excluded", static_cast<double>(boundary_excluded)},
            {"params_m", params_m},
            {"macs_g", macs_g},
            {"latency_ms", latency_ms},
            {"fps", fps},
        };
    }

    static std::string format_value(double v) {
        if (std::isnan(v)) return "nan";
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(6);
        os << v;
        return os.str();
    }

    std::string to_key_value() const {
        std::ostringstream os;
        for (const auto& [k, v] : items()) os << k << " = " << format_value(v) << "\n";
        return os.str();
    }

    static std::string csv_header() {
        std::string h;
        MetricsReport r;
        for (const auto& [k, v] : r.items()) {
            if (!h.empty()) h += ",";
            h += k;
        }
        return h;
    }

    std::string to_csv_row() const {
        std::string row;
        for (const auto& [k, v] : items()) {
            if (!row.empty()) row += ",";
            row += format_value(v);
        }
        return row;
    }
};

}  // namespace fume
