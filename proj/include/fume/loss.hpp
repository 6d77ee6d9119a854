#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fume/common.hpp"
#include "fume/tape.hpp"
#include "fume/tensor.hpp"

namespace fume {

struct LossConfig {
    double focal_gamma = 2.0;
    std::array<double, 3> seg_class_weights{1.0, 1.0, 1.0};
    std::array<double, 3> cls_class_weights{1.0, 1.0, 1.0};
    double lambda = 0.5;
    double dice_smooth = 1.0;

    void validate() const {
        for (double w : seg_class_weights)
            if (w < 0) throw ConfigError("segmentation class weights must be non-negative");
        for (double w : cls_class_weights)
            if (w < 0) throw ConfigError("classification class weights must be non-negative");
        if (dice_smooth <= 0) throw ConfigError("dice smoothing must be positive");
        if (focal_gamma < 0) throw ConfigError("focal gamma must be non-negative");
    }
};

// Inverse class frequency, normalized so the weights average to 1. Classes
// absent from the counts get the largest observed weight.
inline std::array<double, 3> inverse_frequency_weights(const std::array<std::uint64_t, 3>& counts) {
    std::array<double, 3> w{};
    std::uint64_t total = 0;
    for (auto c : counts) total += c;
    if (total == 0) return {1.0, 1.0, 1.0};
    double max_w = 0;
    for (int k = 0; k < 3; ++k)
        if (counts[k]) max_w = std::max(max_w, static_cast<double>(total) / counts[k]);
    if (max_w == 0) return {1.0, 1.0, 1.0};
    for (int k = 0; k < 3; ++k)
        w[k] = counts[k] ? static_cast<double>(total) / counts[k] : max_w;
    double mean = (w[0] + w[1] + w[2]) / 3.0;
    for (double& v : w) v /= mean;
    return w;
}

namespace loss {

constexpr double kLogClamp = 1e-12;

// Layout helper over class-probability tensors: rank-4 N x C x H x W pixels or
// rank-2 N x C samples. "Element" means one pixel or one sample.
template <typename T>
struct ProbView {
    const Tensor<T>& probs;
    int n, c, hw;
    explicit ProbView(const Tensor<T>& p) : probs(p) {
        if (p.shape.size() == 4) {
            n = p.shape[0]; c = p.shape[1]; hw = p.shape[2] * p.shape[3];
        } else if (p.shape.size() == 2) {
            n = p.shape[0]; c = p.shape[1]; hw = 1;
        } else {
            throw ShapeError("loss expects N x C or N x C x H x W probabilities, got " +
                             shape_str(p.shape));
        }
    }
    std::size_t elements() const { return static_cast<std::size_t>(n) * hw; }
    int sample_of(std::size_t e) const { return static_cast<int>(e / hw); }
    std::size_t at(std::size_t e, int k) const {
        std::size_t s = e / hw, pix = e % hw;
        return (s * c + k) * hw + pix;
    }
};

inline bool present(const std::vector<std::uint8_t>& mask, int sample) {
    return mask.empty() || mask[sample] != 0;
}

// Mean over present elements of -alpha_c (1-p_c)^gamma log p_c for the true
// class c. gamma = 0 with unit weights is plain cross-entropy.
template <typename T>
double focal_value(const Tensor<T>& probs, const std::vector<int>& targets,
                   const std::vector<double>& weights, double gamma,
                   const std::vector<std::uint8_t>& mask = {},
                   Tensor<T>* grad = nullptr) {
    ProbView<T> v(probs);
    if (targets.size() != v.elements())
        throw ShapeError("focal targets length " + std::to_string(targets.size()) +
                         " does not match " + std::to_string(v.elements()) + " elements");
    if (grad) *grad = Tensor<T>::zeros(probs.shape);
    std::size_t m = 0;
    for (std::size_t e = 0; e < v.elements(); ++e)
        if (present(mask, v.sample_of(e))) ++m;
    if (m == 0) return 0.0;
    double acc = 0;
    for (std::size_t e = 0; e < v.elements(); ++e) {
        if (!present(mask, v.sample_of(e))) continue;
        int c = targets[e];
        if (c < 0 || c >= v.c)
            throw DataError("target class " + std::to_string(c) + " out of range");
        double alpha = c < static_cast<int>(weights.size()) ? weights[c] : 1.0;
        double p = static_cast<double>(probs[v.at(e, c)]);
        double pc = std::max(p, kLogClamp);
        double om = 1.0 - p;
        double pw = gamma == 0.0 ? 1.0 : std::pow(std::max(om, 0.0), gamma);
        acc += -alpha * pw * std::log(pc);
        if (grad) {
            double dpw = gamma == 0.0
                             ? 0.0
                             : -gamma * std::pow(std::max(om, 0.0), gamma - 1.0) * std::log(pc);
            double dlog = p > kLogClamp ? pw / p : 0.0;
            (*grad)[v.at(e, c)] = static_cast<T>(-alpha * (dpw + dlog) / static_cast<double>(m));
        }
    }
    return acc / static_cast<double>(m);
}

// 1 - mean over classes of (2 sum(p*t) + eps) / (sum p + sum t + eps), sums
// pooled over all present elements.
template <typename T>
double dice_value(const Tensor<T>& probs, const std::vector<int>& targets, double smooth,
                  const std::vector<std::uint8_t>& mask = {}, Tensor<T>* grad = nullptr) {
    ProbView<T> v(probs);
    if (targets.size() != v.elements())
        throw ShapeError("dice targets length does not match probability elements");
    std::vector<double> num(v.c, smooth), den(v.c, smooth);
    for (std::size_t e = 0; e < v.elements(); ++e) {
        if (!present(mask, v.sample_of(e))) continue;
        int c = targets[e];
        for (int k = 0; k < v.c; ++k) {
            double p = static_cast<double>(probs[v.at(e, k)]);
            num[k] += (k == c) ? 2.0 * p : 0.0;
            den[k] += p + (k == c ? 1.0 : 0.0);
        }
    }
    double mean_dice = 0;
    for (int k = 0; k < v.c; ++k) mean_dice += num[k] / den[k];
    mean_dice /= v.c;
    if (grad) {
        *grad = Tensor<T>::zeros(probs.shape);
        for (std::size_t e = 0; e < v.elements(); ++e) {
            if (!present(mask, v.sample_of(e))) continue;
            int c = targets[e];
            for (int k = 0; k < v.c; ++k) {
                double t = (k == c) ? 1.0 : 0.0;
                double d = (2.0 * t * den[k] - num[k]) / (den[k] * den[k]);
                (*grad)[v.at(e, k)] = static_cast<T>(-d / v.c);
            }
        }
    }
    return 1.0 - mean_dice;
}

template <typename T>
double seg_value(const Tensor<T>& probs, const std::vector<int>& targets,
                 const LossConfig& cfg, const std::vector<std::uint8_t>& mask = {}) {
    std::vector<double> w(cfg.seg_class_weights.begin(), cfg.seg_class_weights.end());
    return 0.5 * focal_value(probs, targets, w, cfg.focal_gamma, mask) +
           0.5 * dice_value(probs, targets, cfg.dice_smooth, mask);
}

inline double total_value(double seg_co2, double seg_ch4, double cls, const LossConfig& cfg) {
    return seg_co2 + seg_ch4 + cfg.lambda * cls;
}

// ---- differentiable tape nodes ----

template <typename T>
int focal_node(Tape<T>& tape, int probs_id, std::vector<int> targets,
               std::vector<double> weights, double gamma,
               std::vector<std::uint8_t> mask = {}) {
    const Tensor<T>& probs = tape.val(probs_id);
    Tensor<T> g;
    double value = focal_value(probs, targets, weights, gamma, mask, &g);
    Tensor<T> out({1}, {static_cast<T>(value)});
    auto grad = std::make_shared<Tensor<T>>(std::move(g));
    return tape.custom({probs_id}, std::move(out), [grad, probs_id](Tape<T>& t, int self) {
        T gy = t.grad(self)[0];
        Tensor<T>& gp = t.grad(probs_id);
        for (std::size_t i = 0; i < gp.numel(); ++i) gp[i] += gy * (*grad)[i];
    });
}

template <typename T>
int dice_node(Tape<T>& tape, int probs_id, std::vector<int> targets, double smooth,
              std::vector<std::uint8_t> mask = {}) {
    const Tensor<T>& probs = tape.val(probs_id);
    Tensor<T> g;
    double value = dice_value(probs, targets, smooth, mask, &g);
    Tensor<T> out({1}, {static_cast<T>(value)});
    auto grad = std::make_shared<Tensor<T>>(std::move(g));
    return tape.custom({probs_id}, std::move(out), [grad, probs_id](Tape<T>& t, int self) {
        T gy = t.grad(self)[0];
        Tensor<T>& gp = t.grad(probs_id);
        for (std::size_t i = 0; i < gp.numel(); ++i) gp[i] += gy * (*grad)[i];
    });
}

// Takes raw scores, applies softmax over the class axis, then the 0.5/0.5
// focal + dice blend.
template <typename T>
int seg_loss_node(Tape<T>& tape, int scores_id, const std::vector<int>& targets,
                  const LossConfig& cfg, const std::vector<std::uint8_t>& mask = {}) {
    int probs = tape.softmax_channel(scores_id);
    std::vector<double> w(cfg.seg_class_weights.begin(), cfg.seg_class_weights.end());
    int f = focal_node(tape, probs, targets, w, cfg.focal_gamma, mask);
    int d = dice_node(tape, probs, targets, cfg.dice_smooth, mask);
    return tape.add(tape.scale_const(f, T(0.5)), tape.scale_const(d, T(0.5)));
}

template <typename T>
int cls_loss_node(Tape<T>& tape, int logits_id, const std::vector<int>& labels,
                  const LossConfig& cfg) {
    int probs = tape.softmax_rows(logits_id);
    std::vector<double> w(cfg.cls_class_weights.begin(), cfg.cls_class_weights.end());
    return focal_node(tape, probs, labels, w, cfg.focal_gamma);
}

// Multi-task objective: seg_co2 + seg_ch4 + lambda * cls. Pass -1 for heads a
// variant does not produce; a fully absent modality contributes exactly 0.
template <typename T>
int total_loss_node(Tape<T>& tape, int seg_co2_scores, int seg_ch4_scores, int logits,
                    const std::vector<int>& tgt_co2, const std::vector<int>& tgt_ch4,
                    const std::vector<int>& labels,
                    const std::vector<std::uint8_t>& has_co2,
                    const std::vector<std::uint8_t>& has_ch4, const LossConfig& cfg) {
    int total = -1;
    auto accumulate = [&](int id) { total = total < 0 ? id : tape.add(total, id); };
    auto any = [](const std::vector<std::uint8_t>& m) {
        if (m.empty()) return true;
        for (auto v : m)
            if (v) return true;
        return false;
    };
    if (seg_co2_scores >= 0 && any(has_co2))
        accumulate(seg_loss_node(tape, seg_co2_scores, tgt_co2, cfg, has_co2));
    if (seg_ch4_scores >= 0 && any(has_ch4))
        accumulate(seg_loss_node(tape, seg_ch4_scores, tgt_ch4, cfg, has_ch4));
    if (logits >= 0)
        accumulate(tape.scale_const(cls_loss_node(tape, logits, labels, cfg),
                                    static_cast<T>(cfg.lambda)));
    if (total < 0) throw ConfigError("total loss has no terms");
    return total;
}

}  // namespace loss
}  // namespace fume
