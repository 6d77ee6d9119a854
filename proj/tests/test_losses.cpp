#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fume/loss.hpp"
#include "fume/tape.hpp"

using namespace fume;

namespace {

Tensor<double> random_probs(int n, int c, Rng& rng) {
    Tensor<double> t({n, c});
    for (int i = 0; i < n; ++i) {
        double sum = 0;
        for (int k = 0; k < c; ++k) {
            double v = 0.05 + rng.uniform();
            t[static_cast<std::size_t>(i) * c + k] = v;
            sum += v;
        }
        for (int k = 0; k < c; ++k) t[static_cast<std::size_t>(i) * c + k] /= sum;
    }
    return t;
}

std::vector<double> unit3{1.0, 1.0, 1.0};

}  // namespace

TEST_CASE("focal loss hand values") {
    // perfect prediction costs nothing
    Tensor<double> perfect({1, 3}, {1.0, 0.0, 0.0});
    CHECK(loss::focal_value(perfect, {0}, unit3, 2.0) == Catch::Approx(0.0).margin(1e-15));

    // gamma 2, alpha 1, p = 0.5: (1 - 0.5)^2 * ln 2
    Tensor<double> half({1, 2}, {0.5, 0.5});
    CHECK(loss::focal_value(half, {0}, {1.0, 1.0}, 2.0) ==
          Catch::Approx(0.25 * std::log(2.0)).epsilon(1e-12));

    // class weight scales linearly
    CHECK(loss::focal_value(half, {0}, {3.0, 1.0}, 2.0) ==
          Catch::Approx(0.75 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("focal loss with gamma 0 is weighted cross-entropy") {
    Rng rng(5);
    auto probs = random_probs(16, 3, rng);
    std::vector<int> targets;
    for (int i = 0; i < 16; ++i) targets.push_back(static_cast<int>(rng.below(3)));
    std::vector<double> w{0.7, 1.1, 1.2};
    double ce = 0;
    for (int i = 0; i < 16; ++i)
        ce += -w[targets[i]] * std::log(probs[static_cast<std::size_t>(i) * 3 + targets[i]]);
    ce /= 16.0;
    CHECK(loss::focal_value(probs, targets, w, 0.0) == Catch::Approx(ce).epsilon(1e-12));
}

TEST_CASE("focal loss decreases as the true-class probability rises") {
    double prev = 1e9;
    for (double p : {0.1, 0.3, 0.5, 0.7, 0.9, 0.99}) {
        Tensor<double> probs({1, 2}, {p, 1.0 - p});
        double v = loss::focal_value(probs, {0}, {1.0, 1.0}, 2.0);
        CHECK(v < prev);
        prev = v;
    }
}

TEST_CASE("dice loss hand values") {
    // matching one-hot prediction: num == den for every class
    Tensor<double> perfect({2, 2}, {1.0, 0.0, 0.0, 1.0});
    CHECK(loss::dice_value(perfect, {0, 1}, 1.0) == Catch::Approx(0.0).margin(1e-15));

    // two elements, two classes, smooth 1
    Tensor<double> p({2, 2}, {0.8, 0.2, 0.3, 0.7});
    double c0 = (1.0 + 2.0 * 0.8) / (1.0 + (0.8 + 0.3) + 1.0);
    double c1 = (1.0 + 2.0 * 0.7) / (1.0 + (0.2 + 0.7) + 1.0);
    CHECK(loss::dice_value(p, {0, 1}, 1.0) == Catch::Approx(1.0 - 0.5 * (c0 + c1)).epsilon(1e-12));

    // fully disjoint prediction only earns the smoothing credit
    Tensor<double> wrong({1, 2}, {0.0, 1.0});
    double d0 = 1.0 / (1.0 + 0.0 + 1.0);
    double d1 = 1.0 / (1.0 + 1.0 + 0.0);
    CHECK(loss::dice_value(wrong, {0}, 1.0) ==
          Catch::Approx(1.0 - 0.5 * (d0 + d1)).epsilon(1e-12));
}

TEST_CASE("dice pools over all pixels before the ratio") {
    // pooled dice differs from per-element dice: a confident hit plus a miss
    // scores the same as two mediocre predictions with equal sums
    Rng rng(9);
    Tensor<double> probs({1, 3, 2, 2});
    for (auto& v : probs.data) v = rng.uniform();
    std::vector<int> targets{0, 1, 2, 1};
    {
        loss::ProbView<double> v(probs);
        std::vector<double> num(3, 1.0), den(3, 1.0);
        for (std::size_t e = 0; e < v.elements(); ++e)
            for (int k = 0; k < 3; ++k) {
                double pv = probs[v.at(e, k)];
                if (k == targets[e]) num[k] += 2.0 * pv;
                den[k] += pv + (k == targets[e] ? 1.0 : 0.0);
            }
        double expect = 1.0 - (num[0] / den[0] + num[1] / den[1] + num[2] / den[2]) / 3.0;
        CHECK(loss::dice_value(probs, targets, 1.0) == Catch::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("segmentation loss is the even focal and dice blend") {
    Rng rng(11);
    auto probs = random_probs(8, 3, rng);
    std::vector<int> targets;
    for (int i = 0; i < 8; ++i) targets.push_back(static_cast<int>(rng.below(3)));
    LossConfig cfg;
    cfg.seg_class_weights = {0.9, 1.0, 1.1};
    std::vector<double> w(cfg.seg_class_weights.begin(), cfg.seg_class_weights.end());
    double f = loss::focal_value(probs, targets, w, cfg.focal_gamma);
    double d = loss::dice_value(probs, targets, cfg.dice_smooth);
    CHECK(loss::seg_value(probs, targets, cfg) == Catch::Approx(0.5 * f + 0.5 * d).epsilon(1e-12));
}

TEST_CASE("total objective weighs classification by lambda") {
    LossConfig cfg;
    cfg.lambda = 0.5;
    CHECK(loss::total_value(1.0, 2.0, 4.0, cfg) == Catch::Approx(5.0).epsilon(1e-15));
    cfg.lambda = 0.0;
    CHECK(loss::total_value(1.0, 2.0, 4.0, cfg) == Catch::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("masked samples contribute nothing") {
    Rng rng(13);
    auto probs = random_probs(6, 3, rng);
    std::vector<int> targets;
    for (int i = 0; i < 6; ++i) targets.push_back(static_cast<int>(rng.below(3)));
    std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1};

    Tensor<double> kept({4, 3});
    std::vector<int> kept_t;
    int row = 0;
    for (int i = 0; i < 6; ++i) {
        if (!mask[i]) continue;
        for (int k = 0; k < 3; ++k)
            kept[static_cast<std::size_t>(row) * 3 + k] = probs[static_cast<std::size_t>(i) * 3 + k];
        kept_t.push_back(targets[i]);
        ++row;
    }
    CHECK(loss::focal_value(probs, targets, unit3, 2.0, mask) ==
          Catch::Approx(loss::focal_value(kept, kept_t, unit3, 2.0)).epsilon(1e-12));
    CHECK(loss::dice_value(probs, targets, 1.0, mask) ==
          Catch::Approx(loss::dice_value(kept, kept_t, 1.0)).epsilon(1e-12));

    std::vector<std::uint8_t> none(6, 0);
    CHECK(loss::focal_value(probs, targets, unit3, 2.0, none) == 0.0);
}

TEST_CASE("focal and dice nodes match finite differences through softmax") {
    Rng rng(17);
    Tensor<double> scores({2, 3, 2, 2});
    for (auto& v : scores.data) v = rng.uniform() * 2 - 1;
    std::vector<int> targets;
    for (int i = 0; i < 8; ++i) targets.push_back(static_cast<int>(rng.below(3)));
    std::vector<std::uint8_t> mask{1, 1};
    LossConfig cfg;
    cfg.seg_class_weights = {1.2, 0.8, 1.0};

    auto value_at = [&](const Tensor<double>& s) {
        Tape<double> tp;
        int probs = tp.softmax_channel(tp.leaf(s, false));
        std::vector<double> w(cfg.seg_class_weights.begin(), cfg.seg_class_weights.end());
        double f = loss::focal_value(tp.val(probs), targets, w, cfg.focal_gamma, mask);
        double d = loss::dice_value(tp.val(probs), targets, cfg.dice_smooth, mask);
        return 0.5 * f + 0.5 * d;
    };

    Tape<double> tp;
    int x = tp.leaf(scores, true);
    int l = loss::seg_loss_node(tp, x, targets, cfg, mask);
    tp.backward(l);
    const Tensor<double>& analytic = tp.grad(x);
    CHECK(tp.val(l)[0] == Catch::Approx(value_at(scores)).epsilon(1e-12));

    double h = 1e-6, worst = 0;
    for (std::size_t i = 0; i < scores.numel(); ++i) {
        Tensor<double> sp = scores, sm = scores;
        sp[i] += h;
        sm[i] -= h;
        double numeric = (value_at(sp) - value_at(sm)) / (2 * h);
        double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("classification loss node matches finite differences") {
    Rng rng(19);
    Tensor<double> logits({4, 3});
    for (auto& v : logits.data) v = rng.uniform() * 2 - 1;
    std::vector<int> labels{0, 2, 1, 2};
    LossConfig cfg;
    cfg.cls_class_weights = {1.0, 1.4, 0.6};

    auto value_at = [&](const Tensor<double>& s) {
        Tape<double> tp;
        int probs = tp.softmax_rows(tp.leaf(s, false));
        std::vector<double> w(cfg.cls_class_weights.begin(), cfg.cls_class_weights.end());
        return loss::focal_value(tp.val(probs), labels, w, cfg.focal_gamma);
    };

    Tape<double> tp;
    int x = tp.leaf(logits, true);
    int l = loss::cls_loss_node(tp, x, labels, cfg);
    tp.backward(l);
    const Tensor<double>& analytic = tp.grad(x);

    double h = 1e-6, worst = 0;
    for (std::size_t i = 0; i < logits.numel(); ++i) {
        Tensor<double> sp = logits, sm = logits;
        sp[i] += h;
        sm[i] -= h;
        double numeric = (value_at(sp) - value_at(sm)) / (2 * h);
        double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("total loss node composes the three heads") {
    Rng rng(23);
    Tensor<double> s_co2({2, 3, 2, 2}), s_ch4({2, 3, 2, 2}), logits({2, 3});
    for (auto& v : s_co2.data) v = rng.uniform();
    for (auto& v : s_ch4.data) v = rng.uniform();
    for (auto& v : logits.data) v = rng.uniform();
    std::vector<int> t_co2, t_ch4;
    for (int i = 0; i < 8; ++i) {
        t_co2.push_back(static_cast<int>(rng.below(3)));
        t_ch4.push_back(static_cast<int>(rng.below(3)));
    }
    std::vector<int> labels{1, 2};
    LossConfig cfg;

    auto part = [&](const Tensor<double>& s, const std::vector<int>& t,
                    const std::vector<std::uint8_t>& m) {
        Tape<double> tp;
        return tp.val(loss::seg_loss_node(tp, tp.leaf(s, false), t, cfg, m))[0];
    };
    auto cls_part = [&]() {
        Tape<double> tp;
        return tp.val(loss::cls_loss_node(tp, tp.leaf(logits, false), labels, cfg))[0];
    };

    Tape<double> tp;
    int total = loss::total_loss_node(tp, tp.leaf(s_co2, false), tp.leaf(s_ch4, false),
                                      tp.leaf(logits, false), t_co2, t_ch4, labels, {1, 1},
                                      {1, 1}, cfg);
    double expect = part(s_co2, t_co2, {1, 1}) + part(s_ch4, t_ch4, {1, 1}) +
                    cfg.lambda * cls_part();
    CHECK(tp.val(total)[0] == Catch::Approx(expect).epsilon(1e-12));

    // a fully absent modality drops its segmentation term entirely
    Tape<double> tp2;
    int no_ch4 = loss::total_loss_node(tp2, tp2.leaf(s_co2, false), tp2.leaf(s_ch4, false),
                                       tp2.leaf(logits, false), t_co2, t_ch4, labels, {1, 1},
                                       {0, 0}, cfg);
    CHECK(tp2.val(no_ch4)[0] ==
          Catch::Approx(part(s_co2, t_co2, {1, 1}) + cfg.lambda * cls_part()).epsilon(1e-12));

    // missing heads are skipped; no heads at all is a configuration error
    Tape<double> tp3;
    int seg_only = loss::total_loss_node(tp3, tp3.leaf(s_co2, false), -1, -1, t_co2, t_ch4,
                                         labels, {1, 1}, {1, 1}, cfg);
    CHECK(tp3.val(seg_only)[0] == Catch::Approx(part(s_co2, t_co2, {1, 1})).epsilon(1e-12));
    Tape<double> tp4;
    CHECK_THROWS_AS(
        loss::total_loss_node(tp4, -1, -1, -1, t_co2, t_ch4, labels, {1, 1}, {1, 1}, cfg),
        ConfigError);
}

TEST_CASE("inverse frequency weights") {
    auto w = inverse_frequency_weights({100, 100, 100});
    CHECK(w[0] == Catch::Approx(1.0));
    CHECK(w[1] == Catch::Approx(1.0));
    CHECK(w[2] == Catch::Approx(1.0));

    // raw weights total/count, then normalized to mean 1
    auto v = inverse_frequency_weights({1, 2, 4});
    double r0 = 7.0 / 1, r1 = 7.0 / 2, r2 = 7.0 / 4;
    double mean = (r0 + r1 + r2) / 3;
    CHECK(v[0] == Catch::Approx(r0 / mean).epsilon(1e-12));
    CHECK(v[1] == Catch::Approx(r1 / mean).epsilon(1e-12));
    CHECK(v[2] == Catch::Approx(r2 / mean).epsilon(1e-12));
    CHECK((v[0] + v[1] + v[2]) / 3 == Catch::Approx(1.0).epsilon(1e-12));

    // absent class borrows the largest observed weight
    auto a = inverse_frequency_weights({3, 0, 6});
    CHECK(a[1] == Catch::Approx(a[0]).epsilon(1e-12));
    CHECK(a[0] > a[2]);

    CHECK(inverse_frequency_weights({0, 0, 0})[0] == 1.0);
}

TEST_CASE("loss configuration validation") {
    LossConfig ok;
    CHECK_NOTHROW(ok.validate());
    LossConfig bad = ok;
    bad.seg_class_weights[1] = -0.1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = ok;
    bad.dice_smooth = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = ok;
    bad.focal_gamma = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
