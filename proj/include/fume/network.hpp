#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fume/common.hpp"
#include "fume/kernelspec.hpp"
#include "fume/params.hpp"
#include "fume/tape.hpp"
#include "fume/tensor.hpp"

namespace fume {

enum class Variant {
    Fume,
    FullCrossModalAttn,
    SelfAttnOnly,
    Co2Only,
    Ch4Only,
    ClassificationOnly,
    SegmentationOnly,
};

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Fume: return "fume";
        case Variant::FullCrossModalAttn: return "full-cross-modal-attn";
        case Variant::SelfAttnOnly: return "self-attn-only";
        case Variant::Co2Only: return "co2-only";
        case Variant::Ch4Only: return "ch4-only";
        case Variant::ClassificationOnly: return "classification-only";
        case Variant::SegmentationOnly: return "segmentation-only";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    for (Variant v : {Variant::Fume, Variant::FullCrossModalAttn, Variant::SelfAttnOnly,
                      Variant::Co2Only, Variant::Ch4Only, Variant::ClassificationOnly,
                      Variant::SegmentationOnly})
        if (s == variant_name(v)) return v;
    throw ConfigError("unknown variant: " + s);
}

inline std::vector<Variant> all_variants() {
    return {Variant::Fume, Variant::FullCrossModalAttn, Variant::SelfAttnOnly,
            Variant::Co2Only, Variant::Ch4Only, Variant::ClassificationOnly,
            Variant::SegmentationOnly};
}

// Dual-stream segmentation + classification network. The encoder is a single
// parameter set referenced by both gas streams; refinement is gamma-gated
// self-attention per stream; fusion gates the concatenated channels with a
// pooled bottleneck MLP before a separable 3x3 projection back to 128.
template <typename T>
class FumeNet {
public:
    static constexpr int kClasses = 3;
    static constexpr double kBnMomentum = 0.1;
    static constexpr double kBnEps = 1e-5;
    static constexpr double kDropoutKeep = 0.7;
    static constexpr int kAttnDim = 16;

    Variant variant;
    std::uint64_t seed;
    ParamStore<T> params;

    // Deletes the attention refinement from the forward graph. With the gamma
    // gates at their zero initialization the full graph must match this one
    // exactly.
    bool skip_attention = false;

    FumeNet(Variant v, std::uint64_t seed_) : variant(v), seed(seed_) { build(); }

    bool has_co2_stream() const { return variant != Variant::Ch4Only; }
    bool has_ch4_stream() const { return variant != Variant::Co2Only; }
    bool has_seg_heads() const { return variant != Variant::ClassificationOnly; }
    bool has_cls_head() const { return variant != Variant::SegmentationOnly; }
    bool has_fusion() const { return has_cls_head(); }
    bool has_channel_gates() const { return variant != Variant::SelfAttnOnly; }
    bool has_cross_attention() const { return variant == Variant::FullCrossModalAttn; }

    // One forward pass worth of tape state.
    struct Pass {
        Tape<T> tape;
        std::vector<int> param_nodes;  // aligned with ParamStore entries; -1 for buffers
        int seg_co2 = -1;   // N x 3 x H x W scores at input resolution
        int seg_ch4 = -1;
        int logits = -1;    // N x 3
        int enc_low_co2 = -1, enc_high_co2 = -1;
        int enc_low_ch4 = -1, enc_high_ch4 = -1;
        int fused = -1;
    };

    // co2/ch4: N x 1 x H x W (H, W multiples of 32). Streams the variant does
    // not consume may be empty tensors. co2_avail/ch4_avail reflect batch-level
    // modality presence: a stream with no present samples is skipped entirely,
    // which makes an all-absent-CH4 batch behave exactly like the co2-only
    // variant on the shared parameters.
    void run(Pass& f, const Tensor<T>& co2, const Tensor<T>& ch4, bool train,
             bool with_grad, Rng* dropout_rng = nullptr, bool co2_avail = true,
             bool ch4_avail = true) const {
        bool use_co2 = has_co2_stream() && co2_avail;
        bool use_ch4 = has_ch4_stream() && ch4_avail;
        if (!use_co2 && !use_ch4)
            throw DataError("both modalities absent: nothing to forward");
        const Tensor<T>& probe = use_co2 ? co2 : ch4;
        check_input(probe);
        f.tape.training = train;
        f.tape.rng = dropout_rng;
        f.param_nodes.assign(params.size(), -1);
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& e = params[static_cast<int>(i)];
            if (e.trainable)
                f.param_nodes[i] = f.tape.leaf(e.value, with_grad);
        }
        int H = probe.shape[2], W = probe.shape[3];

        int low_co2 = -1, high_co2 = -1, low_ch4 = -1, high_ch4 = -1;
        if (use_co2) {
            check_input(co2);
            int x = f.tape.leaf(co2, false);
            encode_on(f, x, low_co2, high_co2);
        }
        if (use_ch4) {
            check_input(ch4);
            int x = f.tape.leaf(ch4, false);
            encode_on(f, x, low_ch4, high_ch4);
        }
        f.enc_low_co2 = low_co2; f.enc_high_co2 = high_co2;
        f.enc_low_ch4 = low_ch4; f.enc_high_ch4 = high_ch4;

        int ref_co2 = high_co2;
        int ref_ch4 = high_ch4;
        if (!skip_attention) {
            ref_co2 = high_co2 >= 0 ? self_attend_on(f, high_co2, attn_co2_) : -1;
            ref_ch4 = high_ch4 >= 0 ? self_attend_on(f, high_ch4, attn_ch4_) : -1;
        }
        if (!skip_attention && has_cross_attention() && ref_co2 >= 0 && ref_ch4 >= 0) {
            int cc = cross_attend_on(f, ref_co2, ref_ch4, cross_co2_);
            int ch = cross_attend_on(f, ref_ch4, ref_co2, cross_ch4_);
            ref_co2 = cc;
            ref_ch4 = ch;
        }

        if (has_fusion()) {
            int a = ref_co2 >= 0 ? ref_co2 : ref_ch4;
            int b = ref_ch4 >= 0 ? ref_ch4 : ref_co2;  // single stream duplicated
            f.fused = fuse_on(f, a, b);
            f.logits = classify_on(f, f.fused);
        }
        if (has_seg_heads()) {
            if (ref_co2 >= 0) f.seg_co2 = decode_on(f, low_co2, ref_co2, dec_co2_, H, W);
            if (ref_ch4 >= 0) f.seg_ch4 = decode_on(f, low_ch4, ref_ch4, dec_ch4_, H, W);
        }
    }

    // Copies tape gradients for the trainable parameters into the store.
    void accumulate_grads(Pass& f) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            int node = f.param_nodes[i];
            if (node < 0 || !params[static_cast<int>(i)].trainable) continue;
            Tensor<T>& g = f.tape.grad(node);
            if (g.numel() == 0) continue;
            auto& acc = params[static_cast<int>(i)].grad;
            for (std::size_t j = 0; j < g.numel(); ++j) acc[j] += g[j];
        }
    }

    // ---- efficiency accounting ----

    std::size_t count_params() const { return params.count_trainable_scalars(); }

    struct Cost {
        std::uint64_t macs = 0;
        void conv(const KernelSpec& ks, const Shape& in) { macs += ks.macs(in); }
    };

    // Walks the same structure as run() on shapes only.
    std::uint64_t count_macs(int H, int W) const {
        if (H % 32 || W % 32)
            throw ShapeError("input extents must be multiples of 32, got " +
                             std::to_string(H) + "x" + std::to_string(W));
        Cost c;
        Shape low, high;
        int streams = (has_co2_stream() ? 1 : 0) + (has_ch4_stream() ? 1 : 0);
        for (int s = 0; s < streams; ++s) encode_cost(c, H, W, low, high);
        for (int s = 0; s < streams; ++s) attn_cost(c, high);
        if (has_cross_attention())
            for (int s = 0; s < 2; ++s) attn_cost(c, high);
        if (has_fusion()) {
            fuse_cost(c, high);
            c.conv(KernelSpec::linear(64), {1, 128});
            c.conv(KernelSpec::linear(kClasses), {1, 64});
        }
        if (has_seg_heads()) {
            if (has_co2_stream()) decode_cost(c, low, high);
            if (has_ch4_stream()) decode_cost(c, low, high);
        }
        return c.macs;
    }

    // ---- gradient checking ----

    struct GradCheckEntry {
        std::string name;
        double max_rel_err = 0.0;
        bool finite = true;
    };
    struct GradCheckReport {
        std::vector<GradCheckEntry> per_param;
        double max_rel_err = 0.0;
        bool pass = false;
        std::string worst_param;
    };

    // Central finite differences (step 1e-6) of a fixed quadratic probe loss
    // against the analytic backward pass. Checks up to samples_per_tensor
    // entries of every trainable tensor. Where the central difference straddles
    // a relu kink it measures no derivative at all; such samples pass if the
    // analytic value matches either one-sided slope instead.
    GradCheckReport grad_check(const Tensor<T>& co2, const Tensor<T>& ch4,
                               double tolerance, int samples_per_tensor = 6) {
        static_assert(sizeof(T) == 8 || sizeof(T) == 4,
                      "grad_check expects a floating scalar");
        const double h = 1e-6;
        Pass f;
        run(f, co2, ch4, /*train=*/false, /*with_grad=*/true);
        int loss = probe_loss_node(f);
        f.tape.backward(loss);
        const double l0 = probe_loss_value(co2, ch4);

        GradCheckReport rep;
        Rng pick(derive_seed(seed, 0x6a2d));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& e = params[static_cast<int>(i)];
            if (!e.trainable) continue;
            int node = f.param_nodes[i];
            const Tensor<T>& analytic = f.tape.grad(node);
            GradCheckEntry entry;
            entry.name = e.name;
            std::size_t n = e.value.numel();
            int samples = static_cast<int>(std::min<std::size_t>(samples_per_tensor, n));
            for (int s = 0; s < samples; ++s) {
                std::size_t idx = n <= static_cast<std::size_t>(samples_per_tensor)
                                      ? static_cast<std::size_t>(s)
                                      : pick.below(static_cast<std::uint32_t>(n));
                double a = static_cast<double>(analytic[idx]);
                if (!std::isfinite(a)) {
                    entry.finite = false;
                    entry.max_rel_err = 1e300;
                    break;
                }
                T saved = e.value[idx];
                e.value[idx] = static_cast<T>(saved + h);
                double lp = probe_loss_value(co2, ch4);
                e.value[idx] = static_cast<T>(saved - h);
                double lm = probe_loss_value(co2, ch4);
                e.value[idx] = saved;
                double numeric = (lp - lm) / (2.0 * h);
                // Rounding in lp - lm limits how small a gradient the central
                // difference can resolve; floor the denominator there so the
                // relative error stays meaningful for near-zero gradients.
                double fd_noise =
                    4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(l0)) /
                    (2.0 * h);
                auto rel = [&](double fd) {
                    double denom =
                        std::max({std::abs(a), std::abs(fd), fd_noise / tolerance, 1e-6});
                    return std::abs(a - fd) / denom;
                };
                double err = rel(numeric);
                if (err >= tolerance) {
                    // A relu kink inside the probed interval makes the central
                    // difference meaningless; with a single interior kink the
                    // derivative at the center equals one of the one-sided
                    // slopes.
                    double sp = (lp - l0) / h, sm = (l0 - lm) / h;
                    err = std::min(err, rel(sp));
                    err = std::min(err, rel(sm));
                    // Channel-wide parameters can sweep many relu units across
                    // their kinks at once, corrupting both one-sided slopes as
                    // well. Disagreement beyond tolerance scale certifies the
                    // contamination, so the sample carries no information; a
                    // wrong gradient on a smooth sample leaves the slopes in
                    // agreement and still fails.
                    double scale =
                        std::max({std::abs(sp), std::abs(sm), fd_noise / tolerance, 1e-6});
                    if (err >= tolerance && std::abs(sp - sm) > 0.5 * tolerance * scale)
                        continue;
                }
                entry.max_rel_err = std::max(entry.max_rel_err, err);
            }
            if (!entry.finite)
                throw NumericError("non-finite gradient for parameter " + entry.name);
            if (entry.max_rel_err > rep.max_rel_err) {
                rep.max_rel_err = entry.max_rel_err;
                rep.worst_param = entry.name;
            }
            rep.per_param.push_back(std::move(entry));
        }
        rep.pass = rep.max_rel_err < tolerance;
        return rep;
    }

    double probe_loss_value(const Tensor<T>& co2, const Tensor<T>& ch4) const {
        Pass f;
        run(f, co2, ch4, false, false);
        double acc = 0;
        auto add = [&](int id) {
            if (id < 0) return;
            const Tensor<T>& t = f.tape.val(id);
            for (const T& v : t.data) acc += 0.5 * static_cast<double>(v) * v;
        };
        add(f.seg_co2);
        add(f.seg_ch4);
        add(f.logits);
        return acc;
    }

    int probe_loss_node(Pass& f) const {
        int total = -1;
        auto add = [&](int id) {
            if (id < 0) return;
            int sq = f.tape.scale_const(f.tape.hadamard(id, id), 0.5);
            int s = f.tape.sum_all(sq);
            total = total < 0 ? s : f.tape.add(total, s);
        };
        add(f.seg_co2);
        add(f.seg_ch4);
        add(f.logits);
        return total;
    }

    // Index of the gamma gate parameter of each attention module (tests poke
    // these to exercise the gated paths).
    std::vector<int> gamma_param_indices() const {
        std::vector<int> out;
        auto push = [&](const AttnP& a) {
            if (a.gamma >= 0) out.push_back(a.gamma);
        };
        push(attn_co2_);
        push(attn_ch4_);
        push(cross_co2_);
        push(cross_ch4_);
        return out;
    }

private:
    struct ConvP {
        int w = -1, b = -1, bn_g = -1, bn_b = -1, bn_rm = -1, bn_rv = -1;
        int cin = 0, cout = 0, k = 1, s = 1, p = 0, groups = 1;
        bool bn = true, relu = false;
    };
    struct AttnP {
        int wq = -1, wk = -1, wv = -1, gamma = -1;
    };
    struct BottleneckP {
        ConvP expand, dw, project;
        bool skip = false;
    };
    struct DecoderP {
        ConvP ffm_dw, ffm_pw, low_proj, cls1_dw, cls1_pw, cls2_dw, cls2_pw, out;
    };

    // encoder
    ConvP lds_conv1_, lds1_dw_, lds1_pw_, lds2_dw_, lds2_pw_;
    std::vector<BottleneckP> bottlenecks_;
    ConvP ppm_branch_[4];
    ConvP ppm_fuse_;
    static constexpr int kPpmScales[4] = {1, 2, 3, 6};

    AttnP attn_co2_, attn_ch4_, cross_co2_, cross_ch4_;

    int fuse_w1_ = -1, fuse_b1_ = -1, fuse_w2_ = -1, fuse_b2_ = -1;
    ConvP fuse_dw_, fuse_pw_;
    DecoderP dec_co2_, dec_ch4_;
    int head_w1_ = -1, head_b1_ = -1, head_w2_ = -1, head_b2_ = -1;

    static void check_input(const Tensor<T>& x) {
        if (x.shape.size() != 4 || x.shape[1] != 1)
            throw ShapeError("expected N x 1 x H x W input, got " + shape_str(x.shape));
        if (x.shape[2] % 32 || x.shape[3] % 32)
            throw ShapeError("input extents must be multiples of 32, got " +
                             std::to_string(x.shape[2]) + "x" + std::to_string(x.shape[3]));
    }

    // Initialization is keyed on (seed, parameter name) so that components
    // shared between variants start from identical weights.
    Rng init_rng(const std::string& name) const {
        std::uint64_t h = 1469598103934665603ull;  // FNV-1a
        for (unsigned char ch : name) {
            h ^= ch;
            h *= 1099511628211ull;
        }
        return Rng(derive_seed(seed, h));
    }

    ConvP reg_conv(const std::string& name, int cin, int cout, int k, int s, int p,
                   int groups, bool bn, bool relu, bool bias) {
        ConvP c;
        c.cin = cin; c.cout = cout; c.k = k; c.s = s; c.p = p; c.groups = groups;
        c.bn = bn; c.relu = relu;
        std::size_t fan_in = static_cast<std::size_t>(cin / groups) * k * k;
        Rng r = init_rng(name + ".weight");
        c.w = params.add(name + ".weight",
                         kaiming_uniform<T>({cout, cin / groups, k, k}, fan_in, r));
        if (bias) c.b = params.add(name + ".bias", Tensor<T>::zeros({cout}));
        if (bn) {
            c.bn_g = params.add(name + ".bn.scale", Tensor<T>::full({cout}, T(1)));
            c.bn_b = params.add(name + ".bn.shift", Tensor<T>::zeros({cout}));
            c.bn_rm = params.add(name + ".bn.running_mean", Tensor<T>::zeros({cout}), false);
            c.bn_rv = params.add(name + ".bn.running_var", Tensor<T>::full({cout}, T(1)), false);
        }
        return c;
    }

    int reg_linear_w(const std::string& name, int in, int out) {
        Rng r = init_rng(name + ".weight");
        return params.add(name + ".weight", kaiming_uniform<T>({out, in}, in, r));
    }

    AttnP reg_attn(const std::string& name, int c, int dk) {
        AttnP a;
        Rng rq = init_rng(name + ".query"), rk = init_rng(name + ".key"),
            rv = init_rng(name + ".value");
        a.wq = params.add(name + ".query", kaiming_uniform<T>({dk, c, 1, 1}, c, rq));
        a.wk = params.add(name + ".key", kaiming_uniform<T>({dk, c, 1, 1}, c, rk));
        a.wv = params.add(name + ".value", kaiming_uniform<T>({c, c, 1, 1}, c, rv));
        a.gamma = params.add(name + ".gamma", Tensor<T>::zeros({1}));
        return a;
    }

    DecoderP reg_decoder(const std::string& name) {
        DecoderP d;
        d.ffm_dw = reg_conv(name + ".ffm.dw", 128, 128, 3, 1, 1, 128, true, true, false);
        d.ffm_pw = reg_conv(name + ".ffm.pw", 128, 128, 1, 1, 0, 1, true, false, false);
        d.low_proj = reg_conv(name + ".ffm.low", 64, 128, 1, 1, 0, 1, true, false, false);
        d.cls1_dw = reg_conv(name + ".cls1.dw", 128, 128, 3, 1, 1, 128, true, true, false);
        d.cls1_pw = reg_conv(name + ".cls1.pw", 128, 128, 1, 1, 0, 1, true, true, false);
        d.cls2_dw = reg_conv(name + ".cls2.dw", 128, 128, 3, 1, 1, 128, true, true, false);
        d.cls2_pw = reg_conv(name + ".cls2.pw", 128, 128, 1, 1, 0, 1, true, true, false);
        d.out = reg_conv(name + ".out", 128, kClasses, 1, 1, 0, 1, false, false, true);
        return d;
    }

    void build() {
        // shared encoder: learning-to-downsample
        lds_conv1_ = reg_conv("encoder.lds.conv1", 1, 32, 3, 2, 1, 1, true, true, false);
        lds1_dw_ = reg_conv("encoder.lds.ds1.dw", 32, 32, 3, 2, 1, 32, true, true, false);
        lds1_pw_ = reg_conv("encoder.lds.ds1.pw", 32, 48, 1, 1, 0, 1, true, true, false);
        lds2_dw_ = reg_conv("encoder.lds.ds2.dw", 48, 48, 3, 2, 1, 48, true, true, false);
        lds2_pw_ = reg_conv("encoder.lds.ds2.pw", 48, 64, 1, 1, 0, 1, true, true, false);
        // global feature extractor: 3 bottleneck stages, channels 64/96/128,
        // repeats 3/3/3, strides 2/2/1, expansion 6
        struct StageDef { int cout, stride, repeats; };
        const StageDef stages[3] = {{64, 2, 3}, {96, 2, 3}, {128, 1, 3}};
        int cin = 64;
        for (int si = 0; si < 3; ++si)
            for (int bi = 0; bi < stages[si].repeats; ++bi) {
                int s = bi == 0 ? stages[si].stride : 1;
                int cout = stages[si].cout;
                std::string name = "encoder.stage" + std::to_string(si + 1) + ".block" +
                                   std::to_string(bi + 1);
                BottleneckP b;
                int mid = cin * 6;
                b.expand = reg_conv(name + ".expand", cin, mid, 1, 1, 0, 1, true, true, false);
                b.dw = reg_conv(name + ".dw", mid, mid, 3, s, 1, mid, true, true, false);
                b.project = reg_conv(name + ".project", mid, cout, 1, 1, 0, 1, true, false, false);
                b.skip = (s == 1 && cin == cout);
                bottlenecks_.push_back(b);
                cin = cout;
            }
        for (int i = 0; i < 4; ++i)
            ppm_branch_[i] = reg_conv("encoder.ppm.branch" + std::to_string(kPpmScales[i]),
                                      128, 32, 1, 1, 0, 1, true, true, false);
        ppm_fuse_ = reg_conv("encoder.ppm.fuse", 256, 128, 1, 1, 0, 1, true, true, false);

        if (has_co2_stream()) attn_co2_ = reg_attn("attn.co2", 128, kAttnDim);
        if (has_ch4_stream()) attn_ch4_ = reg_attn("attn.ch4", 128, kAttnDim);
        if (has_cross_attention()) {
            cross_co2_ = reg_attn("cross.co2", 128, kAttnDim);
            cross_ch4_ = reg_attn("cross.ch4", 128, kAttnDim);
        }

        if (has_channel_gates()) {
            fuse_w1_ = reg_linear_w("fusion.mlp1", 256, 16);
            fuse_b1_ = params.add("fusion.mlp1.bias", Tensor<T>::zeros({16}));
            fuse_w2_ = reg_linear_w("fusion.mlp2", 16, 256);
            fuse_b2_ = params.add("fusion.mlp2.bias", Tensor<T>::zeros({256}));
        }
        fuse_dw_ = reg_conv("fusion.conv.dw", 256, 256, 3, 1, 1, 256, true, false, false);
        fuse_pw_ = reg_conv("fusion.conv.pw", 256, 128, 1, 1, 0, 1, true, true, false);

        if (has_seg_heads()) {
            if (has_co2_stream()) dec_co2_ = reg_decoder("decoder.co2");
            if (has_ch4_stream()) dec_ch4_ = reg_decoder("decoder.ch4");
        }
        if (has_cls_head()) {
            head_w1_ = reg_linear_w("head.fc1", 128, 64);
            head_b1_ = params.add("head.fc1.bias", Tensor<T>::zeros({64}));
            head_w2_ = reg_linear_w("head.fc2", 64, kClasses);
            head_b2_ = params.add("head.fc2.bias", Tensor<T>::zeros({kClasses}));
        }
    }

    int pnode(const Pass& f, int param_index) const {
        if (param_index < 0) throw ConfigError("parameter not present in this variant");
        return f.param_nodes[param_index];
    }

    int apply_conv(Pass& f, const ConvP& c, int x) const {
        int y = f.tape.conv2d(x, pnode(f, c.w), c.b >= 0 ? pnode(f, c.b) : -1, c.s, c.p,
                              c.groups);
        if (c.bn) {
            auto& rm = const_cast<ParamStore<T>&>(params)[c.bn_rm].value;
            auto& rv = const_cast<ParamStore<T>&>(params)[c.bn_rv].value;
            y = f.tape.batch_norm(y, pnode(f, c.bn_g), pnode(f, c.bn_b), &rm, &rv,
                                  kBnMomentum, kBnEps);
        }
        if (c.relu) y = f.tape.relu(y);
        return y;
    }

    void encode_on(Pass& f, int x, int& low, int& high) const {
        int y = apply_conv(f, lds_conv1_, x);
        y = apply_conv(f, lds1_dw_, y);
        y = apply_conv(f, lds1_pw_, y);
        y = apply_conv(f, lds2_dw_, y);
        y = apply_conv(f, lds2_pw_, y);
        low = y;  // 64 x H/8 x W/8
        for (const auto& b : bottlenecks_) {
            int z = apply_conv(f, b.expand, y);
            z = apply_conv(f, b.dw, z);
            z = apply_conv(f, b.project, z);
            y = b.skip ? f.tape.add(y, z) : z;
        }
        // pyramid pooling
        const Shape& s = f.tape.val(y).shape;
        int h = s[2], w = s[3];
        int cat = y;
        for (int i = 0; i < 4; ++i) {
            int p = f.tape.adaptive_avg_pool(y, kPpmScales[i], kPpmScales[i]);
            p = apply_conv(f, ppm_branch_[i], p);
            p = f.tape.bilinear_resize(p, h, w);
            cat = f.tape.concat_channel(cat, p);
        }
        high = apply_conv(f, ppm_fuse_, cat);  // 128 x H/32 x W/32
    }

    int self_attend_on(Pass& f, int x, const AttnP& a) const {
        int q = f.tape.conv2d(x, pnode(f, a.wq), -1, 1, 0, 1);
        int k = f.tape.conv2d(x, pnode(f, a.wk), -1, 1, 0, 1);
        int v = f.tape.conv2d(x, pnode(f, a.wv), -1, 1, 0, 1);
        int o = f.tape.attention(q, k, v);
        return f.tape.add_scaled(x, o, pnode(f, a.gamma));
    }

    // Queries from `x`, keys/values from `other`; residual onto `x`.
    int cross_attend_on(Pass& f, int x, int other, const AttnP& a) const {
        int q = f.tape.conv2d(x, pnode(f, a.wq), -1, 1, 0, 1);
        int k = f.tape.conv2d(other, pnode(f, a.wk), -1, 1, 0, 1);
        int v = f.tape.conv2d(other, pnode(f, a.wv), -1, 1, 0, 1);
        int o = f.tape.attention(q, k, v);
        return f.tape.add_scaled(x, o, pnode(f, a.gamma));
    }

    int fuse_on(Pass& f, int a, int b) const {
        int cat = f.tape.concat_channel(a, b);  // N x 256 x h x w
        int y = cat;
        if (has_channel_gates()) {
            int z = f.tape.global_avg_pool(cat);  // N x 256
            int hmid = f.tape.relu(f.tape.linear(z, pnode(f, fuse_w1_), pnode(f, fuse_b1_)));
            int gates = f.tape.sigmoid(f.tape.linear(hmid, pnode(f, fuse_w2_), pnode(f, fuse_b2_)));
            y = f.tape.channel_scale(cat, gates);
        }
        y = apply_conv(f, fuse_dw_, y);
        return apply_conv(f, fuse_pw_, y);  // N x 128 x h x w
    }

    int classify_on(Pass& f, int fused) const {
        int z = f.tape.global_avg_pool(fused);
        z = f.tape.relu(f.tape.linear(z, pnode(f, head_w1_), pnode(f, head_b1_)));
        z = f.tape.dropout(z, kDropoutKeep);
        return f.tape.linear(z, pnode(f, head_w2_), pnode(f, head_b2_));
    }

    int decode_on(Pass& f, int low, int high, const DecoderP& d, int H, int W) const {
        const Shape& ls = f.tape.val(low).shape;
        int hi = f.tape.bilinear_resize(high, ls[2], ls[3]);  // x4
        hi = apply_conv(f, d.ffm_dw, hi);
        hi = apply_conv(f, d.ffm_pw, hi);
        int lo = apply_conv(f, d.low_proj, low);
        int y = f.tape.relu(f.tape.add(hi, lo));
        y = apply_conv(f, d.cls1_dw, y);
        y = apply_conv(f, d.cls1_pw, y);
        y = apply_conv(f, d.cls2_dw, y);
        y = apply_conv(f, d.cls2_pw, y);
        y = apply_conv(f, d.out, y);
        return f.tape.bilinear_resize(y, H, W);
    }

    // ---- shape-only cost mirror of the forward pass ----

    static Shape conv_cost(Cost& c, const Shape& in, int cout, int k, int s, int p,
                           int groups, bool bn) {
        KernelSpec ks = KernelSpec::conv(cout, k, s, p, groups);
        Shape out = ks.infer(in);
        c.conv(ks, in);
        if (bn) c.conv(KernelSpec::simple(KernelKind::BatchNorm), out);
        return out;
    }

    void encode_cost(Cost& c, int H, int W, Shape& low, Shape& high) const {
        Shape s = {1, 1, H, W};
        s = conv_cost(c, s, 32, 3, 2, 1, 1, true);
        s = conv_cost(c, s, 32, 3, 2, 1, 32, true);
        s = conv_cost(c, s, 48, 1, 1, 0, 1, true);
        s = conv_cost(c, s, 48, 3, 2, 1, 48, true);
        s = conv_cost(c, s, 64, 1, 1, 0, 1, true);
        low = s;
        for (const auto& b : bottlenecks_) {
            Shape z = conv_cost(c, s, b.expand.cout, 1, 1, 0, 1, true);
            z = conv_cost(c, z, b.dw.cout, 3, b.dw.s, 1, b.dw.groups, true);
            s = conv_cost(c, z, b.project.cout, 1, 1, 0, 1, true);
        }
        for (int i = 0; i < 4; ++i) {
            Shape p = {s[0], s[1], kPpmScales[i], kPpmScales[i]};
            conv_cost(c, p, 32, 1, 1, 0, 1, true);
        }
        Shape cat = {s[0], 256, s[2], s[3]};
        high = conv_cost(c, cat, 128, 1, 1, 0, 1, true);
    }

    void attn_cost(Cost& c, const Shape& high) const {
        conv_cost(c, high, kAttnDim, 1, 1, 0, 1, false);  // Q
        conv_cost(c, high, kAttnDim, 1, 1, 0, 1, false);  // K
        conv_cost(c, high, 128, 1, 1, 0, 1, false);       // V
        KernelSpec at = KernelSpec::simple(KernelKind::Attention);
        at.attn_dim = 128;
        c.conv(at, high);
    }

    void fuse_cost(Cost& c, const Shape& high) const {
        Shape cat = {high[0], 256, high[2], high[3]};
        if (has_channel_gates()) {
            c.conv(KernelSpec::linear(16), {cat[0], 256});
            c.conv(KernelSpec::linear(256), {cat[0], 16});
        }
        Shape y = conv_cost(c, cat, 256, 3, 1, 1, 256, true);
        conv_cost(c, y, 128, 1, 1, 0, 1, true);
    }

    void decode_cost(Cost& c, const Shape& low, const Shape& high) const {
        Shape hi = {high[0], high[1], low[2], low[3]};
        hi = conv_cost(c, hi, 128, 3, 1, 1, 128, true);
        hi = conv_cost(c, hi, 128, 1, 1, 0, 1, true);
        conv_cost(c, low, 128, 1, 1, 0, 1, true);
        Shape y = hi;
        y = conv_cost(c, y, 128, 3, 1, 1, 128, true);
        y = conv_cost(c, y, 128, 1, 1, 0, 1, true);
        y = conv_cost(c, y, 128, 3, 1, 1, 128, true);
        y = conv_cost(c, y, 128, 1, 1, 0, 1, true);
        conv_cost(c, y, kClasses, 1, 1, 0, 1, false);
    }
};

template <typename T>
constexpr int FumeNet<T>::kPpmScales[4];

}  // namespace fume
