#pragma once

#include <cstdint>
#include <string>

#include "fume/tensor.hpp"

namespace fume {

enum class KernelKind {
    Conv,
    DepthwiseSeparableConv,
    InvertedResidual,
    BatchNorm,
    Relu,
    Sigmoid,
    Softmax,
    BilinearResize,
    AdaptiveAvgPool,
    GlobalAvgPool,
    Linear,
    Dropout,
    Add,
    Concat,
    Hadamard,
    Attention,  // composite used by the fusion/refinement modules
};

// Static description of one kernel: enough to infer the output shape and the
// MAC cost without touching data. Shapes are CHW / NCHW; shape inference here
// works on the trailing CHW dims so a leading batch dim passes through.
struct KernelSpec {
    KernelKind kind = KernelKind::Conv;
    int kernel = 1;
    int stride = 1;
    int pad = 0;
    int groups = 1;
    int out_channels = 0;
    int expansion = 6;       // inverted residual
    int target_h = 0, target_w = 0;  // resize / adaptive pool
    int out_features = 0;    // linear
    double keep_prob = 1.0;  // dropout
    int concat_channels = 0; // channels contributed by the second concat input
    int attn_dim = 0;        // attention: feature width used by the MAC rule

    static KernelSpec conv(int cout, int k, int s, int p, int g = 1) {
        KernelSpec ks;
        ks.kind = KernelKind::Conv;
        ks.out_channels = cout; ks.kernel = k; ks.stride = s; ks.pad = p; ks.groups = g;
        return ks;
    }
    static KernelSpec dsconv(int cout, int k, int s, int p) {
        KernelSpec ks;
        ks.kind = KernelKind::DepthwiseSeparableConv;
        ks.out_channels = cout; ks.kernel = k; ks.stride = s; ks.pad = p;
        return ks;
    }
    static KernelSpec inverted_residual(int cout, int s, int t = 6) {
        KernelSpec ks;
        ks.kind = KernelKind::InvertedResidual;
        ks.out_channels = cout; ks.stride = s; ks.expansion = t;
        return ks;
    }
    static KernelSpec resize(int h, int w) {
        KernelSpec ks;
        ks.kind = KernelKind::BilinearResize;
        ks.target_h = h; ks.target_w = w;
        return ks;
    }
    static KernelSpec adaptive_pool(int h, int w) {
        KernelSpec ks;
        ks.kind = KernelKind::AdaptiveAvgPool;
        ks.target_h = h; ks.target_w = w;
        return ks;
    }
    static KernelSpec linear(int out) {
        KernelSpec ks;
        ks.kind = KernelKind::Linear;
        ks.out_features = out;
        return ks;
    }
    static KernelSpec simple(KernelKind k) {
        KernelSpec ks;
        ks.kind = k;
        return ks;
    }

    static int conv_extent(int in, int k, int s, int p) {
        int out = (in + 2 * p - k) / s + 1;
        if (out <= 0)
            throw ShapeError("conv output extent non-positive: in=" + std::to_string(in) +
                             " k=" + std::to_string(k) + " s=" + std::to_string(s) +
                             " p=" + std::to_string(p));
        return out;
    }

    // Maps an input shape to the unique output shape.
    Shape infer(const Shape& in) const {
        auto chw = [&](int& c, int& h, int& w) {
            if (in.size() < 3) throw ShapeError("expected CHW-like shape, got " + shape_str(in));
            c = in[in.size() - 3]; h = in[in.size() - 2]; w = in[in.size() - 1];
        };
        auto rebuild = [&](int c, int h, int w) {
            Shape out = in;
            out[out.size() - 3] = c; out[out.size() - 2] = h; out[out.size() - 1] = w;
            return out;
        };
        int c = 0, h = 0, w = 0;
        switch (kind) {
            case KernelKind::Conv: {
                chw(c, h, w);
                if (c % groups != 0 || out_channels % groups != 0)
                    throw ShapeError("groups=" + std::to_string(groups) +
                                     " does not divide channels " + std::to_string(c) +
                                     "->" + std::to_string(out_channels));
                return rebuild(out_channels, conv_extent(h, kernel, stride, pad),
                               conv_extent(w, kernel, stride, pad));
            }
            case KernelKind::DepthwiseSeparableConv: {
                chw(c, h, w);
                return rebuild(out_channels, conv_extent(h, kernel, stride, pad),
                               conv_extent(w, kernel, stride, pad));
            }
            case KernelKind::InvertedResidual: {
                chw(c, h, w);
                if (stride != 1 && stride != 2)
                    throw ShapeError("inverted residual stride must be 1 or 2, got " +
                                     std::to_string(stride));
                return rebuild(out_channels, conv_extent(h, 3, stride, 1),
                               conv_extent(w, 3, stride, 1));
            }
            case KernelKind::BilinearResize: {
                chw(c, h, w);
                if (target_h <= 0 || target_w <= 0)
                    throw ShapeError("resize target must be positive, got " +
                                     std::to_string(target_h) + "x" + std::to_string(target_w));
                return rebuild(c, target_h, target_w);
            }
            case KernelKind::AdaptiveAvgPool: {
                chw(c, h, w);
                if (target_h <= 0 || target_w <= 0)
                    throw ShapeError("adaptive pool target must be positive");
                return rebuild(c, target_h, target_w);
            }
            case KernelKind::GlobalAvgPool: {
                chw(c, h, w);
                Shape out(in.begin(), in.end() - 2);
                return out;  // (N,)C
            }
            case KernelKind::Linear: {
                Shape out = in;
                out.back() = out_features;
                return out;
            }
            case KernelKind::Concat: {
                chw(c, h, w);
                return rebuild(c + concat_channels, h, w);
            }
            case KernelKind::Attention:
            case KernelKind::BatchNorm:
            case KernelKind::Relu:
            case KernelKind::Sigmoid:
            case KernelKind::Softmax:
            case KernelKind::Dropout:
            case KernelKind::Add:
            case KernelKind::Hadamard:
                return in;
        }
        throw ShapeError("unknown kernel kind");
    }

    // MAC accounting. Conv: (K^2 * C_in / groups) * C_out * H' * W'.
    // Linear: in * out. Attention: 2*N^2*d for the score step plus 2*N^2*d for
    // the apply step, d = feature width. BatchNorm: one multiply-add per
    // element (its inference form is exactly y = a*x + b). Pooling, resize and
    // pure elementwise nonlinearities count as zero.
    std::uint64_t macs(const Shape& in) const {
        auto chw = [&](int& c, int& h, int& w) {
            c = in[in.size() - 3]; h = in[in.size() - 2]; w = in[in.size() - 1];
        };
        int c = 0, h = 0, w = 0;
        switch (kind) {
            case KernelKind::Conv: {
                chw(c, h, w);
                Shape o = infer(in);
                std::uint64_t hw = static_cast<std::uint64_t>(o[o.size() - 2]) * o[o.size() - 1];
                return static_cast<std::uint64_t>(kernel) * kernel * (c / groups) *
                       out_channels * hw;
            }
            case KernelKind::DepthwiseSeparableConv: {
                chw(c, h, w);
                Shape o = infer(in);
                std::uint64_t hw = static_cast<std::uint64_t>(o[o.size() - 2]) * o[o.size() - 1];
                return static_cast<std::uint64_t>(kernel) * kernel * c * hw +
                       static_cast<std::uint64_t>(c) * out_channels * hw;
            }
            case KernelKind::Linear:
                return static_cast<std::uint64_t>(in.back()) * out_features;
            case KernelKind::BatchNorm: {
                std::uint64_t n = 1;
                for (int d : in) n *= static_cast<std::uint64_t>(d);
                return n;
            }
            case KernelKind::Attention: {
                chw(c, h, w);
                std::uint64_t n = static_cast<std::uint64_t>(h) * w;
                std::uint64_t d = attn_dim > 0 ? attn_dim : c;
                return 2 * n * n * d + 2 * n * n * d;
            }
            default:
                return 0;
        }
    }
};

}  // namespace fume
