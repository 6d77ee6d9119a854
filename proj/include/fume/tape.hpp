#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "fume/common.hpp"
#include "fume/tensor.hpp"

namespace fume {

// Reverse-mode tape restricted to the kernel set the network needs. Nodes are
// created in topological order, so backward is a single reverse sweep.
// Kernels are pure functions of (inputs, parameters); the only stateful pieces
// are BN running statistics (updated in train mode by the caller-owned
// buffers) and the dropout RNG.
template <typename T>
class Tape {
public:
    struct Node {
        Tensor<T> val;
        Tensor<T> grad;
        bool needs_grad = false;
        std::function<void(Tape&)> back;
    };

    bool training = false;
    Rng* rng = nullptr;  // required for dropout in train mode

    int leaf(Tensor<T> v, bool needs_grad) {
        nodes_.push_back(Node{std::move(v), {}, needs_grad, nullptr});
        return static_cast<int>(nodes_.size()) - 1;
    }

    const Tensor<T>& val(int id) const { return nodes_[id].val; }
    Tensor<T>& val(int id) { return nodes_[id].val; }
    Tensor<T>& grad(int id) { return nodes_[id].grad; }
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    void backward(int loss_id) {
        if (nodes_[loss_id].val.numel() != 1)
            throw ShapeError("backward expects a scalar loss, got " +
                             shape_str(nodes_[loss_id].val.shape));
        for (auto& n : nodes_)
            if (n.needs_grad) n.grad = Tensor<T>::zeros(n.val.shape);
        nodes_[loss_id].grad.data[0] = T(1);
        for (int i = loss_id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.needs_grad && n.back) n.back(*this);
        }
    }

    // ---- elementwise ----

    int relu(int x) {
        const Tensor<T>& xv = val(x);
        Tensor<T> out(xv.shape);
        for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
        return unary(x, std::move(out), [x](Tape& t, int self) {
            const Tensor<T>& xv = t.val(x);
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& gx = t.grad(x);
            for (std::size_t i = 0; i < xv.numel(); ++i)
                if (xv[i] > T(0)) gx[i] += g[i];
        });
    }

    int sigmoid(int x) {
        const Tensor<T>& xv = val(x);
        Tensor<T> out(xv.shape);
        for (std::size_t i = 0; i < xv.numel(); ++i)
            out[i] = T(1) / (T(1) + std::exp(-xv[i]));
        return unary(x, std::move(out), [x](Tape& t, int self) {
            const Tensor<T>& y = t.val(self);
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& gx = t.grad(x);
            for (std::size_t i = 0; i < y.numel(); ++i)
                gx[i] += g[i] * y[i] * (T(1) - y[i]);
        });
    }

    int add(int a, int b) {
        check_same_shape(val(a), val(b), "add");
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        Tensor<T> out(av.shape);
        for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
        return binary(a, b, std::move(out), [a, b](Tape& t, int self) {
            const Tensor<T>& g = t.grad(self);
            if (t.needs_grad(a)) {
                Tensor<T>& ga = t.grad(a);
                for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
            }
            if (t.needs_grad(b)) {
                Tensor<T>& gb = t.grad(b);
                for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
            }
        });
    }

    // out = x + s * y with s a one-element node (the attention gamma gate).
    // At s == 0 this adds an exact floating-point zero, so out == x bitwise.
    int add_scaled(int x, int y, int s) {
        check_same_shape(val(x), val(y), "add_scaled");
        if (val(s).numel() != 1) throw ShapeError("add_scaled: gate must be scalar");
        const Tensor<T>& xv = val(x);
        const Tensor<T>& yv = val(y);
        T sv = val(s)[0];
        Tensor<T> out(xv.shape);
        for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] + sv * yv[i];
        int id = leaf(std::move(out), needs_grad(x) || needs_grad(y) || needs_grad(s));
        if (nodes_[id].needs_grad) {
            nodes_[id].back = [x, y, s, id](Tape& t) {
                const Tensor<T>& g = t.grad(id);
                const Tensor<T>& yv = t.val(y);
                T sv = t.val(s)[0];
                if (t.needs_grad(x)) {
                    Tensor<T>& gx = t.grad(x);
                    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
                }
                if (t.needs_grad(y)) {
                    Tensor<T>& gy = t.grad(y);
                    for (std::size_t i = 0; i < g.numel(); ++i) gy[i] += sv * g[i];
                }
                if (t.needs_grad(s)) {
                    T acc = 0;
                    for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * yv[i];
                    t.grad(s)[0] += acc;
                }
            };
        }
        return id;
    }

    int hadamard(int a, int b) {
        check_same_shape(val(a), val(b), "hadamard");
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        Tensor<T> out(av.shape);
        for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
        return binary(a, b, std::move(out), [a, b](Tape& t, int self) {
            const Tensor<T>& g = t.grad(self);
            const Tensor<T>& av = t.val(a);
            const Tensor<T>& bv = t.val(b);
            if (t.needs_grad(a)) {
                Tensor<T>& ga = t.grad(a);
                for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
            }
            if (t.needs_grad(b)) {
                Tensor<T>& gb = t.grad(b);
                for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
            }
        });
    }

    // x: N x C x H x W scaled per (n, c) by gates: N x C.
    int channel_scale(int x, int gates) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& gv = val(gates);
        if (xv.shape.size() != 4 || gv.shape.size() != 2 ||
            xv.shape[0] != gv.shape[0] || xv.shape[1] != gv.shape[1])
            throw ShapeError("channel_scale: " + shape_str(xv.shape) + " vs gates " +
                             shape_str(gv.shape));
        int N = xv.shape[0], C = xv.shape[1];
        std::size_t hw = static_cast<std::size_t>(xv.shape[2]) * xv.shape[3];
        Tensor<T> out(xv.shape);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                T s = gv[n * C + c];
                const T* xp = xv.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
                T* op = out.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) op[i] = s * xp[i];
            }
        return binary(x, gates, std::move(out), [x, gates, N, C, hw](Tape& t, int self) {
            const Tensor<T>& g = t.grad(self);
            const Tensor<T>& xv = t.val(x);
            const Tensor<T>& gv = t.val(gates);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
                    if (t.needs_grad(x)) {
                        T s = gv[n * C + c];
                        Tensor<T>& gx = t.grad(x);
                        for (std::size_t i = 0; i < hw; ++i) gx[base + i] += s * g[base + i];
                    }
                    if (t.needs_grad(gates)) {
                        T acc = 0;
                        for (std::size_t i = 0; i < hw; ++i) acc += g[base + i] * xv[base + i];
                        t.grad(gates)[n * C + c] += acc;
                    }
                }
        });
    }

    int concat_channel(int a, int b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        if (av.shape.size() != 4 || bv.shape.size() != 4 || av.shape[0] != bv.shape[0] ||
            av.shape[2] != bv.shape[2] || av.shape[3] != bv.shape[3])
            throw ShapeError("concat: incompatible " + shape_str(av.shape) + " vs " +
                             shape_str(bv.shape));
        int N = av.shape[0], Ca = av.shape[1], Cb = bv.shape[1];
        std::size_t hw = static_cast<std::size_t>(av.shape[2]) * av.shape[3];
        Tensor<T> out({N, Ca + Cb, av.shape[2], av.shape[3]});
        for (int n = 0; n < N; ++n) {
            std::copy(av.ptr() + n * Ca * hw, av.ptr() + (n + 1) * Ca * hw,
                      out.ptr() + static_cast<std::size_t>(n) * (Ca + Cb) * hw);
            std::copy(bv.ptr() + n * Cb * hw, bv.ptr() + (n + 1) * Cb * hw,
                      out.ptr() + static_cast<std::size_t>(n) * (Ca + Cb) * hw + Ca * hw);
        }
        return binary(a, b, std::move(out), [a, b, N, Ca, Cb, hw](Tape& t, int self) {
            const Tensor<T>& g = t.grad(self);
            for (int n = 0; n < N; ++n) {
                std::size_t base = static_cast<std::size_t>(n) * (Ca + Cb) * hw;
                if (t.needs_grad(a)) {
                    Tensor<T>& ga = t.grad(a);
                    for (std::size_t i = 0; i < static_cast<std::size_t>(Ca) * hw; ++i)
                        ga[n * Ca * hw + i] += g[base + i];
                }
                if (t.needs_grad(b)) {
                    Tensor<T>& gb = t.grad(b);
                    for (std::size_t i = 0; i < static_cast<std::size_t>(Cb) * hw; ++i)
                        gb[n * Cb * hw + i] += g[base + Ca * hw + i];
                }
            }
        });
    }

    int reshape(int x, Shape s) {
        const Tensor<T>& xv = val(x);
        if (shape_numel(s) != xv.numel())
            throw ShapeError("reshape: " + shape_str(xv.shape) + " -> " + shape_str(s));
        Tensor<T> out(std::move(s), xv.data);
        return unary(x, std::move(out), [x](Tape& t, int self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& gx = t.grad(x);
            for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        });
    }

    // ---- convolution ----

    // x: N x Cin x H x W, w: Cout x Cin/groups x K x K, bias: Cout (optional, -1).
    int conv2d(int x, int w, int bias, int stride, int pad, int groups) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& wv = val(w);
        if (xv.shape.size() != 4 || wv.shape.size() != 4)
            throw ShapeError("conv2d: need 4D input/weight, got " + shape_str(xv.shape) +
                             " and " + shape_str(wv.shape));
        int N = xv.shape[0], Cin = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
        int Cout = wv.shape[0], Cpg = wv.shape[1], K = wv.shape[2];
        if (wv.shape[3] != K) throw ShapeError("conv2d: non-square kernel");
        if (groups <= 0 || Cin % groups != 0 || Cout % groups != 0)
            throw ShapeError("conv2d: groups=" + std::to_string(groups) +
                             " must divide Cin=" + std::to_string(Cin) +
                             " and Cout=" + std::to_string(Cout));
        if (Cpg != Cin / groups)
            throw ShapeError("conv2d: weight expects Cin/groups=" + std::to_string(Cpg) +
                             " but input has Cin=" + std::to_string(Cin) +
                             " with groups=" + std::to_string(groups));
        int Ho = KernelSpecExtent(H, K, stride, pad);
        int Wo = KernelSpecExtent(W, K, stride, pad);
        int Copg = Cout / groups;
        Tensor<T> out({N, Cout, Ho, Wo});
        const T* bp = bias >= 0 ? val(bias).ptr() : nullptr;
        conv_fwd(xv.ptr(), wv.ptr(), bp, out.ptr(), N, Cin, H, W, Cout, K, stride, pad,
                 groups, Ho, Wo);
        bool ng = needs_grad(x) || needs_grad(w) || (bias >= 0 && needs_grad(bias));
        int id = leaf(std::move(out), ng);
        if (ng) {
            nodes_[id].back = [=](Tape& t) {
                const Tensor<T>& g = t.grad(id);
                const Tensor<T>& xv2 = t.val(x);
                const Tensor<T>& wv2 = t.val(w);
                T* gx = t.needs_grad(x) ? t.grad(x).ptr() : nullptr;
                T* gw = t.needs_grad(w) ? t.grad(w).ptr() : nullptr;
                conv_bwd(xv2.ptr(), wv2.ptr(), g.ptr(), gx, gw, N, Cin, H, W, Cout, K,
                         stride, pad, groups, Ho, Wo);
                if (bias >= 0 && t.needs_grad(bias)) {
                    Tensor<T>& gb = t.grad(bias);
                    std::size_t hw = static_cast<std::size_t>(Ho) * Wo;
                    for (int n = 0; n < N; ++n)
                        for (int oc = 0; oc < Cout; ++oc) {
                            const T* gp = g.ptr() + (static_cast<std::size_t>(n) * Cout + oc) * hw;
                            T acc = 0;
                            for (std::size_t i = 0; i < hw; ++i) acc += gp[i];
                            gb[oc] += acc;
                        }
                }
                (void)Copg;
            };
        }
        return id;
    }

    // ---- batch norm ----

    // gamma/beta are tape nodes; running stats are caller-owned buffers.
    int batch_norm(int x, int gamma, int beta, Tensor<T>* running_mean,
                   Tensor<T>* running_var, double momentum, double eps) {
        const Tensor<T>& xv = val(x);
        if (xv.shape.size() != 4) throw ShapeError("batch_norm: need NCHW");
        int N = xv.shape[0], C = xv.shape[1];
        std::size_t hw = static_cast<std::size_t>(xv.shape[2]) * xv.shape[3];
        std::size_t cnt = static_cast<std::size_t>(N) * hw;
        Tensor<T> out(xv.shape);
        Tensor<T> mean({C}), invstd({C});
        const Tensor<T>& gv = val(gamma);
        const Tensor<T>& bv = val(beta);
        if (training) {
            for (int c = 0; c < C; ++c) {
                double m = 0;
                for (int n = 0; n < N; ++n) {
                    const T* xp = xv.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) m += xp[i];
                }
                m /= static_cast<double>(cnt);
                double v = 0;
                for (int n = 0; n < N; ++n) {
                    const T* xp = xv.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        double d = xp[i] - m;
                        v += d * d;
                    }
                }
                v /= static_cast<double>(cnt);
                mean[c] = static_cast<T>(m);
                invstd[c] = static_cast<T>(1.0 / std::sqrt(v + eps));
                double unbiased = cnt > 1 ? v * static_cast<double>(cnt) / (cnt - 1) : v;
                (*running_mean)[c] =
                    static_cast<T>((1.0 - momentum) * (*running_mean)[c] + momentum * m);
                (*running_var)[c] =
                    static_cast<T>((1.0 - momentum) * (*running_var)[c] + momentum * unbiased);
            }
        } else {
            for (int c = 0; c < C; ++c) {
                mean[c] = (*running_mean)[c];
                invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>((*running_var)[c]) + eps));
            }
        }
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T* xp = xv.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
                T* op = out.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
                T m = mean[c], is = invstd[c], ga = gv[c], be = bv[c];
                for (std::size_t i = 0; i < hw; ++i) op[i] = (xp[i] - m) * is * ga + be;
            }
        bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
        int id = leaf(std::move(out), ng);
        if (ng) {
            bool train_mode = training;
            nodes_[id].back = [=](Tape& t) {
                const Tensor<T>& g = t.grad(id);
                const Tensor<T>& xv2 = t.val(x);
                const Tensor<T>& gv2 = t.val(gamma);
                for (int c = 0; c < C; ++c) {
                    T m = mean[c], is = invstd[c];
                    double sum_g = 0, sum_gx = 0;
                    for (int n = 0; n < N; ++n) {
                        std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                            T xh = (xv2[base + i] - m) * is;
                            sum_g += g[base + i];
                            sum_gx += g[base + i] * xh;
                        }
                    }
                    if (t.needs_grad(gamma)) t.grad(gamma)[c] += static_cast<T>(sum_gx);
                    if (t.needs_grad(beta)) t.grad(beta)[c] += static_cast<T>(sum_g);
                    if (t.needs_grad(x)) {
                        Tensor<T>& gx = t.grad(x);
                        T ga = gv2[c];
                        if (train_mode) {
                            double mg = sum_g / static_cast<double>(cnt);
                            double mgx = sum_gx / static_cast<double>(cnt);
                            for (int n = 0; n < N; ++n) {
                                std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
                                for (std::size_t i = 0; i < hw; ++i) {
                                    T xh = (xv2[base + i] - m) * is;
                                    gx[base + i] += static_cast<T>(
                                        ga * is * (g[base + i] - mg - xh * mgx));
                                }
                            }
                        } else {
                            for (int n = 0; n < N; ++n) {
                                std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
                                for (std::size_t i = 0; i < hw; ++i)
                                    gx[base + i] += ga * is * g[base + i];
                            }
                        }
                    }
                }
            };
        }
        return id;
    }

    // ---- softmax ----

    // Softmax over the channel dim of NCHW (per-pixel class distribution).
    int softmax_channel(int x) {
        const Tensor<T>& xv = val(x);
        if (xv.shape.size() != 4) throw ShapeError("softmax_channel: need NCHW");
        int N = xv.shape[0], C = xv.shape[1];
        std::size_t hw = static_cast<std::size_t>(xv.shape[2]) * xv.shape[3];
        Tensor<T> out(xv.shape);
        for (int n = 0; n < N; ++n)
            for (std::size_t i = 0; i < hw; ++i) {
                T mx = xv[(static_cast<std::size_t>(n) * C) * hw + i];
                for (int c = 1; c < C; ++c)
                    mx = std::max(mx, xv[(static_cast<std::size_t>(n) * C + c) * hw + i]);
                T sum = 0;
                for (int c = 0; c < C; ++c) {
                    T e = std::exp(xv[(static_cast<std::size_t>(n) * C + c) * hw + i] - mx);
                    out[(static_cast<std::size_t>(n) * C + c) * hw + i] = e;
                    sum += e;
                }
                for (int c = 0; c < C; ++c)
                    out[(static_cast<std::size_t>(n) * C + c) * hw + i] /= sum;
            }
        return unary(x, std::move(out), [x, N, C, hw](Tape& t, int self) {
            const Tensor<T>& p = t.val(self);
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& gx = t.grad(x);
            for (int n = 0; n < N; ++n)
                for (std::size_t i = 0; i < hw; ++i) {
                    T dot = 0;
                    for (int c = 0; c < C; ++c) {
                        std::size_t k = (static_cast<std::size_t>(n) * C + c) * hw + i;
                        dot += g[k] * p[k];
                    }
                    for (int c = 0; c < C; ++c) {
                        std::size_t k = (static_cast<std::size_t>(n) * C + c) * hw + i;
                        gx[k] += p[k] * (g[k] - dot);
                    }
                }
        });
    }

    // Softmax over the last dim of a rank-2 tensor (rows).
    int softmax_rows(int x) {
        const Tensor<T>& xv = val(x);
        if (xv.shape.size() != 2) throw ShapeError("softmax_rows: need rank-2");
        int R = xv.shape[0], C = xv.shape[1];
        Tensor<T> out(xv.shape);
        for (int r = 0; r < R; ++r) {
            const T* xp = xv.ptr() + static_cast<std::size_t>(r) * C;
            T* op = out.ptr() + static_cast<std::size_t>(r) * C;
            T mx = xp[0];
            for (int c = 1; c < C; ++c) mx = std::max(mx, xp[c]);
            T sum = 0;
            for (int c = 0; c < C; ++c) {
                op[c] = std::exp(xp[c] - mx);
                sum += op[c];
            }
            for (int c = 0; c < C; ++c) op[c] /= sum;
        }
        return unary(x, std::move(out), [x, R, C](Tape& t, int self) {
            const Tensor<T>& p = t.val(self);
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& gx = t.grad(x);
            for (int r = 0; r < R; ++r) {
                std::size_t base = static_cast<std::size_t>(r) * C;
                T dot = 0;
                for (int c = 0; c < C; ++c) dot += g[base + c] * p[base + c];
                for (int c = 0; c < C; ++c)
                    gx[base + c] += p[base + c] * (g[base + c] - dot);
            }
        });
    }

    // ---- resampling / pooling ----

    // Half-pixel-center bilinear resize with edge clamping.
    int bilinear_resize(int x, int Ho, int Wo) {
        const Tensor<T>& xv = val(x);
        if (xv.shape.size() != 4) throw ShapeError("bilinear_resize: need NCHW");
        if (Ho <= 0 || Wo <= 0)
            throw ShapeError("bilinear_resize: target " + std::to_string(Ho) + "x" +
                             std::to_string(Wo) + " must be positive");
        int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
        auto coords = [](int o, int out_sz, int in_sz, int& i0, int& i1, T& w1) {
            double src = (o + 0.5) * static_cast<double>(in_sz) / out_sz - 0.5;
            if (src < 0) src = 0;
            if (src > in_sz - 1) src = in_sz - 1;
            i0 = static_cast<int>(src);
            i1 = std::min(i0 + 1, in_sz - 1);
            w1 = static_cast<T>(src - i0);
        };
        Tensor<T> out({N, C, Ho, Wo});
        for (int oy = 0; oy < Ho; ++oy) {
            int y0, y1; T wy;
            coords(oy, Ho, H, y0, y1, wy);
            for (int ox = 0; ox < Wo; ++ox) {
                int x0, x1; T wx;
                coords(ox, Wo, W, x0, x1, wx);
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const T* xp = xv.ptr() + ((static_cast<std::size_t>(n) * C + c) * H) * W;
                        T v = (T(1) - wy) * ((T(1) - wx) * xp[y0 * W + x0] + wx * xp[y0 * W + x1]) +
                              wy * ((T(1) - wx) * xp[y1 * W + x0] + wx * xp[y1 * W + x1]);
                        out[((static_cast<std::size_t>(n) * C + c) * Ho + oy) * Wo + ox] = v;
                    }
            }
        }
        return unary(x, std::move(out), [x, N, C, H, W, Ho, Wo, coords](Tape& t, int self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& gx = t.grad(x);
            for (int oy = 0; oy < Ho; ++oy) {
                int y0, y1; T wy;
                coords(oy, Ho, H, y0, y1, wy);
                for (int ox = 0; ox < Wo; ++ox) {
                    int x0, x1; T wx;
                    coords(ox, Wo, W, x0, x1, wx);
                    for (int n = 0; n < N; ++n)
                        for (int c = 0; c < C; ++c) {
                            T gv = g[((static_cast<std::size_t>(n) * C + c) * Ho + oy) * Wo + ox];
                            T* gp = gx.ptr() + ((static_cast<std::size_t>(n) * C + c) * H) * W;
                            gp[y0 * W + x0] += (T(1) - wy) * (T(1) - wx) * gv;
                            gp[y0 * W + x1] += (T(1) - wy) * wx * gv;
                            gp[y1 * W + x0] += wy * (T(1) - wx) * gv;
                            gp[y1 * W + x1] += wy * wx * gv;
                        }
                }
            }
        });
    }

    // Adaptive average pool with floor/ceil bin boundaries. Output bins may
    // exceed the input extent (bins then overlap), which keeps small feature
    // maps usable by the pyramid pooling scales.
    int adaptive_avg_pool(int x, int Ho, int Wo) {
        const Tensor<T>& xv = val(x);
        if (xv.shape.size() != 4) throw ShapeError("adaptive_avg_pool: need NCHW");
        if (Ho <= 0 || Wo <= 0) throw ShapeError("adaptive_avg_pool: non-positive target");
        int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
        auto bin = [](int i, int out_sz, int in_sz, int& b0, int& b1) {
            b0 = (i * in_sz) / out_sz;
            b1 = ((i + 1) * in_sz + out_sz - 1) / out_sz;
            if (b1 <= b0) b1 = b0 + 1;
        };
        Tensor<T> out({N, C, Ho, Wo});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T* xp = xv.ptr() + (static_cast<std::size_t>(n) * C + c) * H * W;
                T* op = out.ptr() + (static_cast<std::size_t>(n) * C + c) * Ho * Wo;
                for (int oy = 0; oy < Ho; ++oy) {
                    int y0, y1;
                    bin(oy, Ho, H, y0, y1);
                    for (int ox = 0; ox < Wo; ++ox) {
                        int x0, x1;
                        bin(ox, Wo, W, x0, x1);
                        T acc = 0;
                        for (int iy = y0; iy < y1; ++iy)
                            for (int ix = x0; ix < x1; ++ix) acc += xp[iy * W + ix];
                        op[oy * Wo + ox] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
                    }
                }
            }
        return unary(x, std::move(out), [x, N, C, H, W, Ho, Wo, bin](Tape& t, int self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& gx = t.grad(x);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    T* gp = gx.ptr() + (static_cast<std::size_t>(n) * C + c) * H * W;
                    const T* go = g.ptr() + (static_cast<std::size_t>(n) * C + c) * Ho * Wo;
                    for (int oy = 0; oy < Ho; ++oy) {
                        int y0, y1;
                        bin(oy, Ho, H, y0, y1);
                        for (int ox = 0; ox < Wo; ++ox) {
                            int x0, x1;
                            bin(ox, Wo, W, x0, x1);
                            T gv = go[oy * Wo + ox] / static_cast<T>((y1 - y0) * (x1 - x0));
                            for (int iy = y0; iy < y1; ++iy)
                                for (int ix = x0; ix < x1; ++ix) gp[iy * W + ix] += gv;
                        }
                    }
                }
        });
    }

    // N x C x H x W -> N x C mean over spatial extent.
    int global_avg_pool(int x) {
        const Tensor<T>& xv = val(x);
        if (xv.shape.size() != 4) throw ShapeError("global_avg_pool: need NCHW");
        int N = xv.shape[0], C = xv.shape[1];
        std::size_t hw = static_cast<std::size_t>(xv.shape[2]) * xv.shape[3];
        Tensor<T> out({N, C});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T* xp = xv.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
                T acc = 0;
                for (std::size_t i = 0; i < hw; ++i) acc += xp[i];
                out[n * C + c] = acc / static_cast<T>(hw);
            }
        return unary(x, std::move(out), [x, N, C, hw](Tape& t, int self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& gx = t.grad(x);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    T gv = g[n * C + c] / static_cast<T>(hw);
                    T* gp = gx.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) gp[i] += gv;
                }
        });
    }

    // ---- dense ----

    // x: N x I, w: O x I, bias: O (optional, -1) -> N x O.
    int linear(int x, int w, int bias) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& wv = val(w);
        if (xv.shape.size() != 2 || wv.shape.size() != 2 || xv.shape[1] != wv.shape[1])
            throw ShapeError("linear: input " + shape_str(xv.shape) + " vs weight " +
                             shape_str(wv.shape));
        int N = xv.shape[0], I = xv.shape[1], O = wv.shape[0];
        Tensor<T> out({N, O});
        const T* bp = bias >= 0 ? val(bias).ptr() : nullptr;
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < O; ++o) {
                T acc = bp ? bp[o] : T(0);
                const T* xp = xv.ptr() + static_cast<std::size_t>(n) * I;
                const T* wp = wv.ptr() + static_cast<std::size_t>(o) * I;
                for (int i = 0; i < I; ++i) acc += xp[i] * wp[i];
                out[n * O + o] = acc;
            }
        bool ng = needs_grad(x) || needs_grad(w) || (bias >= 0 && needs_grad(bias));
        int id = leaf(std::move(out), ng);
        if (ng) {
            nodes_[id].back = [=](Tape& t) {
                const Tensor<T>& g = t.grad(id);
                const Tensor<T>& xv2 = t.val(x);
                const Tensor<T>& wv2 = t.val(w);
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < O; ++o) {
                        T gv = g[n * O + o];
                        if (t.needs_grad(x)) {
                            Tensor<T>& gx = t.grad(x);
                            const T* wp = wv2.ptr() + static_cast<std::size_t>(o) * I;
                            for (int i = 0; i < I; ++i) gx[n * I + i] += gv * wp[i];
                        }
                        if (t.needs_grad(w)) {
                            Tensor<T>& gw = t.grad(w);
                            const T* xp = xv2.ptr() + static_cast<std::size_t>(n) * I;
                            for (int i = 0; i < I; ++i) gw[o * I + i] += gv * xp[i];
                        }
                        if (bias >= 0 && t.needs_grad(bias)) t.grad(bias)[o] += gv;
                    }
            };
        }
        return id;
    }

    // Inverted dropout; identity in eval mode.
    int dropout(int x, double keep_prob) {
        if (keep_prob <= 0.0 || keep_prob > 1.0)
            throw ShapeError("dropout: keep probability must be in (0,1]");
        if (!training) return x;
        if (!rng) throw NumericError("dropout in train mode requires an RNG");
        const Tensor<T>& xv = val(x);
        Tensor<T> mask(xv.shape);
        T scale = static_cast<T>(1.0 / keep_prob);
        for (std::size_t i = 0; i < mask.numel(); ++i)
            mask[i] = rng->uniform() < keep_prob ? scale : T(0);
        const Tensor<T>& xr = val(x);  // re-fetch (vector may not have moved, be safe)
        Tensor<T> out(xr.shape);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xr[i] * mask[i];
        return unary(x, std::move(out), [x, mask](Tape& t, int self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& gx = t.grad(x);
            for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * mask[i];
        });
    }

    // ---- attention ----

    // Single-head scaled dot-product attention per sample.
    // q,k: N x dk x h x w ; v: N x C x h x w -> N x C x h x w.
    // Row-stochastic weights over key positions; out_i = sum_j A_ij v_j,
    // equivalently Out = V A^T with features as columns.
    int attention(int q, int k, int v) {
        const Tensor<T>& qv = val(q);
        const Tensor<T>& kv = val(k);
        const Tensor<T>& vv = val(v);
        if (qv.shape.size() != 4 || kv.shape != qv.shape || vv.shape.size() != 4 ||
            vv.shape[0] != qv.shape[0] || vv.shape[2] != qv.shape[2] ||
            vv.shape[3] != qv.shape[3])
            throw ShapeError("attention: q " + shape_str(qv.shape) + " k " +
                             shape_str(kv.shape) + " v " + shape_str(vv.shape));
        int N = qv.shape[0], dk = qv.shape[1], C = vv.shape[1];
        int P = qv.shape[2] * qv.shape[3];  // positions
        T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
        Tensor<T> A({N, P, P});
        Tensor<T> out(vv.shape);
        for (int n = 0; n < N; ++n) {
            const T* qp = qv.ptr() + static_cast<std::size_t>(n) * dk * P;
            const T* kp = kv.ptr() + static_cast<std::size_t>(n) * dk * P;
            const T* vp = vv.ptr() + static_cast<std::size_t>(n) * C * P;
            T* ap = A.ptr() + static_cast<std::size_t>(n) * P * P;
            T* op = out.ptr() + static_cast<std::size_t>(n) * C * P;
            for (int i = 0; i < P; ++i) {
                T* row = ap + static_cast<std::size_t>(i) * P;
                for (int j = 0; j < P; ++j) {
                    T acc = 0;
                    for (int d = 0; d < dk; ++d) acc += qp[d * P + i] * kp[d * P + j];
                    row[j] = acc * scale;
                }
                T mx = row[0];
                for (int j = 1; j < P; ++j) mx = std::max(mx, row[j]);
                T sum = 0;
                for (int j = 0; j < P; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    sum += row[j];
                }
                for (int j = 0; j < P; ++j) row[j] /= sum;
            }
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < P; ++i) {
                    const T* row = ap + static_cast<std::size_t>(i) * P;
                    T acc = 0;
                    for (int j = 0; j < P; ++j) acc += row[j] * vp[c * P + j];
                    op[c * P + i] = acc;
                }
        }
        last_attention_weights_ = A;
        bool ng = needs_grad(q) || needs_grad(k) || needs_grad(v);
        int id = leaf(std::move(out), ng);
        if (ng) {
            nodes_[id].back = [=](Tape& t) {
                const Tensor<T>& g = t.grad(id);
                const Tensor<T>& qv2 = t.val(q);
                const Tensor<T>& kv2 = t.val(k);
                const Tensor<T>& vv2 = t.val(v);
                for (int n = 0; n < N; ++n) {
                    const T* qp = qv2.ptr() + static_cast<std::size_t>(n) * dk * P;
                    const T* kp = kv2.ptr() + static_cast<std::size_t>(n) * dk * P;
                    const T* vp = vv2.ptr() + static_cast<std::size_t>(n) * C * P;
                    const T* ap = A.ptr() + static_cast<std::size_t>(n) * P * P;
                    const T* gp = g.ptr() + static_cast<std::size_t>(n) * C * P;
                    // dA_ij = sum_c g_ci v_cj ; dV_cj = sum_i g_ci A_ij
                    std::vector<T> dA(static_cast<std::size_t>(P) * P, T(0));
                    for (int i = 0; i < P; ++i)
                        for (int j = 0; j < P; ++j) {
                            T acc = 0;
                            for (int c = 0; c < C; ++c) acc += gp[c * P + i] * vp[c * P + j];
                            dA[static_cast<std::size_t>(i) * P + j] = acc;
                        }
                    if (t.needs_grad(v)) {
                        Tensor<T>& gvv = t.grad(v);
                        T* gvp = gvv.ptr() + static_cast<std::size_t>(n) * C * P;
                        for (int c = 0; c < C; ++c)
                            for (int j = 0; j < P; ++j) {
                                T acc = 0;
                                for (int i = 0; i < P; ++i)
                                    acc += gp[c * P + i] * ap[static_cast<std::size_t>(i) * P + j];
                                gvp[c * P + j] += acc;
                            }
                    }
                    // softmax rows backward into dS, then into q and k.
                    std::vector<T> dS(static_cast<std::size_t>(P) * P, T(0));
                    for (int i = 0; i < P; ++i) {
                        const T* arow = ap + static_cast<std::size_t>(i) * P;
                        const T* darow = dA.data() + static_cast<std::size_t>(i) * P;
                        T dot = 0;
                        for (int j = 0; j < P; ++j) dot += darow[j] * arow[j];
                        T* dsrow = dS.data() + static_cast<std::size_t>(i) * P;
                        for (int j = 0; j < P; ++j)
                            dsrow[j] = arow[j] * (darow[j] - dot) * scale;
                    }
                    if (t.needs_grad(q)) {
                        Tensor<T>& gq = t.grad(q);
                        T* gqp = gq.ptr() + static_cast<std::size_t>(n) * dk * P;
                        for (int d = 0; d < dk; ++d)
                            for (int i = 0; i < P; ++i) {
                                T acc = 0;
                                for (int j = 0; j < P; ++j)
                                    acc += dS[static_cast<std::size_t>(i) * P + j] * kp[d * P + j];
                                gqp[d * P + i] += acc;
                            }
                    }
                    if (t.needs_grad(k)) {
                        Tensor<T>& gk = t.grad(k);
                        T* gkp = gk.ptr() + static_cast<std::size_t>(n) * dk * P;
                        for (int d = 0; d < dk; ++d)
                            for (int j = 0; j < P; ++j) {
                                T acc = 0;
                                for (int i = 0; i < P; ++i)
                                    acc += dS[static_cast<std::size_t>(i) * P + j] * qp[d * P + i];
                                gkp[d * P + j] += acc;
                            }
                    }
                }
            };
        }
        return id;
    }

    // Attention weights of the most recent attention() call (for tests).
    const Tensor<T>& last_attention_weights() const { return last_attention_weights_; }

    // ---- reductions used by losses ----

    int sum_all(int x) {
        const Tensor<T>& xv = val(x);
        T acc = 0;
        for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i];
        Tensor<T> out({1});
        out[0] = acc;
        return unary(x, std::move(out), [x](Tape& t, int self) {
            T gv = t.grad(self)[0];
            Tensor<T>& gx = t.grad(x);
            for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += gv;
        });
    }

    int scale_const(int x, double c) {
        const Tensor<T>& xv = val(x);
        Tensor<T> out(xv.shape);
        T cv = static_cast<T>(c);
        for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] * cv;
        return unary(x, std::move(out), [x, cv](Tape& t, int self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& gx = t.grad(x);
            for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * cv;
        });
    }

    // Custom op escape hatch for losses: caller supplies value and backward.
    int custom(std::vector<int> parents, Tensor<T> value,
               std::function<void(Tape&, int)> back) {
        bool ng = false;
        for (int p : parents) ng = ng || needs_grad(p);
        int id = leaf(std::move(value), ng);
        if (ng && back)
            nodes_[id].back = [back, id](Tape& t) { back(t, id); };
        return id;
    }

private:
    std::vector<Node> nodes_;
    Tensor<T> last_attention_weights_;

    static int KernelSpecExtent(int in, int k, int s, int p) {
        int out = (in + 2 * p - k) / s + 1;
        if (out <= 0)
            throw ShapeError("conv output extent non-positive (in=" + std::to_string(in) +
                             ", k=" + std::to_string(k) + ", stride=" + std::to_string(s) +
                             ", pad=" + std::to_string(p) + ")");
        return out;
    }

    int unary(int x, Tensor<T> out, std::function<void(Tape&, int)> back) {
        int id = leaf(std::move(out), needs_grad(x));
        if (nodes_[id].needs_grad)
            nodes_[id].back = [back, id](Tape& t) { back(t, id); };
        return id;
    }

    int binary(int a, int b, Tensor<T> out, std::function<void(Tape&, int)> back) {
        int id = leaf(std::move(out), needs_grad(a) || needs_grad(b));
        if (nodes_[id].needs_grad)
            nodes_[id].back = [back, id](Tape& t) { back(t, id); };
        return id;
    }

    static void conv_fwd(const T* x, const T* w, const T* bias, T* y, int N, int Cin,
                         int H, int W, int Cout, int K, int stride, int pad, int groups,
                         int Ho, int Wo) {
        int cpg = Cin / groups, copg = Cout / groups;
        std::size_t ohw = static_cast<std::size_t>(Ho) * Wo;
        for (int n = 0; n < N; ++n) {
            const T* xn = x + static_cast<std::size_t>(n) * Cin * H * W;
            T* yn = y + static_cast<std::size_t>(n) * Cout * ohw;
            for (int oc = 0; oc < Cout; ++oc) {
                int g = oc / copg;
                T* yp = yn + static_cast<std::size_t>(oc) * ohw;
                T b = bias ? bias[oc] : T(0);
                for (std::size_t i = 0; i < ohw; ++i) yp[i] = b;
                for (int icg = 0; icg < cpg; ++icg) {
                    int ic = g * cpg + icg;
                    const T* xp = xn + static_cast<std::size_t>(ic) * H * W;
                    const T* wp = w + ((static_cast<std::size_t>(oc) * cpg + icg) * K) * K;
                    for (int ky = 0; ky < K; ++ky)
                        for (int kx = 0; kx < K; ++kx) {
                            T wv = wp[ky * K + kx];
                            if (wv == T(0)) continue;
                            for (int oy = 0; oy < Ho; ++oy) {
                                int iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= H) continue;
                                const T* xrow = xp + static_cast<std::size_t>(iy) * W;
                                T* yrow = yp + static_cast<std::size_t>(oy) * Wo;
                                int ox0 = 0;
                                int ix = -pad + kx;
                                while (ix < 0) { ++ox0; ix += stride; }
                                for (int ox = ox0; ox < Wo; ++ox) {
                                    int ixx = ox * stride - pad + kx;
                                    if (ixx >= W) break;
                                    yrow[ox] += wv * xrow[ixx];
                                }
                            }
                        }
                }
            }
        }
    }

    static void conv_bwd(const T* x, const T* w, const T* gy, T* gx, T* gw, int N,
                         int Cin, int H, int W, int Cout, int K, int stride, int pad,
                         int groups, int Ho, int Wo) {
        int cpg = Cin / groups, copg = Cout / groups;
        std::size_t ohw = static_cast<std::size_t>(Ho) * Wo;
        for (int n = 0; n < N; ++n) {
            const T* xn = x + static_cast<std::size_t>(n) * Cin * H * W;
            T* gxn = gx ? gx + static_cast<std::size_t>(n) * Cin * H * W : nullptr;
            const T* gyn = gy + static_cast<std::size_t>(n) * Cout * ohw;
            for (int oc = 0; oc < Cout; ++oc) {
                int g = oc / copg;
                const T* gp = gyn + static_cast<std::size_t>(oc) * ohw;
                for (int icg = 0; icg < cpg; ++icg) {
                    int ic = g * cpg + icg;
                    const T* xp = xn + static_cast<std::size_t>(ic) * H * W;
                    T* gxp = gxn ? gxn + static_cast<std::size_t>(ic) * H * W : nullptr;
                    const T* wp = w + ((static_cast<std::size_t>(oc) * cpg + icg) * K) * K;
                    T* gwp = gw ? gw + ((static_cast<std::size_t>(oc) * cpg + icg) * K) * K
                                : nullptr;
                    for (int ky = 0; ky < K; ++ky)
                        for (int kx = 0; kx < K; ++kx) {
                            T wv = wp[ky * K + kx];
                            T wacc = 0;
                            for (int oy = 0; oy < Ho; ++oy) {
                                int iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= H) continue;
                                const T* xrow = xp + static_cast<std::size_t>(iy) * W;
                                T* gxrow = gxp ? gxp + static_cast<std::size_t>(iy) * W : nullptr;
                                const T* grow = gp + static_cast<std::size_t>(oy) * Wo;
                                for (int ox = 0; ox < Wo; ++ox) {
                                    int ix = ox * stride - pad + kx;
                                    if (ix < 0 || ix >= W) continue;
                                    T gv = grow[ox];
                                    wacc += gv * xrow[ix];
                                    if (gxrow) gxrow[ix] += wv * gv;
                                }
                            }
                            if (gwp) gwp[ky * K + kx] += wacc;
                        }
                }
            }
        }
    }
};

}  // namespace fume
