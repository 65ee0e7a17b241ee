#pragma once

// Structured neural-network ops over NCHW tensors and token sequences:
// convolution, pooling, normalization, activations, channel manipulation.
// Each op computes forward in place and records its backward rule when the
// active tape tracks any input.

#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace mspf {

enum class PadMode { kZeros, kReflect };

template <typename T>
struct Conv2dParams {
    Tensor<T> weight;  // [C_out, C_in/groups, kH, kW]
    Tensor<T> bias;    // [C_out], optional (undefined tensor = no bias)
    int stride = 1;
    int pad = 0;
    PadMode pad_mode = PadMode::kZeros;
    int groups = 1;
};

template <typename T>
struct SEParams {
    Conv2dParams<T> reduce;  // 1x1, C -> max(C/r, 4)
    Conv2dParams<T> expand;  // 1x1, max(C/r, 4) -> C
    int r = 4;
};

namespace detail {

// Mirror indexing that excludes the edge sample, folded until in range so it
// stays valid even when the pad exceeds the extent.
inline int64_t reflect_index(int64_t i, int64_t n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

template <typename T>
void validate_conv(const Tensor<T>& x, const Conv2dParams<T>& p, int64_t& N, int64_t& Ci,
                   int64_t& H, int64_t& W, int64_t& Co, int64_t& Cig, int64_t& kH,
                   int64_t& kW, int64_t& Ho, int64_t& Wo) {
    if (x.ndim() != 4) throw ShapeError("conv2d: input must be NCHW");
    if (p.weight.ndim() != 4) throw ShapeError("conv2d: weight must be 4-axis");
    if (p.stride < 1 || p.pad < 0 || p.groups < 1) {
        throw ShapeError("conv2d: stride/pad/groups out of range");
    }
    N = x.size(0);
    Ci = x.size(1);
    H = x.size(2);
    W = x.size(3);
    Co = p.weight.size(0);
    Cig = p.weight.size(1);
    kH = p.weight.size(2);
    kW = p.weight.size(3);
    if (Ci % p.groups != 0 || Co % p.groups != 0) {
        throw ShapeError("conv2d: channels not divisible by groups");
    }
    if (Cig != Ci / p.groups) {
        throw ShapeError("conv2d: weight expects " + std::to_string(Cig * p.groups) +
                         " input channels, got " + std::to_string(Ci));
    }
    if (p.bias.defined() && (p.bias.ndim() != 1 || p.bias.size(0) != Co)) {
        throw ShapeError("conv2d: bias extent mismatch");
    }
    if (H + 2 * p.pad < kH || W + 2 * p.pad < kW) {
        throw ShapeError("conv2d: kernel exceeds padded input");
    }
    Ho = (H + 2 * p.pad - kH) / p.stride + 1;
    Wo = (W + 2 * p.pad - kW) / p.stride + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: empty output");
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dParams<T>& p) {
    int64_t N, Ci, H, W, Co, Cig, kH, kW, Ho, Wo;
    detail::validate_conv(x, p, N, Ci, H, W, Co, Cig, kH, kW, Ho, Wo);
    const int64_t Cog = Co / p.groups;
    const int64_t s = p.stride;
    const int64_t pad = p.pad;
    const bool reflect = p.pad_mode == PadMode::kReflect;

    Tensor<T> out = Tensor<T>::zeros({N, Co, Ho, Wo});
    const T* px = x.cdata();
    const T* pw = p.weight.cdata();
    const T* pb = p.bias.defined() ? p.bias.cdata() : nullptr;
    T* po = out.data();

    for (int64_t n = 0; n < N; ++n) {
        for (int64_t co = 0; co < Co; ++co) {
            const int64_t g = co / Cog;
            const T* wbase = pw + co * Cig * kH * kW;
            T* obase = po + (n * Co + co) * Ho * Wo;
            for (int64_t ho = 0; ho < Ho; ++ho) {
                for (int64_t wo = 0; wo < Wo; ++wo) {
                    T acc = pb ? pb[co] : T(0);
                    for (int64_t cl = 0; cl < Cig; ++cl) {
                        const T* xch = px + (n * Ci + g * Cig + cl) * H * W;
                        const T* wch = wbase + cl * kH * kW;
                        for (int64_t kh = 0; kh < kH; ++kh) {
                            int64_t ih = ho * s - pad + kh;
                            if (reflect) {
                                ih = detail::reflect_index(ih, H);
                            } else if (ih < 0 || ih >= H) {
                                continue;
                            }
                            for (int64_t kw = 0; kw < kW; ++kw) {
                                int64_t iw = wo * s - pad + kw;
                                if (reflect) {
                                    iw = detail::reflect_index(iw, W);
                                } else if (iw < 0 || iw >= W) {
                                    continue;
                                }
                                acc += xch[ih * W + iw] * wch[kh * kW + kw];
                            }
                        }
                    }
                    obase[ho * Wo + wo] = acc;
                }
            }
        }
    }
    finite_guard(out, "conv2d");

    Tape<T>* tape = Tape<T>::current();
    const bool track = tape && (x.requires_grad() || p.weight.requires_grad() ||
                                (p.bias.defined() && p.bias.requires_grad()));
    if (track) {
        tape->prepare(x);
        tape->prepare(p.weight);
        if (p.bias.defined()) tape->prepare(p.bias);
        tape->emit(out);
        auto xn = x.node(), wn = p.weight.node(), on = out.node();
        auto bn = p.bias.defined() ? p.bias.node() : nullptr;
        const uint64_t tid = tape->id();
        tape->record([xn, wn, bn, on, tid, N, Ci, H, W, Co, Cig, Cog, kH, kW, Ho, Wo, s,
                      pad, reflect] {
            const T* g = on->grad.data();
            const T* px2 = xn->value.data();
            const T* pw2 = wn->value.data();
            const bool gx = xn->tape_id == tid;
            const bool gw = wn->tape_id == tid;
            const bool gb = bn && bn->tape_id == tid;
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t co = 0; co < Co; ++co) {
                    const int64_t grp = co / Cog;
                    const T* wbase = pw2 + co * Cig * kH * kW;
                    T* dwbase = gw ? wn->grad.data() + co * Cig * kH * kW : nullptr;
                    const T* gbase = g + (n * Co + co) * Ho * Wo;
                    for (int64_t ho = 0; ho < Ho; ++ho) {
                        for (int64_t wo = 0; wo < Wo; ++wo) {
                            const T go = gbase[ho * Wo + wo];
                            if (go == T(0)) continue;
                            if (gb) bn->grad[size_t(co)] += go;
                            for (int64_t cl = 0; cl < Cig; ++cl) {
                                const int64_t ch = n * Ci + grp * Cig + cl;
                                const T* xch = px2 + ch * H * W;
                                T* dxch = gx ? xn->grad.data() + ch * H * W : nullptr;
                                const T* wch = wbase + cl * kH * kW;
                                T* dwch = dwbase ? dwbase + cl * kH * kW : nullptr;
                                for (int64_t kh = 0; kh < kH; ++kh) {
                                    int64_t ih = ho * s - pad + kh;
                                    if (reflect) {
                                        ih = detail::reflect_index(ih, H);
                                    } else if (ih < 0 || ih >= H) {
                                        continue;
                                    }
                                    for (int64_t kw = 0; kw < kW; ++kw) {
                                        int64_t iw = wo * s - pad + kw;
                                        if (reflect) {
                                            iw = detail::reflect_index(iw, W);
                                        } else if (iw < 0 || iw >= W) {
                                            continue;
                                        }
                                        if (dwch) dwch[kh * kW + kw] += go * xch[ih * W + iw];
                                        if (dxch) dxch[ih * W + iw] += go * wch[kh * kW + kw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pooling.

namespace detail {

inline void pool_extents(int64_t H, int64_t W, int kernel, int stride, int64_t& Ho,
                         int64_t& Wo) {
    if (kernel < 1 || stride < 1) throw ShapeError("pool: kernel/stride must be positive");
    if (kernel > H || kernel > W) {
        throw ShapeError("pool: kernel " + std::to_string(kernel) + " exceeds extent " +
                         std::to_string(std::min(H, W)));
    }
    Ho = (H - kernel) / stride + 1;
    Wo = (W - kernel) / stride + 1;
}

}  // namespace detail

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int kernel, int stride) {
    if (x.ndim() != 4) throw ShapeError("avgpool2d: input must be NCHW");
    const int64_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    int64_t Ho, Wo;
    detail::pool_extents(H, W, kernel, stride, Ho, Wo);
    Tensor<T> out = Tensor<T>::zeros({N, C, Ho, Wo});
    const T* px = x.cdata();
    T* po = out.data();
    const T inv = T(1) / T(kernel * kernel);
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xch = px + nc * H * W;
        T* och = po + nc * Ho * Wo;
        for (int64_t ho = 0; ho < Ho; ++ho) {
            for (int64_t wo = 0; wo < Wo; ++wo) {
                T acc = T(0);
                for (int64_t kh = 0; kh < kernel; ++kh) {
                    const T* row = xch + (ho * stride + kh) * W + wo * stride;
                    for (int64_t kw = 0; kw < kernel; ++kw) acc += row[kw];
                }
                och[ho * Wo + wo] = acc * inv;
            }
        }
    }
    finite_guard(out, "avgpool2d");
    if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
        tape->prepare(x);
        tape->emit(out);
        auto xn = x.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, on, tid, N, C, H, W, Ho, Wo, kernel, stride, inv] {
            if (xn->tape_id != tid) return;
            const T* g = on->grad.data();
            T* gx = xn->grad.data();
            for (int64_t nc = 0; nc < N * C; ++nc) {
                T* xch = gx + nc * H * W;
                const T* och = g + nc * Ho * Wo;
                for (int64_t ho = 0; ho < Ho; ++ho) {
                    for (int64_t wo = 0; wo < Wo; ++wo) {
                        const T go = och[ho * Wo + wo] * inv;
                        for (int64_t kh = 0; kh < kernel; ++kh) {
                            T* row = xch + (ho * stride + kh) * W + wo * stride;
                            for (int64_t kw = 0; kw < kernel; ++kw) row[kw] += go;
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int kernel, int stride) {
    if (x.ndim() != 4) throw ShapeError("maxpool2d: input must be NCHW");
    const int64_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    int64_t Ho, Wo;
    detail::pool_extents(H, W, kernel, stride, Ho, Wo);
    Tensor<T> out = Tensor<T>::zeros({N, C, Ho, Wo});
    std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
    const T* px = x.cdata();
    T* po = out.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xch = px + nc * H * W;
        T* och = po + nc * Ho * Wo;
        for (int64_t ho = 0; ho < Ho; ++ho) {
            for (int64_t wo = 0; wo < Wo; ++wo) {
                int64_t best = (ho * stride) * W + wo * stride;
                T bv = xch[best];
                for (int64_t kh = 0; kh < kernel; ++kh) {
                    for (int64_t kw = 0; kw < kernel; ++kw) {
                        const int64_t at = (ho * stride + kh) * W + wo * stride + kw;
                        if (xch[at] > bv) {
                            bv = xch[at];
                            best = at;
                        }
                    }
                }
                och[ho * Wo + wo] = bv;
                argmax[size_t(nc * Ho * Wo + ho * Wo + wo)] = nc * H * W + best;
            }
        }
    }
    finite_guard(out, "maxpool2d");
    if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
        tape->prepare(x);
        tape->emit(out);
        auto xn = x.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, on, tid, argmax = std::move(argmax)] {
            if (xn->tape_id != tid) return;
            const T* g = on->grad.data();
            T* gx = xn->grad.data();
            for (size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> global_avgpool(const Tensor<T>& x) {
    if (x.ndim() != 4) throw ShapeError("global_avgpool: input must be NCHW");
    const int64_t N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
    Tensor<T> out = Tensor<T>::zeros({N, C, 1, 1});
    const T* px = x.cdata();
    T* po = out.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        double acc = 0.0;
        const T* xch = px + nc * HW;
        for (int64_t i = 0; i < HW; ++i) acc += double(xch[i]);
        po[nc] = T(acc / double(HW));
    }
    finite_guard(out, "global_avgpool");
    if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
        tape->prepare(x);
        tape->emit(out);
        auto xn = x.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, on, tid, N, C, HW] {
            if (xn->tape_id != tid) return;
            const T* g = on->grad.data();
            T* gx = xn->grad.data();
            for (int64_t nc = 0; nc < N * C; ++nc) {
                const T go = g[nc] / T(HW);
                T* xch = gx + nc * HW;
                for (int64_t i = 0; i < HW; ++i) xch[i] += go;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization over the trailing axis.

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps) {
    if (!(eps > T(0))) throw ContractError("layernorm: eps must be positive");
    const int64_t C = x.size(x.ndim() - 1);
    if (gamma.ndim() != 1 || gamma.size(0) != C || beta.ndim() != 1 || beta.size(0) != C) {
        throw ShapeError("layernorm: gamma/beta must match trailing extent " +
                         std::to_string(C));
    }
    const int64_t rows = x.numel() / C;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    std::vector<T> mu(static_cast<size_t>(rows));
    std::vector<T> istd(static_cast<size_t>(rows));
    const T* px = x.cdata();
    const T* pg = gamma.cdata();
    const T* pb = beta.cdata();
    T* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = px + r * C;
        double m = 0.0;
        for (int64_t c = 0; c < C; ++c) m += double(row[c]);
        m /= double(C);
        double v = 0.0;
        for (int64_t c = 0; c < C; ++c) {
            const double d = double(row[c]) - m;
            v += d * d;
        }
        v /= double(C);
        const T rmu = T(m);
        const T rstd = T(1.0 / std::sqrt(v + double(eps)));
        mu[size_t(r)] = rmu;
        istd[size_t(r)] = rstd;
        T* orow = po + r * C;
        for (int64_t c = 0; c < C; ++c) {
            orow[c] = (row[c] - rmu) * rstd * pg[c] + pb[c];
        }
    }
    finite_guard(out, "layernorm");
    if (Tape<T>* tape = detail::recording_tape<T>({&x, &gamma, &beta})) {
        tape->prepare(x);
        tape->prepare(gamma);
        tape->prepare(beta);
        tape->emit(out);
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, gn, bn, on, tid, rows, C, mu = std::move(mu),
                      istd = std::move(istd)] {
            const T* g = on->grad.data();
            const T* px2 = xn->value.data();
            const T* pg2 = gn->value.data();
            const bool dx = xn->tape_id == tid;
            const bool dg = gn->tape_id == tid;
            const bool db = bn->tape_id == tid;
            for (int64_t r = 0; r < rows; ++r) {
                const T* grow = g + r * C;
                const T* xrow = px2 + r * C;
                const T rmu = mu[size_t(r)];
                const T rstd = istd[size_t(r)];
                if (dg || db) {
                    for (int64_t c = 0; c < C; ++c) {
                        if (dg) gn->grad[size_t(c)] += grow[c] * (xrow[c] - rmu) * rstd;
                        if (db) bn->grad[size_t(c)] += grow[c];
                    }
                }
                if (dx) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t c = 0; c < C; ++c) {
                        const double ga = double(grow[c]) * double(pg2[c]);
                        const double xh = double(xrow[c] - rmu) * double(rstd);
                        m1 += ga;
                        m2 += ga * xh;
                    }
                    m1 /= double(C);
                    m2 /= double(C);
                    T* gxrow = xn->grad.data() + r * C;
                    for (int64_t c = 0; c < C; ++c) {
                        const double ga = double(grow[c]) * double(pg2[c]);
                        const double xh = double(xrow[c] - rmu) * double(rstd);
                        gxrow[c] += T((ga - m1 - xh * m2) * double(rstd));
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax along an axis, computed with max subtraction.

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    if (axis < 0 || axis >= x.ndim()) throw ShapeError("softmax: axis out of range");
    int64_t outer = 1, inner = 1;
    const int64_t lanes = x.size(axis);
    for (int i = 0; i < axis; ++i) outer *= x.size(i);
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.size(i);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.cdata();
    T* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const T* lane = px + o * lanes * inner + in;
            T* olane = po + o * lanes * inner + in;
            T mx = lane[0];
            for (int64_t l = 1; l < lanes; ++l) mx = std::max(mx, lane[l * inner]);
            double s = 0.0;
            for (int64_t l = 0; l < lanes; ++l) {
                const T e = std::exp(lane[l * inner] - mx);
                olane[l * inner] = e;
                s += double(e);
            }
            const T invs = T(1.0 / s);
            for (int64_t l = 0; l < lanes; ++l) olane[l * inner] *= invs;
        }
    }
    finite_guard(out, "softmax");
    if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
        tape->prepare(x);
        tape->emit(out);
        auto xn = x.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, on, tid, outer, inner, lanes] {
            if (xn->tape_id != tid) return;
            const T* g = on->grad.data();
            const T* y = on->value.data();
            T* gx = xn->grad.data();
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * lanes * inner + in;
                    double dot = 0.0;
                    for (int64_t l = 0; l < lanes; ++l) {
                        dot += double(g[base + l * inner]) * double(y[base + l * inner]);
                    }
                    for (int64_t l = 0; l < lanes; ++l) {
                        const int64_t at = base + l * inner;
                        gx[at] += y[at] * (g[at] - T(dot));
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Affine map over the trailing axis: out = x * W (+ b).

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b = {}) {
    if (W.ndim() != 2) throw ShapeError("linear: weight must be [C_in, C_out]");
    const int64_t Ci = W.size(0), Co = W.size(1);
    if (x.size(x.ndim() - 1) != Ci) {
        throw ShapeError("linear: trailing extent " + std::to_string(x.size(x.ndim() - 1)) +
                         " does not match weight rows " + std::to_string(Ci));
    }
    if (b.defined() && (b.ndim() != 1 || b.size(0) != Co)) {
        throw ShapeError("linear: bias extent mismatch");
    }
    const int64_t M = x.numel() / Ci;
    std::vector<int64_t> out_shape = x.shape();
    out_shape.back() = Co;
    Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
    detail::mm_acc(x.cdata(), W.cdata(), out.data(), M, Ci, Co);
    if (b.defined()) {
        T* po = out.data();
        const T* pb = b.cdata();
        for (int64_t m = 0; m < M; ++m) {
            for (int64_t c = 0; c < Co; ++c) po[m * Co + c] += pb[c];
        }
    }
    finite_guard(out, "linear");
    Tape<T>* tape = Tape<T>::current();
    const bool track = tape && (x.requires_grad() || W.requires_grad() ||
                                (b.defined() && b.requires_grad()));
    if (track) {
        tape->prepare(x);
        tape->prepare(W);
        if (b.defined()) tape->prepare(b);
        tape->emit(out);
        auto xn = x.node(), wn = W.node(), on = out.node();
        auto bn = b.defined() ? b.node() : nullptr;
        const uint64_t tid = tape->id();
        tape->record([xn, wn, bn, on, tid, M, Ci, Co] {
            const T* g = on->grad.data();
            if (xn->tape_id == tid) {
                detail::mm_nt_acc(g, wn->value.data(), xn->grad.data(), M, Co, Ci);
            }
            if (wn->tape_id == tid) {
                detail::mm_tn_acc(xn->value.data(), g, wn->grad.data(), Ci, M, Co);
            }
            if (bn && bn->tape_id == tid) {
                T* gb = bn->grad.data();
                for (int64_t m = 0; m < M; ++m) {
                    for (int64_t c = 0; c < Co; ++c) gb[c] += g[m * Co + c];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pointwise activations.

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.cdata();
    T* po = out.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
    if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
        tape->prepare(x);
        tape->emit(out);
        auto xn = x.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, on, tid, n] {
            if (xn->tape_id != tid) return;
            const T* g = on->grad.data();
            const T* v = xn->value.data();
            T* gx = xn->grad.data();
            for (int64_t i = 0; i < n; ++i) {
                if (v[i] > T(0)) gx[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.cdata();
    T* po = out.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const T v = px[i];
        if (v >= T(0)) {
            po[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            po[i] = e / (T(1) + e);
        }
    }
    finite_guard(out, "sigmoid");
    if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
        tape->prepare(x);
        tape->emit(out);
        auto xn = x.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, on, tid, n] {
            if (xn->tape_id != tid) return;
            const T* g = on->grad.data();
            const T* y = on->value.data();
            T* gx = xn->grad.data();
            for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
        });
    }
    return out;
}

// Tanh-form approximation with the conventional cubic coefficient.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double kAlpha = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kCubic = 0.044715;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.cdata();
    T* po = out.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double v = double(px[i]);
        const double t = std::tanh(kAlpha * (v + kCubic * v * v * v));
        po[i] = T(0.5 * v * (1.0 + t));
    }
    finite_guard(out, "gelu");
    if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
        tape->prepare(x);
        tape->emit(out);
        auto xn = x.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, on, tid, n] {
            if (xn->tape_id != tid) return;
            const T* g = on->grad.data();
            const T* v = xn->value.data();
            T* gx = xn->grad.data();
            for (int64_t i = 0; i < n; ++i) {
                const double xv = double(v[i]);
                const double u = kAlpha * (xv + kCubic * xv * xv * xv);
                const double t = std::tanh(u);
                const double du = kAlpha * (1.0 + 3.0 * kCubic * xv * xv);
                const double dy = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                gx[i] += g[i] * T(dy);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Channel manipulation.

template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, int groups) {
    if (x.ndim() != 4) throw ShapeError("channel_shuffle: input must be NCHW");
    const int64_t N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
    if (groups < 1 || C % groups != 0) {
        throw ShapeError("channel_shuffle: " + std::to_string(C) +
                         " channels not divisible by " + std::to_string(groups) + " groups");
    }
    const int64_t per = C / groups;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.cdata();
    T* po = out.data();
    // out channel j*groups+i draws from in channel i*per+j.
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t oc = 0; oc < C; ++oc) {
            const int64_t i = oc % groups;
            const int64_t j = oc / groups;
            const int64_t ic = i * per + j;
            std::copy(px + (n * C + ic) * HW, px + (n * C + ic + 1) * HW,
                      po + (n * C + oc) * HW);
        }
    }
    if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
        tape->prepare(x);
        tape->emit(out);
        auto xn = x.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, on, tid, N, C, HW, groups, per] {
            if (xn->tape_id != tid) return;
            const T* g = on->grad.data();
            T* gx = xn->grad.data();
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t oc = 0; oc < C; ++oc) {
                    const int64_t i = oc % groups;
                    const int64_t j = oc / groups;
                    const int64_t ic = i * per + j;
                    const T* src = g + (n * C + oc) * HW;
                    T* dst = gx + (n * C + ic) * HW;
                    for (int64_t k = 0; k < HW; ++k) dst[k] += src[k];
                }
            }
        });
    }
    return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_split(const Tensor<T>& x) {
    if (x.ndim() != 4) throw ShapeError("channel_split: input must be NCHW");
    const int64_t C = x.size(1);
    if (C % 2 != 0) throw ShapeError("channel_split: odd channel count " + std::to_string(C));
    return {narrow(x, 1, 0, C / 2), narrow(x, 1, C / 2, C / 2)};
}

template <typename T>
Tensor<T> channel_concat(const Tensor<T>& a, const Tensor<T>& b) {
    return concat(std::vector<Tensor<T>>{a, b}, 1);
}

// Per-channel gate: out[n,c,:,:] = x[n,c,:,:] * s[n,c,0,0].
template <typename T>
Tensor<T> scale_per_channel(const Tensor<T>& x, const Tensor<T>& s) {
    if (x.ndim() != 4 || s.ndim() != 4 || s.size(2) != 1 || s.size(3) != 1 ||
        s.size(0) != x.size(0) || s.size(1) != x.size(1)) {
        throw ShapeError("scale_per_channel: gate must be [N,C,1,1] matching input");
    }
    const int64_t NC = x.size(0) * x.size(1);
    const int64_t HW = x.size(2) * x.size(3);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.cdata();
    const T* ps = s.cdata();
    T* po = out.data();
    for (int64_t nc = 0; nc < NC; ++nc) {
        const T gate = ps[nc];
        const T* xch = px + nc * HW;
        T* och = po + nc * HW;
        for (int64_t i = 0; i < HW; ++i) och[i] = xch[i] * gate;
    }
    finite_guard(out, "scale_per_channel");
    if (Tape<T>* tape = detail::recording_tape<T>({&x, &s})) {
        tape->prepare(x);
        tape->prepare(s);
        tape->emit(out);
        auto xn = x.node(), sn = s.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, sn, on, tid, NC, HW] {
            const T* g = on->grad.data();
            const T* px2 = xn->value.data();
            const T* ps2 = sn->value.data();
            for (int64_t nc = 0; nc < NC; ++nc) {
                const T* gch = g + nc * HW;
                if (xn->tape_id == tid) {
                    const T gate = ps2[nc];
                    T* gxch = xn->grad.data() + nc * HW;
                    for (int64_t i = 0; i < HW; ++i) gxch[i] += gch[i] * gate;
                }
                if (sn->tape_id == tid) {
                    const T* xch = px2 + nc * HW;
                    T acc = T(0);
                    for (int64_t i = 0; i < HW; ++i) acc += gch[i] * xch[i];
                    sn->grad[size_t(nc)] += acc;
                }
            }
        });
    }
    return out;
}

template <typename T>
void validate_se(const SEParams<T>& p, int64_t C) {
    const int64_t hidden = std::max<int64_t>(C / p.r, 4);
    if (p.reduce.weight.size(0) != hidden || p.reduce.weight.size(1) != C ||
        p.expand.weight.size(0) != C || p.expand.weight.size(1) != hidden) {
        throw ShapeError("channel_attention: squeeze widths inconsistent with input");
    }
}

template <typename T>
Tensor<T> channel_attention(const Tensor<T>& x, const SEParams<T>& p) {
    if (x.ndim() != 4) throw ShapeError("channel_attention: input must be NCHW");
    validate_se(p, x.size(1));
    Tensor<T> pooled = global_avgpool(x);
    Tensor<T> gate = sigmoid(conv2d(relu(conv2d(pooled, p.reduce)), p.expand));
    return scale_per_channel(x, gate);
}

// ---------------------------------------------------------------------------
// Resampling and layout conversion.

template <typename T>
Tensor<T> upsample_nn(const Tensor<T>& x, int factor) {
    if (x.ndim() != 4) throw ShapeError("upsample_nn: input must be NCHW");
    if (factor < 1) throw ShapeError("upsample_nn: factor must be >= 1");
    if (factor == 1) {
        // Still a distinct op so gradients flow; cheap copy path.
        return scale(x, T(1));
    }
    const int64_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    const int64_t Ho = H * factor, Wo = W * factor;
    Tensor<T> out = Tensor<T>::zeros({N, C, Ho, Wo});
    const T* px = x.cdata();
    T* po = out.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xch = px + nc * H * W;
        T* och = po + nc * Ho * Wo;
        for (int64_t ho = 0; ho < Ho; ++ho) {
            const T* xrow = xch + (ho / factor) * W;
            T* orow = och + ho * Wo;
            for (int64_t wo = 0; wo < Wo; ++wo) orow[wo] = xrow[wo / factor];
        }
    }
    if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
        tape->prepare(x);
        tape->emit(out);
        auto xn = x.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, on, tid, N, C, H, W, Ho, Wo, factor] {
            if (xn->tape_id != tid) return;
            const T* g = on->grad.data();
            T* gx = xn->grad.data();
            for (int64_t nc = 0; nc < N * C; ++nc) {
                const T* gch = g + nc * Ho * Wo;
                T* xch = gx + nc * H * W;
                for (int64_t ho = 0; ho < Ho; ++ho) {
                    T* xrow = xch + (ho / factor) * W;
                    const T* grow = gch + ho * Wo;
                    for (int64_t wo = 0; wo < Wo; ++wo) xrow[wo / factor] += grow[wo];
                }
            }
        });
    }
    return out;
}

// [N,C,H,W] -> [N, H*W, C]
template <typename T>
Tensor<T> nchw_to_tokens(const Tensor<T>& x) {
    if (x.ndim() != 4) throw ShapeError("nchw_to_tokens: input must be NCHW");
    const int64_t N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
    Tensor<T> out = Tensor<T>::zeros({N, HW, C});
    const T* px = x.cdata();
    T* po = out.data();
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const T* src = px + (n * C + c) * HW;
            T* dst = po + n * HW * C + c;
            for (int64_t i = 0; i < HW; ++i) dst[i * C] = src[i];
        }
    }
    if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
        tape->prepare(x);
        tape->emit(out);
        auto xn = x.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, on, tid, N, C, HW] {
            if (xn->tape_id != tid) return;
            const T* g = on->grad.data();
            T* gx = xn->grad.data();
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t c = 0; c < C; ++c) {
                    T* dst = gx + (n * C + c) * HW;
                    const T* src = g + n * HW * C + c;
                    for (int64_t i = 0; i < HW; ++i) dst[i] += src[i * C];
                }
            }
        });
    }
    return out;
}

// [N, H*W, C] -> [N,C,H,W]
template <typename T>
Tensor<T> tokens_to_nchw(const Tensor<T>& t, int64_t H, int64_t W) {
    if (t.ndim() != 3) throw ShapeError("tokens_to_nchw: input must be [N, tokens, C]");
    const int64_t N = t.size(0), HW = t.size(1), C = t.size(2);
    if (HW != H * W) {
        throw ShapeError("tokens_to_nchw: " + std::to_string(HW) + " tokens cannot fill " +
                         std::to_string(H) + "x" + std::to_string(W));
    }
    Tensor<T> out = Tensor<T>::zeros({N, C, H, W});
    const T* px = t.cdata();
    T* po = out.data();
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            T* dst = po + (n * C + c) * HW;
            const T* src = px + n * HW * C + c;
            for (int64_t i = 0; i < HW; ++i) dst[i] = src[i * C];
        }
    }
    if (Tape<T>* tape = detail::recording_tape<T>({&t})) {
        tape->prepare(t);
        tape->emit(out);
        auto xn = t.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, on, tid, N, C, HW] {
            if (xn->tape_id != tid) return;
            const T* g = on->grad.data();
            T* gx = xn->grad.data();
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t c = 0; c < C; ++c) {
                    const T* src = g + (n * C + c) * HW;
                    T* dst = gx + n * HW * C + c;
                    for (int64_t i = 0; i < HW; ++i) dst[i * C] += src[i];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameter builders with the artifact's initialization scheme: truncated
// normal (std 0.02) for projection matrices, fan-in-scaled uniform for conv
// kernels, zeros for every bias.

template <typename T>
Conv2dParams<T> make_conv2d(int64_t ci, int64_t co, int k, int stride, int pad,
                            PadMode mode, int groups, bool bias, Rng& rng) {
    Conv2dParams<T> p;
    p.weight = Tensor<T>::zeros({co, ci / groups, k, k});
    const double bound = 1.0 / std::sqrt(double((ci / groups) * k * k));
    fill_uniform(p.weight, rng, -bound, bound);
    if (bias) p.bias = Tensor<T>::zeros({co});
    p.stride = stride;
    p.pad = pad;
    p.pad_mode = mode;
    p.groups = groups;
    return p;
}

template <typename T>
void init_linear(Tensor<T>& w, Tensor<T>& b, int64_t ci, int64_t co, Rng& rng) {
    w = Tensor<T>::zeros({ci, co});
    fill_trunc_normal(w, rng, 0.02);
    b = Tensor<T>::zeros({co});
}

template <typename T>
SEParams<T> make_se(int64_t C, int r, Rng& rng) {
    SEParams<T> p;
    p.r = r;
    const int64_t hidden = std::max<int64_t>(C / r, 4);
    p.reduce = make_conv2d<T>(C, hidden, 1, 1, 0, PadMode::kZeros, 1, true, rng);
    p.expand = make_conv2d<T>(hidden, C, 1, 1, 0, PadMode::kZeros, 1, true, rng);
    return p;
}

template <typename T, typename Fn>
void visit_params(Conv2dParams<T>& p, const std::string& prefix, Fn&& fn) {
    fn(prefix + ".w", p.weight);
    if (p.bias.defined()) fn(prefix + ".b", p.bias);
}

template <typename T, typename Fn>
void visit_params(SEParams<T>& p, const std::string& prefix, Fn&& fn) {
    visit_params(p.reduce, prefix + ".reduce", fn);
    visit_params(p.expand, prefix + ".expand", fn);
}

// Top-left spatial crop.
template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, int64_t Ho, int64_t Wo) {
    if (x.ndim() != 4) throw ShapeError("crop2d: input must be NCHW");
    if (Ho < 1 || Wo < 1 || Ho > x.size(2) || Wo > x.size(3)) {
        throw ShapeError("crop2d: crop exceeds extents");
    }
    const int64_t NC = x.size(0) * x.size(1);
    const int64_t H = x.size(2), W = x.size(3);
    Tensor<T> out = Tensor<T>::zeros({x.size(0), x.size(1), Ho, Wo});
    const T* px = x.cdata();
    T* po = out.data();
    for (int64_t nc = 0; nc < NC; ++nc) {
        for (int64_t h = 0; h < Ho; ++h) {
            const T* src = px + nc * H * W + h * W;
            std::copy(src, src + Wo, po + nc * Ho * Wo + h * Wo);
        }
    }
    if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
        tape->prepare(x);
        tape->emit(out);
        auto xn = x.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, on, tid, NC, H, W, Ho, Wo] {
            if (xn->tape_id != tid) return;
            const T* g = on->grad.data();
            T* gx = xn->grad.data();
            for (int64_t nc = 0; nc < NC; ++nc) {
                for (int64_t h = 0; h < Ho; ++h) {
                    const T* src = g + nc * Ho * Wo + h * Wo;
                    T* dst = gx + nc * H * W + h * W;
                    for (int64_t w = 0; w < Wo; ++w) dst[w] += src[w];
                }
            }
        });
    }
    return out;
}

}  // namespace mspf
