#pragma once

// Multi-scale-projection self-attention. Queries come from full-resolution
// tokens; keys and values come from two downsampled branches with
// non-overlapping pooling (kernel == stride), each serving half the heads.
// Variants swap the downsampling operator (average pool, max pool, strided
// conv) or collapse to a single branch.

#include "nnops.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace mspf {

enum class AttnVariant {
    kAA,   // average-pool branches (default)
    kMA,   // max-pool branches
    kSRA,  // strided-conv reduction, kernel == stride, no bias
    kSSP,  // single branch, full-width projections, all heads
};

struct AttentionConfig {
    int64_t channels = 0;
    int heads = 0;
    int k1 = 0, r1 = 0;  // branch-1 pool kernel / stride
    int k2 = 0, r2 = 0;  // branch-2 pool kernel / stride
    AttnVariant variant = AttnVariant::kAA;

    bool single_branch() const { return variant == AttnVariant::kSSP; }

    // Width of each K/V projection and the head count it carries.
    int64_t branch_channels() const { return single_branch() ? channels : channels / 2; }
    int64_t branch_heads() const { return single_branch() ? heads : heads / 2; }

    void validate() const {
        if (channels <= 0) throw ConfigError("attention: channels must be positive");
        if (heads <= 0) throw ConfigError("attention: heads must be positive");
        if (heads % 2 != 0) throw ConfigError("attention: heads must be even (split across two branches)");
        if (channels % heads != 0) throw ConfigError("attention: channels must be divisible by heads");
        if (k1 <= 0 || r1 <= 0) throw ConfigError("attention: branch-1 kernel/stride must be positive");
        if (k1 != r1) throw ConfigError("attention: branch-1 pooling must be non-overlapping (kernel == stride)");
        if (!single_branch()) {
            if (k2 <= 0 || r2 <= 0) throw ConfigError("attention: branch-2 kernel/stride must be positive");
            if (k2 != r2) throw ConfigError("attention: branch-2 pooling must be non-overlapping (kernel == stride)");
        }
    }
};

template <typename T>
struct AttentionParams {
    Tensor<T> wq_w, wq_b;    // C -> C
    Tensor<T> wk1_w, wk1_b;  // C -> Cb
    Tensor<T> wv1_w, wv1_b;  // C -> Cb
    Tensor<T> wk2_w, wk2_b;  // C -> Cb (two-branch variants only)
    Tensor<T> wv2_w, wv2_b;
    Conv2dParams<T> dw_v1;   // depthwise 3x3, reflect, on Cb channels
    Conv2dParams<T> dw_v2;
    Conv2dParams<T> sr1;     // strided reduction convs (SRA only), C -> C
    Conv2dParams<T> sr2;
    Tensor<T> wo_w, wo_b;    // C -> C
};

template <typename T>
AttentionParams<T> make_attention_params(const AttentionConfig& cfg, Rng& rng) {
    cfg.validate();
    const int64_t C = cfg.channels;
    const int64_t Cb = cfg.branch_channels();
    AttentionParams<T> p;
    init_linear(p.wq_w, p.wq_b, C, C, rng);
    init_linear(p.wk1_w, p.wk1_b, C, Cb, rng);
    init_linear(p.wv1_w, p.wv1_b, C, Cb, rng);
    p.dw_v1 = make_conv2d<T>(Cb, Cb, 3, 1, 1, PadMode::kReflect, int(Cb), true, rng);
    if (cfg.variant == AttnVariant::kSRA) {
        p.sr1 = make_conv2d<T>(C, C, cfg.r1, cfg.r1, 0, PadMode::kZeros, 1, false, rng);
    }
    if (!cfg.single_branch()) {
        init_linear(p.wk2_w, p.wk2_b, C, Cb, rng);
        init_linear(p.wv2_w, p.wv2_b, C, Cb, rng);
        p.dw_v2 = make_conv2d<T>(Cb, Cb, 3, 1, 1, PadMode::kReflect, int(Cb), true, rng);
        if (cfg.variant == AttnVariant::kSRA) {
            p.sr2 = make_conv2d<T>(C, C, cfg.r2, cfg.r2, 0, PadMode::kZeros, 1, false, rng);
        }
    }
    init_linear(p.wo_w, p.wo_b, C, C, rng);
    return p;
}

template <typename T, typename Fn>
void visit_params(AttentionParams<T>& p, const std::string& prefix, Fn&& fn) {
    fn(prefix + ".wq.w", p.wq_w);
    fn(prefix + ".wq.b", p.wq_b);
    fn(prefix + ".wk1.w", p.wk1_w);
    fn(prefix + ".wk1.b", p.wk1_b);
    fn(prefix + ".wv1.w", p.wv1_w);
    fn(prefix + ".wv1.b", p.wv1_b);
    visit_params(p.dw_v1, prefix + ".dwv1", fn);
    if (p.sr1.weight.defined()) visit_params(p.sr1, prefix + ".sr1", fn);
    if (p.wk2_w.defined()) {
        fn(prefix + ".wk2.w", p.wk2_w);
        fn(prefix + ".wk2.b", p.wk2_b);
        fn(prefix + ".wv2.w", p.wv2_w);
        fn(prefix + ".wv2.b", p.wv2_b);
        visit_params(p.dw_v2, prefix + ".dwv2", fn);
        if (p.sr2.weight.defined()) visit_params(p.sr2, prefix + ".sr2", fn);
    }
    fn(prefix + ".wo.w", p.wo_w);
    fn(prefix + ".wo.b", p.wo_b);
}

namespace detail {

// [N, T, nh*Dh] -> [N*nh, T, Dh] so batched matmul runs all heads at once.
template <typename T>
Tensor<T> split_heads(const Tensor<T>& t, int64_t nh) {
    const int64_t N = t.size(0), Tk = t.size(1), Cw = t.size(2);
    if (Cw % nh != 0) throw ShapeError("split_heads: width not divisible by head count");
    auto r = reshape(t, {N, Tk, nh, Cw / nh});
    auto pm = permute(r, {0, 2, 1, 3});
    return reshape(pm, {N * nh, Tk, Cw / nh});
}

// Inverse of split_heads.
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& t, int64_t N) {
    const int64_t NH = t.size(0), Tk = t.size(1), Dh = t.size(2);
    if (NH % N != 0) throw ShapeError("merge_heads: batch not divisible by N");
    const int64_t nh = NH / N;
    auto r = reshape(t, {N, nh, Tk, Dh});
    auto pm = permute(r, {0, 2, 1, 3});
    return reshape(pm, {N, Tk, nh * Dh});
}

}  // namespace detail

// softmax(Q K^T / sqrt(Dh)) V for one head or a batch of heads.
// q: [..., T, Dh], k/v: [..., T', Dh] with matching batch dims.
template <typename T>
Tensor<T> scaled_dot_product(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    if (q.ndim() < 2 || k.ndim() != q.ndim() || v.ndim() != q.ndim())
        throw ShapeError("scaled_dot_product: rank mismatch");
    const int64_t dh = q.size(q.ndim() - 1);
    if (k.size(k.ndim() - 1) != dh)
        throw ShapeError("scaled_dot_product: query/key width mismatch");
    if (v.size(v.ndim() - 2) != k.size(k.ndim() - 2))
        throw ShapeError("scaled_dot_product: key/value row mismatch");
    auto logits = scale(matmul_nt(q, k), T(1.0 / std::sqrt(double(dh))));
    auto attn = softmax(logits, int(logits.ndim()) - 1);
    return matmul(attn, v);
}

// Average-pool branch projection: returns (K, V) token sequences of width Cb.
// V is projected first, then refined by a depthwise 3x3 in the pooled spatial
// layout before flattening back to tokens.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> pooled_projection(const Tensor<T>& x, int kernel, int stride,
                                                  const Tensor<T>& wk_w, const Tensor<T>& wk_b,
                                                  const Tensor<T>& wv_w, const Tensor<T>& wv_b,
                                                  const Conv2dParams<T>& dw_v) {
    if (x.ndim() != 4) throw ShapeError("pooled_projection: expected NCHW input");
    if (kernel != stride) throw ShapeError("pooled_projection: kernel must equal stride");
    if (x.size(2) % stride != 0 || x.size(3) % stride != 0)
        throw ShapeError("pooled_projection: spatial extents must be divisible by the stride");
    Tensor<T> pooled = avgpool2d(x, kernel, stride);
    Tensor<T> ptok = nchw_to_tokens(pooled);
    Tensor<T> K = linear(ptok, wk_w, wk_b);
    Tensor<T> Vp = linear(ptok, wv_w, wv_b);
    Tensor<T> Vd = conv2d(tokens_to_nchw(Vp, pooled.size(2), pooled.size(3)), dw_v);
    return {K, nchw_to_tokens(Vd)};
}

namespace detail {

// Variant-aware downsampling for one branch.
template <typename T>
Tensor<T> branch_pool(const Tensor<T>& x, int kernel, int stride, AttnVariant variant,
                      const Conv2dParams<T>& sr) {
    if (x.size(2) % stride != 0 || x.size(3) % stride != 0)
        throw ShapeError("msp_self_attention: spatial extents must be divisible by the branch stride");
    switch (variant) {
        case AttnVariant::kMA:
            return maxpool2d(x, kernel, stride);
        case AttnVariant::kSRA:
            return conv2d(x, sr);
        default:
            return avgpool2d(x, kernel, stride);
    }
}

}  // namespace detail

// Full multi-scale attention over an NCHW map. Output has the input shape.
template <typename T>
Tensor<T> msp_self_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                             const AttentionConfig& cfg) {
    cfg.validate();
    if (x.ndim() != 4) throw ShapeError("msp_self_attention: expected NCHW input");
    if (x.size(1) != cfg.channels)
        throw ShapeError("msp_self_attention: channel mismatch, got " + std::to_string(x.size(1)) +
                         " configured " + std::to_string(cfg.channels));
    const int64_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    const int64_t nh = cfg.branch_heads();

    auto tokens = nchw_to_tokens(x);
    auto Q = linear(tokens, p.wq_w, p.wq_b);

    auto run_branch = [&](int kernel, int stride, const Tensor<T>& wk_w, const Tensor<T>& wk_b,
                          const Tensor<T>& wv_w, const Tensor<T>& wv_b,
                          const Conv2dParams<T>& dw_v, const Conv2dParams<T>& sr,
                          const Tensor<T>& q_slice) {
        Tensor<T> pooled = detail::branch_pool(x, kernel, stride, cfg.variant, sr);
        Tensor<T> ptok = nchw_to_tokens(pooled);
        Tensor<T> K = linear(ptok, wk_w, wk_b);
        Tensor<T> Vp = linear(ptok, wv_w, wv_b);
        Tensor<T> Vd = conv2d(tokens_to_nchw(Vp, pooled.size(2), pooled.size(3)), dw_v);
        Tensor<T> V = nchw_to_tokens(Vd);
        auto out = scaled_dot_product(detail::split_heads(q_slice, nh),
                                      detail::split_heads(K, nh),
                                      detail::split_heads(V, nh));
        return detail::merge_heads(out, N);
    };

    Tensor<T> merged;
    if (cfg.single_branch()) {
        merged = run_branch(cfg.k1, cfg.r1, p.wk1_w, p.wk1_b, p.wv1_w, p.wv1_b, p.dw_v1, p.sr1, Q);
    } else {
        auto q1 = narrow(Q, 2, 0, C / 2);
        auto q2 = narrow(Q, 2, C / 2, C / 2);
        auto o1 = run_branch(cfg.k1, cfg.r1, p.wk1_w, p.wk1_b, p.wv1_w, p.wv1_b, p.dw_v1, p.sr1, q1);
        auto o2 = run_branch(cfg.k2, cfg.r2, p.wk2_w, p.wk2_b, p.wv2_w, p.wv2_b, p.dw_v2, p.sr2, q2);
        merged = concat<T>({o1, o2}, 2);
    }
    auto out_tokens = linear(merged, p.wo_w, p.wo_b);
    return tokens_to_nchw(out_tokens, H, W);
}

// Alias entry point used by the ablation harness: variant selection lives in
// the config, the computation is shared.
template <typename T>
Tensor<T> attention_variant(const Tensor<T>& x, const AttentionParams<T>& p,
                            const AttentionConfig& cfg) {
    return msp_self_attention(x, p, cfg);
}

}  // namespace mspf
