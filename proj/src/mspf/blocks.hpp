#pragma once

// Composite blocks: convolutional feed-forward, pre-norm transformer block,
// local capture block (depthwise + pointwise + channel attention), and the
// two-branch parallel stage that splits channels between the attention path
// and the local path, then recombines with a channel shuffle.

#include "attention.hpp"

#include <string>
#include <vector>

namespace mspf {

template <typename T>
struct LayerNormParams {
    Tensor<T> gamma, beta;  // [C]
    double eps = 1e-5;
};

template <typename T>
LayerNormParams<T> make_layernorm(int64_t C) {
    LayerNormParams<T> p;
    p.gamma = Tensor<T>::full({C}, T(1));
    p.beta = Tensor<T>::zeros({C});
    return p;
}

template <typename T, typename Fn>
void visit_params(LayerNormParams<T>& p, const std::string& prefix, Fn&& fn) {
    fn(prefix + ".g", p.gamma);
    fn(prefix + ".b", p.beta);
}

// Feed-forward across tokens with a depthwise 3x3 between the two
// projections, applied in the spatial layout of the token grid.
template <typename T>
struct ConvFFNParams {
    Tensor<T> fc1_w, fc1_b;  // C -> eC
    Conv2dParams<T> dw;      // depthwise 3x3, reflect, on eC channels
    Tensor<T> fc2_w, fc2_b;  // eC -> C
    int expansion = 4;
};

template <typename T>
ConvFFNParams<T> make_conv_ffn(int64_t C, int expansion, Rng& rng) {
    if (expansion < 1) throw ConfigError("conv_ffn: expansion must be >= 1");
    ConvFFNParams<T> p;
    p.expansion = expansion;
    const int64_t E = C * expansion;
    init_linear(p.fc1_w, p.fc1_b, C, E, rng);
    p.dw = make_conv2d<T>(E, E, 3, 1, 1, PadMode::kReflect, int(E), true, rng);
    init_linear(p.fc2_w, p.fc2_b, E, C, rng);
    return p;
}

template <typename T, typename Fn>
void visit_params(ConvFFNParams<T>& p, const std::string& prefix, Fn&& fn) {
    fn(prefix + ".fc1.w", p.fc1_w);
    fn(prefix + ".fc1.b", p.fc1_b);
    visit_params(p.dw, prefix + ".dw", fn);
    fn(prefix + ".fc2.w", p.fc2_w);
    fn(prefix + ".fc2.b", p.fc2_b);
}

// x: [N, T, C] tokens of an H x W grid. Returns tokens of the same shape.
template <typename T>
Tensor<T> conv_ffn(const Tensor<T>& x, const ConvFFNParams<T>& p, int64_t H, int64_t W) {
    if (x.ndim() != 3) throw ShapeError("conv_ffn: expected [N, T, C] tokens");
    if (x.size(1) != H * W)
        throw ShapeError("conv_ffn: token count " + std::to_string(x.size(1)) +
                         " does not match grid " + std::to_string(H) + "x" + std::to_string(W));
    auto h1 = linear(x, p.fc1_w, p.fc1_b);
    auto sp = tokens_to_nchw(h1, H, W);
    auto dw = conv2d(sp, p.dw);
    auto act = gelu(dw);
    auto t2 = nchw_to_tokens(act);
    return linear(t2, p.fc2_w, p.fc2_b);
}

// Pre-norm transformer block: two residual sublayers.
template <typename T>
struct MspBlockParams {
    LayerNormParams<T> norm1, norm2;
    AttentionParams<T> attn;
    ConvFFNParams<T> ffn;
};

template <typename T>
MspBlockParams<T> make_msp_block(const AttentionConfig& cfg, int expansion, Rng& rng) {
    MspBlockParams<T> p;
    p.norm1 = make_layernorm<T>(cfg.channels);
    p.attn = make_attention_params<T>(cfg, rng);
    p.norm2 = make_layernorm<T>(cfg.channels);
    p.ffn = make_conv_ffn<T>(cfg.channels, expansion, rng);
    return p;
}

template <typename T, typename Fn>
void visit_params(MspBlockParams<T>& p, const std::string& prefix, Fn&& fn) {
    visit_params(p.norm1, prefix + ".n1", fn);
    visit_params(p.attn, prefix + ".attn", fn);
    visit_params(p.norm2, prefix + ".n2", fn);
    visit_params(p.ffn, prefix + ".ffn", fn);
}

// x: NCHW. Pre-norm residual structure: with the attention output projection
// and fc2 both zero, the block is an exact identity.
template <typename T>
Tensor<T> msp_block(const Tensor<T>& x, const MspBlockParams<T>& p, const AttentionConfig& cfg) {
    const int64_t H = x.size(2), W = x.size(3);
    auto t1 = nchw_to_tokens(x);
    auto n1 = layernorm(t1, p.norm1.gamma, p.norm1.beta, T(p.norm1.eps));
    auto a = msp_self_attention(tokens_to_nchw(n1, H, W), p.attn, cfg);
    auto x1 = add(x, a);
    auto t2 = nchw_to_tokens(x1);
    auto n2 = layernorm(t2, p.norm2.gamma, p.norm2.beta, T(p.norm2.eps));
    auto f = conv_ffn(n2, p.ffn, H, W);
    return add(x1, tokens_to_nchw(f, H, W));
}

// Local capture block: depthwise 3x3 -> pointwise 1x1 -> channel attention.
template <typename T>
struct LcbParams {
    Conv2dParams<T> dw;  // depthwise 3x3, reflect
    Conv2dParams<T> pw;  // 1x1, C -> C
    SEParams<T> se;
};

template <typename T>
LcbParams<T> make_lcb(int64_t C, Rng& rng) {
    LcbParams<T> p;
    p.dw = make_conv2d<T>(C, C, 3, 1, 1, PadMode::kReflect, int(C), true, rng);
    p.pw = make_conv2d<T>(C, C, 1, 1, 0, PadMode::kZeros, 1, true, rng);
    p.se = make_se<T>(C, 4, rng);
    return p;
}

template <typename T, typename Fn>
void visit_params(LcbParams<T>& p, const std::string& prefix, Fn&& fn) {
    visit_params(p.dw, prefix + ".dw", fn);
    visit_params(p.pw, prefix + ".pw", fn);
    visit_params(p.se, prefix + ".se", fn);
}

template <typename T>
Tensor<T> lcb(const Tensor<T>& x, const LcbParams<T>& p) {
    auto d = conv2d(x, p.dw);
    auto pw = conv2d(d, p.pw);
    return channel_attention(pw, p.se);
}

// One resolution stage: split channels in half, run the attention half
// through a chain of transformer blocks and the local half through a chain
// of LCBs (or pass it through untouched), then concat and shuffle.
template <typename T>
struct StageParams {
    AttentionConfig attn_cfg;  // channels == stage_width / 2
    std::vector<MspBlockParams<T>> msp_blocks;
    std::vector<LcbParams<T>> lcb_blocks;  // empty when the local branch is identity
    bool shuffle = true;
};

template <typename T>
StageParams<T> make_stage(int64_t width, int depth, int heads, int k1, int r1, int k2, int r2,
                          AttnVariant variant, bool use_lcb, bool shuffle, int expansion,
                          Rng& rng) {
    if (width % 2 != 0) throw ConfigError("stage: width must be even for the channel split");
    if (depth < 1) throw ConfigError("stage: depth must be >= 1");
    StageParams<T> p;
    p.attn_cfg = AttentionConfig{width / 2, heads, k1, r1, k2, r2, variant};
    p.attn_cfg.validate();
    p.shuffle = shuffle;
    for (int i = 0; i < depth; ++i)
        p.msp_blocks.push_back(make_msp_block<T>(p.attn_cfg, expansion, rng));
    if (use_lcb)
        for (int i = 0; i < depth; ++i) p.lcb_blocks.push_back(make_lcb<T>(width / 2, rng));
    return p;
}

template <typename T, typename Fn>
void visit_params(StageParams<T>& p, const std::string& prefix, Fn&& fn) {
    for (size_t i = 0; i < p.msp_blocks.size(); ++i)
        visit_params(p.msp_blocks[i], prefix + ".msp" + std::to_string(i), fn);
    for (size_t i = 0; i < p.lcb_blocks.size(); ++i)
        visit_params(p.lcb_blocks[i], prefix + ".lcb" + std::to_string(i), fn);
}

template <typename T>
Tensor<T> parallel_stage(const Tensor<T>& x, const StageParams<T>& p) {
    auto halves = channel_split(x);
    Tensor<T> a = halves.first;
    if (a.size(1) != p.attn_cfg.channels)
        throw ShapeError("parallel_stage: input width does not match the stage configuration");
    for (const auto& blk : p.msp_blocks) a = msp_block(a, blk, p.attn_cfg);
    Tensor<T> b = halves.second;
    for (const auto& blk : p.lcb_blocks) b = lcb(b, blk);
    auto cat = channel_concat(a, b);
    return p.shuffle ? channel_shuffle(cat, 2) : cat;
}

}  // namespace mspf
