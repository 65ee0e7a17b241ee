#pragma once

// Full network assembly: stride-2 stem, four encoder stages joined by
// strided convs, a mirrored decoder with skip fusion, a full-resolution
// refinement stage reached through an upsample bridge, and a 3x3 head with
// an optional global residual. Also exact parameter and MAC accounting.

#include "blocks.hpp"

#include <array>
#include <cassert>
#include <string>
#include <vector>

namespace mspf {

struct ModelConfig {
    std::vector<int64_t> stage_dims{32, 64, 128, 256};
    std::vector<int> encoder_depths{2, 3, 4, 6};
    std::vector<int> decoder_depths{4, 3, 2};
    std::vector<int> r1{16, 8, 4, 2};  // branch-1 pool size per encoder stage (K == R)
    std::vector<int> r2{8, 4, 2, 1};   // branch-2 pool size per encoder stage
    int refine_depth = 1;
    int refine_r1 = 16;
    int refine_r2 = 8;
    int expansion = 4;
    AttnVariant variant = AttnVariant::kAA;
    bool use_lcb = true;
    bool use_shuffle = true;
    bool global_residual = true;
    int size_multiple = 32;
    // Reflect-pad the stem/downsample/bridge/head convs instead of zero
    // padding; used by constant-propagation checks.
    bool reflect_pad_outer = false;

    int heads_at(size_t i) const {
        return int(std::max<int64_t>(2, stage_dims[i] / 32));
    }

    void validate() const {
        if (stage_dims.size() != 4 || encoder_depths.size() != 4)
            throw ConfigError("model: expected exactly four encoder stages");
        if (decoder_depths.size() != 3)
            throw ConfigError("model: expected exactly three decoder stages");
        if (r1.size() != 4 || r2.size() != 4)
            throw ConfigError("model: expected four branch pool sizes per branch");
        for (size_t i = 0; i < 4; ++i) {
            if (stage_dims[i] <= 0 || stage_dims[i] % 2 != 0)
                throw ConfigError("model: stage dims must be positive and even");
            if (i > 0 && stage_dims[i] <= stage_dims[i - 1])
                throw ConfigError("model: stage dims must be strictly increasing");
            if (encoder_depths[i] < 1) throw ConfigError("model: encoder depths must be >= 1");
            if (r1[i] < 1 || r2[i] < 1) throw ConfigError("model: pool sizes must be >= 1");
            if (heads_at(i) % 2 != 0)
                throw ConfigError("model: stage head count must be even; adjust stage dims");
        }
        for (int d : decoder_depths)
            if (d < 1) throw ConfigError("model: decoder depths must be >= 1");
        if (refine_depth < 1) throw ConfigError("model: refinement depth must be >= 1");
        if (refine_r1 < 1 || refine_r2 < 1)
            throw ConfigError("model: refinement pool sizes must be >= 1");
        if (expansion < 1) throw ConfigError("model: ffn expansion must be >= 1");
        if (size_multiple < 1) throw ConfigError("model: size multiple must be >= 1");
    }
};

template <typename T>
struct ModelParams {
    Conv2dParams<T> stem;
    std::vector<StageParams<T>> enc_stages;  // 4
    std::vector<Conv2dParams<T>> downs;      // 3, 3x3 stride 2
    std::vector<Conv2dParams<T>> up_proj;    // 3, 1x1 after upsample
    std::vector<Conv2dParams<T>> fuse;       // 3, 1x1 after skip concat
    std::vector<StageParams<T>> dec_stages;  // 3
    Conv2dParams<T> bridge;                  // 3x3 after the final upsample
    StageParams<T> refine;
    Conv2dParams<T> head;                    // 3x3 -> 3
};

template <typename T>
struct Model {
    ModelConfig cfg;
    ModelParams<T> params;
};

template <typename T, typename Fn>
void visit_params(ModelParams<T>& p, const std::string& prefix, Fn&& fn) {
    visit_params(p.stem, prefix + ".stem", fn);
    for (size_t i = 0; i < p.enc_stages.size(); ++i) {
        visit_params(p.enc_stages[i], prefix + ".enc" + std::to_string(i), fn);
        if (i < p.downs.size()) visit_params(p.downs[i], prefix + ".down" + std::to_string(i), fn);
    }
    for (size_t j = 0; j < p.dec_stages.size(); ++j) {
        visit_params(p.up_proj[j], prefix + ".up" + std::to_string(j), fn);
        visit_params(p.fuse[j], prefix + ".fuse" + std::to_string(j), fn);
        visit_params(p.dec_stages[j], prefix + ".dec" + std::to_string(j), fn);
    }
    visit_params(p.bridge, prefix + ".bridge", fn);
    visit_params(p.refine, prefix + ".refine", fn);
    visit_params(p.head, prefix + ".head", fn);
}

template <typename T, typename Fn>
void visit_params(Model<T>& m, Fn&& fn) {
    visit_params(m.params, "model", fn);
}

template <typename T>
Model<T> build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const auto pad_mode = cfg.reflect_pad_outer ? PadMode::kReflect : PadMode::kZeros;
    Model<T> m;
    m.cfg = cfg;
    auto& p = m.params;
    const auto& d = cfg.stage_dims;

    p.stem = make_conv2d<T>(3, d[0], 3, 2, 1, pad_mode, 1, true, rng);
    for (size_t i = 0; i < 4; ++i) {
        p.enc_stages.push_back(make_stage<T>(d[i], cfg.encoder_depths[i], cfg.heads_at(i),
                                             cfg.r1[i], cfg.r1[i], cfg.r2[i], cfg.r2[i],
                                             cfg.variant, cfg.use_lcb, cfg.use_shuffle,
                                             cfg.expansion, rng));
        if (i < 3)
            p.downs.push_back(make_conv2d<T>(d[i], d[i + 1], 3, 2, 1, pad_mode, 1, true, rng));
    }
    for (size_t j = 0; j < 3; ++j) {
        const size_t e = 2 - j;  // mirrored encoder stage index
        p.up_proj.push_back(make_conv2d<T>(d[e + 1], d[e], 1, 1, 0, PadMode::kZeros, 1, true, rng));
        p.fuse.push_back(make_conv2d<T>(2 * d[e], d[e], 1, 1, 0, PadMode::kZeros, 1, true, rng));
        p.dec_stages.push_back(make_stage<T>(d[e], cfg.decoder_depths[j], cfg.heads_at(e),
                                             cfg.r1[e], cfg.r1[e], cfg.r2[e], cfg.r2[e],
                                             cfg.variant, cfg.use_lcb, cfg.use_shuffle,
                                             cfg.expansion, rng));
    }
    p.bridge = make_conv2d<T>(d[0], d[0], 3, 1, 1, pad_mode, 1, true, rng);
    p.refine = make_stage<T>(d[0], cfg.refine_depth, cfg.heads_at(0), cfg.refine_r1,
                             cfg.refine_r1, cfg.refine_r2, cfg.refine_r2, cfg.variant,
                             cfg.use_lcb, cfg.use_shuffle, cfg.expansion, rng);
    p.head = make_conv2d<T>(d[0], 3, 3, 1, 1, pad_mode, 1, true, rng);
    return m;
}

template <typename T>
Tensor<T> forward(const Model<T>& m, const Tensor<T>& x) {
    const auto& cfg = m.cfg;
    if (x.ndim() != 4 || x.size(1) != 3)
        throw ShapeError("forward: expected an N x 3 x H x W input");
    if (x.size(2) % cfg.size_multiple != 0 || x.size(3) % cfg.size_multiple != 0)
        throw ShapeError("forward: spatial extents must be multiples of " +
                         std::to_string(cfg.size_multiple) + "; apply pad_to_multiple first");
    const auto& p = m.params;
    const int64_t H = x.size(2), W = x.size(3);

    Tensor<T> h = conv2d(x, p.stem);
    std::vector<Tensor<T>> skips;
    for (size_t i = 0; i < 4; ++i) {
        assert(h.size(2) == H >> (i + 1) && h.size(3) == W >> (i + 1));
        h = parallel_stage(h, p.enc_stages[i]);
        if (i < 3) {
            skips.push_back(h);
            h = conv2d(h, p.downs[i]);
        }
    }
    for (size_t j = 0; j < 3; ++j) {
        h = upsample_nn(h, 2);
        h = conv2d(h, p.up_proj[j]);
        h = channel_concat(h, skips[2 - j]);
        h = conv2d(h, p.fuse[j]);
        h = parallel_stage(h, p.dec_stages[j]);
    }
    h = upsample_nn(h, 2);
    h = conv2d(h, p.bridge);
    assert(h.size(2) == H && h.size(3) == W);
    h = parallel_stage(h, p.refine);
    h = conv2d(h, p.head);
    return cfg.global_residual ? add(h, x) : h;
}

struct Extents {
    int64_t h = 0, w = 0;
};

// Reflect-pad right/bottom to the next multiple of m. Returns the padded
// image and the original extents for crop_to.
template <typename T>
std::pair<Tensor<T>, Extents> pad_to_multiple(const Tensor<T>& x, int m) {
    if (m < 1) throw ContractError("pad_to_multiple: m must be >= 1");
    if (x.ndim() != 4) throw ShapeError("pad_to_multiple: expected NCHW input");
    const int64_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    const int64_t Ht = (H + m - 1) / m * m;
    const int64_t Wt = (W + m - 1) / m * m;
    Extents orig{H, W};
    if (Ht == H && Wt == W) {
        Tensor<T> out = Tensor<T>::zeros(x.shape());
        const T* src = x.cdata();
        T* dst = out.data();
        for (int64_t i = 0; i < x.numel(); ++i) dst[i] = src[i];
        if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
            tape->prepare(x);
            tape->emit(out);
            auto xn = x.node();
            auto on = out.node();
            const uint64_t tid = tape->id();
            tape->record([xn, on, tid] {
                if (xn->tape_id != tid) return;
                for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
            });
        }
        return {out, orig};
    }
    Tensor<T> out = Tensor<T>::zeros({N, C, Ht, Wt});
    const T* src = x.cdata();
    T* dst = out.data();
    std::vector<int64_t> rows(static_cast<size_t>(Ht)), cols(static_cast<size_t>(Wt));
    for (int64_t i = 0; i < Ht; ++i) rows[size_t(i)] = detail::reflect_index(i, H);
    for (int64_t j = 0; j < Wt; ++j) cols[size_t(j)] = detail::reflect_index(j, W);
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* sp = src + nc * H * W;
        T* dp = dst + nc * Ht * Wt;
        for (int64_t i = 0; i < Ht; ++i)
            for (int64_t j = 0; j < Wt; ++j) dp[i * Wt + j] = sp[rows[size_t(i)] * W + cols[size_t(j)]];
    }
    if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
        tape->prepare(x);
        tape->emit(out);
        auto xn = x.node();
        auto on = out.node();
        const uint64_t tid = tape->id();
        tape->record([xn, on, tid, N, C, H, W, Ht, Wt, rows, cols] {
            if (xn->tape_id != tid) return;
            for (int64_t nc = 0; nc < N * C; ++nc) {
                for (int64_t i = 0; i < Ht; ++i)
                    for (int64_t j = 0; j < Wt; ++j)
                        xn->grad[size_t(nc * H * W + rows[size_t(i)] * W + cols[size_t(j)])] +=
                            on->grad[size_t(nc * Ht * Wt + i * Wt + j)];
            }
        });
    }
    return {out, orig};
}

template <typename T>
Tensor<T> crop_to(const Tensor<T>& x, Extents e) {
    return crop2d(x, e.h, e.w);
}

// Pad, run, crop: inference entry point for arbitrary extents.
template <typename T>
Tensor<T> restore(const Model<T>& m, const Tensor<T>& x) {
    auto [padded, orig] = pad_to_multiple(x, m.cfg.size_multiple);
    return crop_to(forward(m, padded), orig);
}

template <typename T>
int64_t count_params(const Model<T>& m) {
    auto copy = m.params;  // tensor handles share storage; cheap
    int64_t n = 0;
    visit_params(copy, "model", [&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
}

// ---------------------------------------------------------------------------
// MAC accounting. Counts scalar multiply-accumulates of convolutions, linear
// projections, and the two attention matmuls per head; elementwise work and
// normalization are excluded.

struct MacBreakdown {
    int64_t conv = 0;
    int64_t linear = 0;
    int64_t attention = 0;
    int64_t total() const { return conv + linear + attention; }
};

inline int64_t conv_macs(int64_t co, int64_t ci_per_group, int64_t k, int64_t ho, int64_t wo) {
    return co * ci_per_group * k * k * ho * wo;
}

inline int64_t linear_macs(int64_t tokens, int64_t ci, int64_t co) { return tokens * ci * co; }

namespace detail {

inline void attention_macs(MacBreakdown& acc, int64_t C, int64_t H, int64_t W, int r1, int r2,
                           AttnVariant variant) {
    const bool single = variant == AttnVariant::kSSP;
    const int64_t Cb = single ? C : C / 2;
    const int64_t tokens = H * W;
    acc.linear += linear_macs(tokens, C, C);  // W_q
    auto branch = [&](int r, const int64_t q_width) {
        const int64_t tp = (H / r) * (W / r);
        acc.linear += 2 * linear_macs(tp, C, Cb);  // W_k, W_v
        acc.conv += conv_macs(Cb, 1, 3, H / r, W / r);
        if (variant == AttnVariant::kSRA) acc.conv += conv_macs(C, C, r, H / r, W / r);
        // Q K^T and attn V, summed over heads: 2 * T * T' * width.
        acc.attention += 2 * tokens * tp * q_width;
    };
    branch(r1, Cb);
    if (!single) branch(r2, Cb);
    acc.linear += linear_macs(tokens, C, C);  // W_o
}

inline void stage_macs(MacBreakdown& acc, int64_t width, int depth, int r1, int r2,
                       const ModelConfig& cfg, int64_t H, int64_t W) {
    const int64_t B = width / 2;
    const int64_t tokens = H * W;
    for (int i = 0; i < depth; ++i) {
        attention_macs(acc, B, H, W, r1, r2, cfg.variant);
        const int64_t E = B * cfg.expansion;
        acc.linear += linear_macs(tokens, B, E);
        acc.conv += conv_macs(E, 1, 3, H, W);
        acc.linear += linear_macs(tokens, E, B);
        if (cfg.use_lcb) {
            acc.conv += conv_macs(B, 1, 3, H, W);
            acc.conv += conv_macs(B, B, 1, H, W);
            const int64_t Br = std::max<int64_t>(B / 4, 4);
            acc.conv += conv_macs(Br, B, 1, 1, 1);
            acc.conv += conv_macs(B, Br, 1, 1, 1);
        }
    }
}

}  // namespace detail

inline MacBreakdown count_macs(const ModelConfig& cfg, int64_t H, int64_t W, int64_t batch = 1) {
    cfg.validate();
    if (H % cfg.size_multiple != 0 || W % cfg.size_multiple != 0)
        throw ShapeError("count_macs: extents must be multiples of " +
                         std::to_string(cfg.size_multiple));
    const auto& d = cfg.stage_dims;
    MacBreakdown acc;
    int64_t h = H / 2, w = W / 2;
    acc.conv += conv_macs(d[0], 3, 3, h, w);  // stem
    for (size_t i = 0; i < 4; ++i) {
        detail::stage_macs(acc, d[i], cfg.encoder_depths[i], cfg.r1[i], cfg.r2[i], cfg, h, w);
        if (i < 3) {
            h /= 2;
            w /= 2;
            acc.conv += conv_macs(d[i + 1], d[i], 3, h, w);
        }
    }
    for (size_t j = 0; j < 3; ++j) {
        const size_t e = 2 - j;
        h *= 2;
        w *= 2;
        acc.conv += conv_macs(d[e], d[e + 1], 1, h, w);      // post-upsample projection
        acc.conv += conv_macs(d[e], 2 * d[e], 1, h, w);      // skip fusion
        detail::stage_macs(acc, d[e], cfg.decoder_depths[j], cfg.r1[e], cfg.r2[e], cfg, h, w);
    }
    h *= 2;
    w *= 2;
    acc.conv += conv_macs(d[0], d[0], 3, h, w);  // bridge
    detail::stage_macs(acc, d[0], cfg.refine_depth, cfg.refine_r1, cfg.refine_r2, cfg, h, w);
    acc.conv += conv_macs(3, d[0], 3, h, w);  // head
    acc.conv *= batch;
    acc.linear *= batch;
    acc.attention *= batch;
    return acc;
}

template <typename T>
MacBreakdown count_macs(const Model<T>& m, int64_t H, int64_t W, int64_t batch = 1) {
    return count_macs(m.cfg, H, W, batch);
}

}  // namespace mspf
