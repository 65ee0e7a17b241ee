#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mspf/model.hpp"

#include <cmath>
#include <cstring>
#include <set>
#include <string>
#include <vector>

using namespace mspf;

namespace {

template <typename T>
Tensor<T> random_tensor(Rng& rng, std::vector<int64_t> shape, double lo = -1.0,
                        double hi = 1.0) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    fill_uniform(t, rng, lo, hi);
    return t;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.cdata(), b.cdata(), sizeof(T) * size_t(a.numel())) == 0;
}

// Closed-form parameter count, written independently of the registry walk.
// Covers the pooled-branch variants with the local branch on or off.
int64_t analytic_params(const ModelConfig& cfg) {
    const int64_t e = cfg.expansion;
    auto block = [&](int64_t B) { return (4 + 2 * e) * B * B + (19 + 11 * e) * B; };
    auto local = [&](int64_t B) {
        const int64_t Br = std::max<int64_t>(B / 4, 4);
        return B * B + 12 * B + 2 * B * Br + Br;
    };
    auto stage = [&](int64_t width, int depth) {
        const int64_t B = width / 2;
        return depth * (block(B) + (cfg.use_lcb ? local(B) : 0));
    };
    auto conv = [](int64_t co, int64_t ci, int64_t k) { return co * ci * k * k + co; };

    const auto& d = cfg.stage_dims;
    int64_t n = conv(d[0], 3, 3);  // stem
    for (size_t i = 0; i < 4; ++i) {
        n += stage(d[i], cfg.encoder_depths[i]);
        if (i < 3) n += conv(d[i + 1], d[i], 3);
    }
    for (size_t j = 0; j < 3; ++j) {
        const size_t s = 2 - j;
        n += conv(d[s], d[s + 1], 1);
        n += conv(d[s], 2 * d[s], 1);
        n += stage(d[s], cfg.decoder_depths[j]);
    }
    n += conv(d[0], d[0], 3);
    n += stage(d[0], cfg.refine_depth);
    n += conv(3, d[0], 3);
    return n;
}

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.stage_dims = {4, 8, 16, 32};
    cfg.encoder_depths = {1, 1, 1, 1};
    cfg.decoder_depths = {1, 1, 1};
    cfg.r1 = {2, 2, 2, 1};
    cfg.r2 = {1, 1, 1, 1};
    cfg.refine_r1 = 2;
    cfg.refine_r2 = 1;
    cfg.expansion = 1;
    cfg.size_multiple = 16;
    return cfg;
}

}  // namespace

TEST_CASE("model config validation") {
    ModelConfig ok;
    CHECK_NOTHROW(ok.validate());
    CHECK(ok.heads_at(0) == 2);
    CHECK(ok.heads_at(1) == 2);
    CHECK(ok.heads_at(2) == 4);
    CHECK(ok.heads_at(3) == 8);

    ModelConfig bad = ok;
    bad.stage_dims = {32, 64, 128};
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = ok;
    bad.stage_dims = {32, 64, 64, 256};  // not strictly increasing
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = ok;
    bad.stage_dims = {32, 96, 128, 256};  // 96/32 = 3 heads, odd
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = ok;
    bad.encoder_depths = {2, 3, 4, 0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = ok;
    bad.decoder_depths = {4, 3};
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = ok;
    bad.expansion = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = ok;
    bad.r2 = {8, 4, 2, 0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    // Default bottleneck keeps its second branch unpooled.
    CHECK(ok.r2[3] == 1);
}

TEST_CASE("tiny configuration matches the closed-form parameter count") {
    ModelConfig cfg;
    cfg.stage_dims = {8, 16, 32, 64};
    cfg.encoder_depths = {1, 1, 1, 1};
    cfg.decoder_depths = {1, 1, 1};
    cfg.expansion = 1;
    auto m = build_model<float>(cfg, 3);
    CHECK(count_params(m) == analytic_params(cfg));
    CHECK(count_params(m) == 47695);  // hand-computed layer sum

    cfg.use_lcb = false;
    auto m2 = build_model<float>(cfg, 3);
    CHECK(count_params(m2) == analytic_params(cfg));
}

TEST_CASE("default configuration parameter count sits near the reference budget") {
    ModelConfig cfg;
    auto m = build_model<float>(cfg, 1);
    const int64_t n = count_params(m);
    CHECK(n == analytic_params(cfg));
    MESSAGE("default parameter count: " << n);
    CHECK(n >= 2122500);   // 2.83M - 25%
    CHECK(n <= 3537500);   // 2.83M + 25%
}

TEST_CASE("registries are deterministic and uniquely named") {
    ModelConfig cfg = tiny_cfg();
    auto a = build_model<float>(cfg, 11);
    auto b = build_model<float>(cfg, 11);
    std::vector<std::string> names_a, names_b;
    std::vector<Tensor<float>> ta, tb;
    visit_params(a, [&](const std::string& n, Tensor<float>& t) {
        names_a.push_back(n);
        ta.push_back(t);
    });
    visit_params(b, [&](const std::string& n, Tensor<float>& t) {
        names_b.push_back(n);
        tb.push_back(t);
    });
    REQUIRE(names_a == names_b);
    std::set<std::string> unique(names_a.begin(), names_a.end());
    CHECK(unique.size() == names_a.size());
    for (size_t i = 0; i < ta.size(); ++i) CHECK(bitwise_equal(ta[i], tb[i]));

    auto c = build_model<float>(cfg, 12);
    bool any_diff = false;
    std::vector<Tensor<float>> tc;
    visit_params(c, [&](const std::string&, Tensor<float>& t) { tc.push_back(t); });
    for (size_t i = 0; i < ta.size() && !any_diff; ++i) any_diff = !bitwise_equal(ta[i], tc[i]);
    CHECK(any_diff);
}

TEST_CASE("forward preserves shape and stays finite") {
    auto m = build_model<float>(tiny_cfg(), 5);
    Rng rng(6);
    auto x = random_tensor<float>(rng, {1, 3, 32, 48}, 0.0, 1.0);
    auto y = forward(m, x);
    REQUIRE(y.shape() == x.shape());
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::isfinite(double(y.cdata()[i])));
}

TEST_CASE("zero head with the global residual is an exact identity") {
    auto m = build_model<float>(tiny_cfg(), 7);
    for (int64_t i = 0; i < m.params.head.weight.numel(); ++i)
        m.params.head.weight.data()[i] = 0.0f;
    for (int64_t i = 0; i < m.params.head.bias.numel(); ++i)
        m.params.head.bias.data()[i] = 0.0f;
    Rng rng(8);
    auto x = random_tensor<float>(rng, {1, 3, 16, 16}, 0.0, 1.0);
    auto y = forward(m, x);
    CHECK(bitwise_equal(y, x));

    m.cfg.global_residual = false;
    auto z = forward(m, x);
    for (int64_t i = 0; i < z.numel(); ++i) CHECK(z.cdata()[i] == 0.0f);
}

TEST_CASE("constant input propagates to a per-channel constant output") {
    ModelConfig cfg = tiny_cfg();
    cfg.reflect_pad_outer = true;
    auto m = build_model<float>(cfg, 9);
    auto x = Tensor<float>::full({1, 3, 32, 32}, 0.37f);
    auto y = forward(m, x);
    const int64_t hw = 32 * 32;
    double worst = 0;
    for (int64_t c = 0; c < 3; ++c) {
        double mean = 0;
        for (int64_t i = 0; i < hw; ++i) mean += double(y.cdata()[c * hw + i]);
        mean /= double(hw);
        for (int64_t i = 0; i < hw; ++i)
            worst = std::max(worst, std::abs(double(y.cdata()[c * hw + i]) - mean));
    }
    MESSAGE("constant-propagation max deviation: " << worst);
    CHECK(worst < 1e-5);
}

TEST_CASE("pad_to_multiple and crop_to round trip") {
    Rng rng(10);
    auto x = random_tensor<double>(rng, {1, 3, 65, 65});
    auto [padded, orig] = pad_to_multiple(x, 32);
    REQUIRE(padded.shape() == std::vector<int64_t>({1, 3, 96, 96}));
    CHECK(orig.h == 65);
    CHECK(orig.w == 65);
    auto back = crop_to(padded, orig);
    CHECK(bitwise_equal(back, x));

    // Reflection excludes the edge sample: padded row H+k mirrors row H-2-k.
    for (int64_t k = 0; k < 4; ++k)
        CHECK(padded.cdata()[(65 + k) * 96 + 0] == x.cdata()[(63 - k) * 65 + 0]);

    auto even = random_tensor<double>(rng, {1, 3, 64, 64});
    auto [same, e2] = pad_to_multiple(even, 32);
    CHECK(bitwise_equal(same, even));
    CHECK(e2.h == 64);

    CHECK_THROWS_AS(pad_to_multiple(x, 0), ContractError);
    auto bad = Tensor<double>::zeros({3, 65, 65});
    CHECK_THROWS_AS(pad_to_multiple(bad, 32), ShapeError);
}

TEST_CASE("pad_to_multiple gradients") {
    Rng rng(11);
    auto x = random_tensor<double>(rng, {1, 2, 3, 3});
    auto op = [](const auto& xs) { return pad_to_multiple(xs[0], 4).first; };
    CHECK(finite_diff_check<double>(op, {x}, 1e-6, 1e-6).pass);
}

TEST_CASE("forward input contract") {
    auto m = build_model<float>(tiny_cfg(), 12);
    CHECK_THROWS_AS(forward(m, Tensor<float>::zeros({1, 3, 20, 16})), ShapeError);
    CHECK_THROWS_AS(forward(m, Tensor<float>::zeros({1, 4, 16, 16})), ShapeError);
    CHECK_THROWS_AS(forward(m, Tensor<float>::zeros({3, 16, 16})), ShapeError);
}

TEST_CASE("restore handles arbitrary extents and matches forward on aligned input") {
    auto m = build_model<float>(tiny_cfg(), 13);
    Rng rng(14);
    auto odd = random_tensor<float>(rng, {1, 3, 21, 27}, 0.0, 1.0);
    auto out = restore(m, odd);
    REQUIRE(out.shape() == odd.shape());
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(std::isfinite(double(out.cdata()[i])));

    auto aligned = random_tensor<float>(rng, {1, 3, 16, 16}, 0.0, 1.0);
    CHECK(bitwise_equal(restore(m, aligned), forward(m, aligned)));
}

TEST_CASE("mac formulas") {
    CHECK(conv_macs(32, 3, 3, 128, 128) == 14155776);
    CHECK(linear_macs(1, 16, 16) == 256);
}

TEST_CASE("mac accounting is additive and scales with area and batch") {
    ModelConfig cfg;
    auto b = count_macs(cfg, 256, 256);
    CHECK(b.total() == b.conv + b.linear + b.attention);
    MESSAGE("default 256x256 MACs: " << b.total());

    auto b2 = count_macs(cfg, 256, 256, 2);
    CHECK(b2.total() == 2 * b.total());

    // The SE convs run on globally pooled 1x1 maps and do not scale with
    // area; every other conv MAC is proportional to H*W.
    int64_t se = 0;
    auto se_of = [&](int64_t width, int depth) {
        const int64_t B = width / 2;
        se += depth * 2 * B * std::max<int64_t>(B / 4, 4);
    };
    for (size_t i = 0; i < 4; ++i) se_of(cfg.stage_dims[i], cfg.encoder_depths[i]);
    for (size_t j = 0; j < 3; ++j) se_of(cfg.stage_dims[2 - j], cfg.decoder_depths[j]);
    se_of(cfg.stage_dims[0], cfg.refine_depth);

    auto big = count_macs(cfg, 512, 512);
    CHECK(big.conv == 4 * (b.conv - se) + se);
    CHECK(big.linear == 4 * b.linear);
    CHECK(big.attention == 16 * b.attention);

    ModelConfig plain;
    plain.use_lcb = false;
    auto p1 = count_macs(plain, 256, 256);
    auto p2 = count_macs(plain, 512, 512);
    CHECK(p2.conv == 4 * p1.conv);

    CHECK_THROWS_AS(count_macs(cfg, 100, 100), ShapeError);
}

TEST_CASE("default mac count sits near the reference budget") {
    ModelConfig cfg;
    const int64_t total = count_macs(cfg, 256, 256).total();
    // Reference interval spans the two published figures with 30% headroom.
    CHECK(total >= int64_t(4.26e9 * 0.70));
    CHECK(total <= int64_t(4.42e9 * 1.30));
}

TEST_CASE("variant mac ordering") {
    ModelConfig aa;
    ModelConfig sra = aa;
    sra.variant = AttnVariant::kSRA;
    ModelConfig nolcb = aa;
    nolcb.use_lcb = false;
    CHECK(count_macs(sra, 256, 256).total() > count_macs(aa, 256, 256).total());
    CHECK(count_macs(nolcb, 256, 256).total() < count_macs(aa, 256, 256).total());
}

TEST_CASE("end-to-end gradient check on a tiny configuration") {
    ModelConfig cfg = tiny_cfg();
    auto m = build_model<double>(cfg, 21);
    Rng rng(22);
    auto x = random_tensor<double>(rng, {1, 3, 16, 16}, 0.0, 1.0);
    std::vector<Tensor<double>> inputs{
        x, m.params.stem.weight, m.params.stem.bias, m.params.head.weight,
        m.params.head.bias, m.params.enc_stages[3].msp_blocks[0].attn.wo_w};
    auto op = [&m](const auto& xs) {
        Model<double> probe = m;  // shared handles except the checked tensors
        probe.params.stem.weight = xs[1];
        probe.params.stem.bias = xs[2];
        probe.params.head.weight = xs[3];
        probe.params.head.bias = xs[4];
        probe.params.enc_stages[3].msp_blocks[0].attn.wo_w = xs[5];
        return forward(probe, xs[0]);
    };
    // Deep composite: forward rounding (~1e-13) divided by the step bounds
    // the numeric noise, so the step is wider than for single ops.
    auto rep = finite_diff_check<double>(op, inputs, 1e-5, 1e-4);
    CHECK(rep.pass);
    if (!rep.pass) {
        MESSAGE("max_rel_err=" << rep.max_rel_err << " input=" << rep.worst_input
                               << " coord=" << rep.worst_coord);
    }
}
