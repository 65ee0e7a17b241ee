#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mspf/nnops.hpp"

#include <cmath>
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

template <typename U>
using CP = Conv2dParams<U>;

// Nested-loop convolution oracle in double, zero padding only.
std::vector<double> conv_oracle(const std::vector<double>& x, int64_t Ci, int64_t H,
                                int64_t W, const std::vector<double>& w,
                                const std::vector<double>& b, int64_t Co, int64_t k,
                                int64_t stride, int64_t pad, int64_t groups) {
    const int64_t Ho = (H + 2 * pad - k) / stride + 1;
    const int64_t Wo = (W + 2 * pad - k) / stride + 1;
    const int64_t Cig = Ci / groups, Cog = Co / groups;
    std::vector<double> out(size_t(Co * Ho * Wo), 0.0);
    for (int64_t co = 0; co < Co; ++co) {
        const int64_t g = co / Cog;
        for (int64_t ho = 0; ho < Ho; ++ho) {
            for (int64_t wo = 0; wo < Wo; ++wo) {
                double acc = b.empty() ? 0.0 : b[size_t(co)];
                for (int64_t cl = 0; cl < Cig; ++cl) {
                    for (int64_t kh = 0; kh < k; ++kh) {
                        for (int64_t kw = 0; kw < k; ++kw) {
                            const int64_t ih = ho * stride - pad + kh;
                            const int64_t iw = wo * stride - pad + kw;
                            if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                            acc += x[size_t(((g * Cig + cl) * H + ih) * W + iw)] *
                                   w[size_t(((co * Cig + cl) * k + kh) * k + kw)];
                        }
                    }
                }
                out[size_t((co * Ho + ho) * Wo + wo)] = acc;
            }
        }
    }
    return out;
}

}  // namespace

TEST_CASE("conv2d identity kernel") {
    Rng rng(1);
    auto x = random_tensor<double>(rng, {1, 3, 4, 4});
    CP<double> p;
    p.weight = Tensor<double>::zeros({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) p.weight.data()[c * 3 + c] = 1.0;
    auto y = conv2d(x, p);
    CHECK(y.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.cdata()[i] == x.cdata()[i]);
}

TEST_CASE("depthwise all-ones reflect kernel on constant input") {
    CP<double> p;
    p.weight = Tensor<double>::full({5, 1, 3, 3}, 1.0);
    p.pad = 1;
    p.pad_mode = PadMode::kReflect;
    p.groups = 5;
    auto x = Tensor<double>::full({2, 5, 4, 6}, 0.37);
    auto y = conv2d(x, p);
    CHECK(y.shape() == x.shape());
    for (int64_t i = 0; i < y.numel(); ++i) {
        CHECK(y.cdata()[i] == doctest::Approx(9 * 0.37).epsilon(1e-14));
    }
}

TEST_CASE("conv2d vs nested-loop oracle") {
    Rng rng(2);
    auto x = random_tensor<float>(rng, {1, 2, 5, 5});
    CP<float> p;
    p.weight = random_tensor<float>(rng, {3, 2, 3, 3});
    p.bias = random_tensor<float>(rng, {3});
    p.stride = 2;
    p.pad = 1;
    auto y = conv2d(x, p);
    CHECK(y.shape() == std::vector<int64_t>{1, 3, 3, 3});
    std::vector<double> xd(x.cdata(), x.cdata() + x.numel());
    std::vector<double> wd(p.weight.cdata(), p.weight.cdata() + p.weight.numel());
    std::vector<double> bd(p.bias.cdata(), p.bias.cdata() + p.bias.numel());
    auto ref = conv_oracle(xd, 2, 5, 5, wd, bd, 3, 3, 2, 1, 1);
    for (int64_t i = 0; i < y.numel(); ++i) {
        CHECK(std::fabs(double(y.cdata()[i]) - ref[size_t(i)]) < 1e-6);
    }
}

TEST_CASE("grouped conv2d vs oracle") {
    Rng rng(3);
    auto x = random_tensor<double>(rng, {1, 4, 5, 5});
    CP<double> p;
    p.weight = random_tensor<double>(rng, {6, 2, 3, 3});
    p.groups = 2;
    p.pad = 1;
    auto y = conv2d(x, p);
    std::vector<double> xd(x.cdata(), x.cdata() + x.numel());
    std::vector<double> wd(p.weight.cdata(), p.weight.cdata() + p.weight.numel());
    auto ref = conv_oracle(xd, 4, 5, 5, wd, {}, 6, 3, 1, 1, 2);
    for (int64_t i = 0; i < y.numel(); ++i) {
        CHECK(y.cdata()[i] == doctest::Approx(ref[size_t(i)]).epsilon(1e-12));
    }
}

TEST_CASE("conv2d shape violations") {
    Rng rng(4);
    auto x = random_tensor<double>(rng, {1, 3, 4, 4});
    CP<double> p;
    p.weight = random_tensor<double>(rng, {8, 4, 3, 3});
    CHECK_THROWS_AS(conv2d(x, p), ShapeError);  // channel mismatch

    CP<double> big;
    big.weight = random_tensor<double>(rng, {2, 3, 7, 7});
    CHECK_THROWS_AS(conv2d(x, big), ShapeError);  // kernel exceeds input
}

TEST_CASE("conv2d gradients") {
    Rng rng(5);
    auto x = random_tensor<double>(rng, {1, 2, 5, 5});
    auto w = random_tensor<double>(rng, {3, 2, 3, 3});
    auto b = random_tensor<double>(rng, {3});
    auto op = [](const auto& xs) {
        using U = typename std::decay_t<decltype(xs[0])>::value_type;
        CP<U> p;
        p.weight = xs[1];
        p.bias = xs[2];
        p.stride = 2;
        p.pad = 1;
        return conv2d(xs[0], p);
    };
    CHECK(finite_diff_check<double>(op, {x, w, b}, 1e-5, 1e-6).pass);

    auto dwop = [](const auto& xs) {
        using U = typename std::decay_t<decltype(xs[0])>::value_type;
        CP<U> p;
        p.weight = xs[1];
        p.pad = 1;
        p.pad_mode = PadMode::kReflect;
        p.groups = 2;
        return conv2d(xs[0], p);
    };
    auto dx = random_tensor<double>(rng, {1, 2, 4, 4});
    auto dw = random_tensor<double>(rng, {2, 1, 3, 3});
    CHECK(finite_diff_check<double>(dwop, {dx, dw}, 1e-5, 1e-6).pass);
}

TEST_CASE("avgpool2d basics") {
    auto x = tensor_create<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    auto y = avgpool2d(x, 2, 2);
    CHECK(y.numel() == 1);
    CHECK(y.item() == 2.5);

    auto c = Tensor<double>::full({1, 3, 4, 4}, 2.0);
    auto yc = avgpool2d(c, 2, 2);
    for (int64_t i = 0; i < yc.numel(); ++i) CHECK(yc.cdata()[i] == 2.0);

    Rng rng(6);
    auto r = random_tensor<double>(rng, {1, 2, 3, 3});
    auto id = avgpool2d(r, 1, 1);
    for (int64_t i = 0; i < r.numel(); ++i) CHECK(id.cdata()[i] == r.cdata()[i]);

    CHECK_THROWS_AS(avgpool2d(r, 4, 4), ShapeError);
}

TEST_CASE("avgpool preserves the mean when the kernel tiles the input") {
    Rng rng(7);
    auto x = random_tensor<double>(rng, {1, 1, 4, 4});
    auto y = avgpool2d(x, 2, 2);
    CHECK(mean(y).item() == doctest::Approx(mean(x).item()).epsilon(1e-13));
}

TEST_CASE("maxpool2d basics") {
    auto x = tensor_create<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    CHECK(maxpool2d(x, 2, 2).item() == 4.0);

    auto c = Tensor<double>::full({1, 2, 4, 4}, 0.5);
    auto yc = maxpool2d(c, 2, 2);
    for (int64_t i = 0; i < yc.numel(); ++i) CHECK(yc.cdata()[i] == 0.5);

    Rng rng(8);
    auto r = random_tensor<double>(rng, {1, 2, 3, 3});
    auto id = maxpool2d(r, 1, 1);
    for (int64_t i = 0; i < r.numel(); ++i) CHECK(id.cdata()[i] == r.cdata()[i]);
}

TEST_CASE("pool gradients") {
    Rng rng(9);
    auto x = random_tensor<double>(rng, {1, 2, 4, 4});
    CHECK(finite_diff_check<double>(
              [](const auto& xs) { return avgpool2d(xs[0], 2, 2); }, {x}, 1e-5, 1e-6)
              .pass);
    CHECK(finite_diff_check<double>(
              [](const auto& xs) { return maxpool2d(xs[0], 2, 2); }, {x}, 1e-6, 1e-6)
              .pass);
    CHECK(finite_diff_check<double>(
              [](const auto& xs) { return global_avgpool(xs[0]); }, {x}, 1e-5, 1e-6)
              .pass);
}

TEST_CASE("layernorm fixed points") {
    auto gamma = Tensor<double>::full({4}, 1.0);
    auto beta = Tensor<double>::zeros({4});

    auto constant = Tensor<double>::full({1, 2, 4}, 3.3);
    auto y = layernorm(constant, gamma, beta, 1e-5);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::fabs(y.cdata()[i]) < 1e-9);

    auto pm = tensor_create<double>({1, 1, 2}, std::vector<double>{1.0, -1.0});
    auto g2 = Tensor<double>::full({2}, 1.0);
    auto b2 = Tensor<double>::zeros({2});
    auto y2 = layernorm(pm, g2, b2, 1e-12);
    CHECK(y2.cdata()[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(y2.cdata()[1] == doctest::Approx(-1.0).epsilon(1e-9));

    auto g0 = Tensor<double>::zeros({4});
    auto b5 = Tensor<double>::full({4}, 5.0);
    Rng rng(10);
    auto r = random_tensor<double>(rng, {2, 3, 4});
    auto y3 = layernorm(r, g0, b5, 1e-5);
    for (int64_t i = 0; i < y3.numel(); ++i) CHECK(y3.cdata()[i] == 5.0);

    CHECK_THROWS_AS(layernorm(r, g2, b2, 1e-5), ShapeError);
    CHECK_THROWS_AS(layernorm(r, g0, b5, 0.0), ContractError);
}

TEST_CASE("layernorm gradients") {
    Rng rng(11);
    auto x = random_tensor<double>(rng, {2, 3, 4});
    auto gamma = random_tensor<double>(rng, {4}, 0.5, 1.5);
    auto beta = random_tensor<double>(rng, {4});
    auto op = [](const auto& xs) {
        using U = typename std::decay_t<decltype(xs[0])>::value_type;
        return layernorm(xs[0], xs[1], xs[2], U(1e-5));
    };
    CHECK(finite_diff_check<double>(op, {x, gamma, beta}, 1e-6, 1e-6).pass);
}

TEST_CASE("softmax properties") {
    auto z = Tensor<double>::zeros({2});
    auto y = softmax(z, 0);
    CHECK(y.cdata()[0] == 0.5);
    CHECK(y.cdata()[1] == 0.5);

    // Shift by an exactly-representable constant: bitwise invariance.
    auto x = tensor_create<double>({4}, std::vector<double>{0.25, -0.5, 1.75, 0.0});
    auto shifted = add(x, 2.0);
    auto a = softmax(x, 0);
    auto b = softmax(shifted, 0);
    for (int64_t i = 0; i < 4; ++i) CHECK(a.cdata()[i] == b.cdata()[i]);

    // Direct-formula oracle.
    auto l = tensor_create<double>({3}, std::vector<double>{1, 2, 3});
    auto s = softmax(l, 0);
    double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int64_t i = 0; i < 3; ++i) {
        CHECK(std::fabs(s.cdata()[i] - std::exp(double(i + 1)) / denom) < 1e-9);
    }

    // Rows sum to one within 1e-6 on random input, any axis.
    Rng rng(12);
    auto r = random_tensor<double>(rng, {2, 3, 5}, -4.0, 4.0);
    for (int axis = 0; axis < 3; ++axis) {
        auto sm = softmax(r, axis);
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= sm.size(i);
        for (int i = axis + 1; i < 3; ++i) inner *= sm.size(i);
        const int64_t lanes = sm.size(axis);
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                double total = 0.0;
                for (int64_t lane = 0; lane < lanes; ++lane) {
                    const double v = sm.cdata()[o * lanes * inner + lane * inner + in];
                    CHECK(v >= 0.0);
                    total += v;
                }
                CHECK(std::fabs(total - 1.0) < 1e-6);
            }
        }
    }
    CHECK_THROWS_AS(softmax(r, 3), ShapeError);
}

TEST_CASE("softmax gradients") {
    Rng rng(13);
    auto x = random_tensor<double>(rng, {2, 5}, -2.0, 2.0);
    CHECK(finite_diff_check<double>([](const auto& xs) { return softmax(xs[0], 1); },
                                    {x}, 1e-6, 1e-6)
              .pass);
}

TEST_CASE("linear basics") {
    auto eye = Tensor<double>::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0;
    Rng rng(14);
    auto x = random_tensor<double>(rng, {2, 3});
    auto same = linear(x, eye, Tensor<double>::zeros({3}));
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(same.cdata()[i] == x.cdata()[i]);

    auto ones = tensor_create<double>({2, 1}, std::vector<double>{1, 1});
    auto v = tensor_create<double>({1, 2}, std::vector<double>{1, 1});
    auto bias = tensor_create<double>({1}, std::vector<double>{0.5});
    CHECK(linear(v, ones, bias).item() == 2.5);

    // Matmul oracle on a trailing-axis map over a 3-axis input.
    auto t = random_tensor<double>(rng, {2, 4, 3});
    auto w = random_tensor<double>(rng, {3, 5});
    auto viaop = linear(t, w);
    auto viamm = matmul(reshape(t, {8, 3}), w);
    for (int64_t i = 0; i < viaop.numel(); ++i) {
        CHECK(std::fabs(viaop.cdata()[i] - viamm.cdata()[i]) < 1e-6);
    }
    CHECK_THROWS_AS(linear(t, Tensor<double>::zeros({4, 5})), ShapeError);
}

TEST_CASE("linear gradients") {
    Rng rng(15);
    auto x = random_tensor<double>(rng, {2, 3, 4});
    auto w = random_tensor<double>(rng, {4, 5});
    auto b = random_tensor<double>(rng, {5});
    auto op = [](const auto& xs) { return linear(xs[0], xs[1], xs[2]); };
    CHECK(finite_diff_check<double>(op, {x, w, b}, 1e-5, 1e-6).pass);
}

TEST_CASE("activation values") {
    CHECK(relu(Tensor<double>::scalar(-1.0)).item() == 0.0);
    CHECK(relu(Tensor<double>::scalar(2.0)).item() == 2.0);
    CHECK(sigmoid(Tensor<double>::scalar(0.0)).item() == 0.5);
    CHECK(gelu(Tensor<double>::scalar(0.0)).item() == 0.0);
    CHECK(gelu(Tensor<double>::scalar(3.0)).item() == doctest::Approx(2.9964).epsilon(1e-3));
    CHECK(sigmoid(Tensor<double>::scalar(-30.0)).item() > 0.0);
}

TEST_CASE("activation gradients") {
    Rng rng(16);
    auto x = random_tensor<double>(rng, {3, 4}, 0.1, 2.0);
    auto xn = random_tensor<double>(rng, {3, 4}, -2.0, -0.1);
    CHECK(finite_diff_check<double>([](const auto& xs) { return relu(xs[0]); }, {x},
                                    1e-6, 1e-6)
              .pass);
    CHECK(finite_diff_check<double>([](const auto& xs) { return relu(xs[0]); }, {xn},
                                    1e-6, 1e-6)
              .pass);
    auto mix = random_tensor<double>(rng, {3, 4}, -3.0, 3.0);
    CHECK(finite_diff_check<double>([](const auto& xs) { return sigmoid(xs[0]); }, {mix},
                                    1e-6, 1e-6)
              .pass);
    CHECK(finite_diff_check<double>([](const auto& xs) { return gelu(xs[0]); }, {mix},
                                    1e-6, 1e-6)
              .pass);
}

TEST_CASE("channel shuffle permutation") {
    auto x = Tensor<double>::zeros({1, 4, 1, 1});
    for (int c = 0; c < 4; ++c) x.data()[c] = double(c);
    auto y = channel_shuffle(x, 2);
    CHECK(y.cdata()[0] == 0.0);
    CHECK(y.cdata()[1] == 2.0);
    CHECK(y.cdata()[2] == 1.0);
    CHECK(y.cdata()[3] == 3.0);

    Rng rng(17);
    auto r = random_tensor<double>(rng, {2, 4, 3, 3});
    auto same = channel_shuffle(r, 1);
    for (int64_t i = 0; i < r.numel(); ++i) CHECK(same.cdata()[i] == r.cdata()[i]);

    auto twice = channel_shuffle(channel_shuffle(r, 2), 2);
    for (int64_t i = 0; i < r.numel(); ++i) CHECK(twice.cdata()[i] == r.cdata()[i]);

    CHECK_THROWS_AS(channel_shuffle(r, 3), ShapeError);

    CHECK(finite_diff_check<double>(
              [](const auto& xs) { return channel_shuffle(xs[0], 2); }, {r}, 1e-5, 1e-6)
              .pass);
}

TEST_CASE("channel split and concat") {
    Rng rng(18);
    auto x = random_tensor<double>(rng, {2, 4, 3, 3});
    auto [a, b] = channel_split(x);
    CHECK(a.shape() == std::vector<int64_t>{2, 2, 3, 3});
    CHECK(b.shape() == std::vector<int64_t>{2, 2, 3, 3});
    auto back = channel_concat(a, b);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.cdata()[i] == x.cdata()[i]);

    auto odd = random_tensor<double>(rng, {1, 3, 2, 2});
    CHECK_THROWS_AS(channel_split(odd), ShapeError);

    auto tall = random_tensor<double>(rng, {2, 2, 4, 3});
    CHECK_THROWS_AS(channel_concat(a, tall), ShapeError);
}

TEST_CASE("channel attention values and gate bound") {
    const int64_t C = 8;
    SEParams<double> se;
    se.reduce.weight = Tensor<double>::zeros({4, C, 1, 1});
    se.reduce.bias = Tensor<double>::zeros({4});
    se.expand.weight = Tensor<double>::zeros({C, 4, 1, 1});
    se.expand.bias = Tensor<double>::zeros({C});

    Rng rng(19);
    auto x = random_tensor<double>(rng, {1, C, 3, 3});
    auto y = channel_attention(x, se);  // zero weights: gate = sigmoid(0) = 0.5
    for (int64_t i = 0; i < x.numel(); ++i) {
        CHECK(y.cdata()[i] == doctest::Approx(0.5 * x.cdata()[i]).epsilon(1e-14));
    }

    auto zeros = Tensor<double>::zeros({1, C, 3, 3});
    fill_uniform(se.reduce.weight, rng, -0.5, 0.5);
    fill_uniform(se.expand.weight, rng, -0.5, 0.5);
    auto yz = channel_attention(zeros, se);
    for (int64_t i = 0; i < yz.numel(); ++i) CHECK(yz.cdata()[i] == 0.0);

    // Independent direct-formula oracle with plain loops.
    auto r = random_tensor<double>(rng, {1, C, 3, 3});
    auto out = channel_attention(r, se);
    for (int64_t c = 0; c < C; ++c) {
        double pool = 0.0;
        for (int i = 0; i < 9; ++i) pool += r.cdata()[c * 9 + i];
        (void)pool;
    }
    std::vector<double> pooled(size_t(C), 0.0);
    for (int64_t c = 0; c < C; ++c) {
        for (int i = 0; i < 9; ++i) pooled[size_t(c)] += r.cdata()[c * 9 + i];
        pooled[size_t(c)] /= 9.0;
    }
    std::vector<double> hidden(4, 0.0);
    for (int h = 0; h < 4; ++h) {
        for (int64_t c = 0; c < C; ++c) {
            hidden[size_t(h)] += se.reduce.weight.cdata()[h * C + c] * pooled[size_t(c)];
        }
        hidden[size_t(h)] = std::max(hidden[size_t(h)], 0.0);
    }
    for (int64_t c = 0; c < C; ++c) {
        double e = 0.0;
        for (int h = 0; h < 4; ++h) e += se.expand.weight.cdata()[c * 4 + h] * hidden[size_t(h)];
        const double gate = 1.0 / (1.0 + std::exp(-e));
        CHECK(gate > 0.0);
        CHECK(gate < 1.0);
        for (int i = 0; i < 9; ++i) {
            const double expect = r.cdata()[c * 9 + i] * gate;
            CHECK(std::fabs(out.cdata()[c * 9 + i] - expect) < 1e-6);
            CHECK(std::fabs(out.cdata()[c * 9 + i]) <= std::fabs(r.cdata()[c * 9 + i]));
        }
    }
}

TEST_CASE("channel attention gradients") {
    const int64_t C = 8;
    Rng rng(20);
    auto x = random_tensor<double>(rng, {1, C, 3, 3});
    auto wr = random_tensor<double>(rng, {4, C, 1, 1}, -0.5, 0.5);
    auto br = random_tensor<double>(rng, {4}, -0.1, 0.1);
    auto we = random_tensor<double>(rng, {C, 4, 1, 1}, -0.5, 0.5);
    auto be = random_tensor<double>(rng, {C}, -0.1, 0.1);
    auto op = [](const auto& xs) {
        using U = typename std::decay_t<decltype(xs[0])>::value_type;
        SEParams<U> se;
        se.reduce.weight = xs[1];
        se.reduce.bias = xs[2];
        se.expand.weight = xs[3];
        se.expand.bias = xs[4];
        return channel_attention(xs[0], se);
    };
    CHECK(finite_diff_check<double>(op, {x, wr, br, we, be}, 1e-5, 1e-6).pass);
}

TEST_CASE("upsample_nn block replication and pooling inverse") {
    auto x = tensor_create<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    auto y = upsample_nn(x, 2);
    CHECK(y.shape() == std::vector<int64_t>{1, 1, 4, 4});
    const double expect[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    for (int i = 0; i < 16; ++i) CHECK(y.cdata()[i] == expect[i]);

    Rng rng(21);
    auto r = random_tensor<double>(rng, {2, 3, 4, 4});
    auto same = upsample_nn(r, 1);
    for (int64_t i = 0; i < r.numel(); ++i) CHECK(same.cdata()[i] == r.cdata()[i]);

    auto round = avgpool2d(upsample_nn(r, 2), 2, 2);
    for (int64_t i = 0; i < r.numel(); ++i) {
        CHECK(round.cdata()[i] == doctest::Approx(r.cdata()[i]).epsilon(1e-12));
    }

    CHECK(finite_diff_check<double>(
              [](const auto& xs) { return upsample_nn(xs[0], 2); }, {x}, 1e-5, 1e-6)
              .pass);
}

TEST_CASE("token layout round trip") {
    Rng rng(22);
    auto x = random_tensor<double>(rng, {2, 3, 4, 5});
    auto tokens = nchw_to_tokens(x);
    CHECK(tokens.shape() == std::vector<int64_t>{2, 20, 3});
    auto back = tokens_to_nchw(tokens, 4, 5);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.cdata()[i] == x.cdata()[i]);
    CHECK_THROWS_AS(tokens_to_nchw(tokens, 3, 5), ShapeError);

    CHECK(finite_diff_check<double>(
              [](const auto& xs) { return nchw_to_tokens(xs[0]); }, {x}, 1e-5, 1e-6)
              .pass);
    CHECK(finite_diff_check<double>(
              [](const auto& xs) { return tokens_to_nchw(xs[0], 4, 5); }, {tokens}, 1e-5, 1e-6)
              .pass);
}

TEST_CASE("scale_per_channel and crop2d") {
    Rng rng(23);
    auto x = random_tensor<double>(rng, {2, 3, 4, 4});
    auto s = random_tensor<double>(rng, {2, 3, 1, 1}, 0.1, 0.9);
    auto y = scale_per_channel(x, s);
    for (int64_t n = 0; n < 2; ++n) {
        for (int64_t c = 0; c < 3; ++c) {
            for (int64_t i = 0; i < 16; ++i) {
                const int64_t at = (n * 3 + c) * 16 + i;
                CHECK(y.cdata()[at] == x.cdata()[at] * s.cdata()[n * 3 + c]);
            }
        }
    }
    CHECK(finite_diff_check<double>(
              [](const auto& xs) { return scale_per_channel(xs[0], xs[1]); }, {x, s},
              1e-5, 1e-6)
              .pass);

    auto crop = crop2d(x, 2, 3);
    CHECK(crop.shape() == std::vector<int64_t>{2, 3, 2, 3});
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t h = 0; h < 2; ++h)
                for (int64_t w = 0; w < 3; ++w) {
                    CHECK(crop.cdata()[((n * 3 + c) * 2 + h) * 3 + w] ==
                          x.cdata()[((n * 3 + c) * 4 + h) * 4 + w]);
                }
    CHECK_THROWS_AS(crop2d(x, 5, 2), ShapeError);
    CHECK(finite_diff_check<double>(
              [](const auto& xs) { return crop2d(xs[0], 2, 3); }, {x}, 1e-5, 1e-6)
              .pass);
}

TEST_CASE("reflect index folding") {
    using detail::reflect_index;
    CHECK(reflect_index(-1, 4) == 1);
    CHECK(reflect_index(-2, 4) == 2);
    CHECK(reflect_index(4, 4) == 2);
    CHECK(reflect_index(5, 4) == 1);
    CHECK(reflect_index(0, 1) == 0);
    CHECK(reflect_index(-3, 1) == 0);
    CHECK(reflect_index(-5, 2) == 1);
}
