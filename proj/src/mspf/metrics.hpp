#pragma once

// Full-reference image quality metrics on [0,1] data. Both metrics
// accumulate in double regardless of the tensor element type.

#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace mspf {

// 10*log10(1 / MSE); capped at 100 dB once MSE drops below 1e-10.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("psnr: images must share a shape");
    if (a.numel() == 0) throw ShapeError("psnr: empty image");
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = double(a.cdata()[i]) - double(b.cdata()[i]);
        acc += d * d;
    }
    const double mse = acc / double(a.numel());
    if (mse < 1e-10) return 100.0;
    return 10.0 * std::log10(1.0 / mse);
}

namespace detail {

inline const std::vector<double>& ssim_window() {
    static const std::vector<double> w = [] {
        constexpr int K = 11;
        constexpr double sigma = 1.5;
        std::vector<double> g(K * K);
        double sum = 0.0;
        for (int y = 0; y < K; ++y)
            for (int x = 0; x < K; ++x) {
                const double dy = y - 5.0, dx = x - 5.0;
                g[size_t(y * K + x)] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                sum += g[size_t(y * K + x)];
            }
        for (double& v : g) v /= sum;
        return g;
    }();
    return w;
}

}  // namespace detail

// Mean structural similarity with an 11x11 sigma-1.5 Gaussian window,
// K1 = 0.01, K2 = 0.03, dynamic range 1. Windows are evaluated at valid
// positions only and the map is averaged per channel, then over channels
// and batch entries.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("ssim: images must share a shape");
    if (a.ndim() != 4) throw ShapeError("ssim: expected NCHW images");
    const int64_t N = a.size(0), C = a.size(1), H = a.size(2), W = a.size(3);
    constexpr int K = 11;
    if (H < K || W < K) throw ShapeError("ssim: image extents must be at least 11");
    constexpr double C1 = 0.01 * 0.01;
    constexpr double C2 = 0.03 * 0.03;
    const std::vector<double>& win = detail::ssim_window();

    double total = 0.0;
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* pa = a.cdata() + nc * H * W;
        const T* pb = b.cdata() + nc * H * W;
        double chan = 0.0;
        int64_t count = 0;
        for (int64_t y = 0; y + K <= H; ++y)
            for (int64_t x = 0; x + K <= W; ++x) {
                double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
                for (int wy = 0; wy < K; ++wy)
                    for (int wx = 0; wx < K; ++wx) {
                        const double wgt = win[size_t(wy * K + wx)];
                        const double va = double(pa[(y + wy) * W + (x + wx)]);
                        const double vb = double(pb[(y + wy) * W + (x + wx)]);
                        mx += wgt * va;
                        my += wgt * vb;
                        mxx += wgt * va * va;
                        myy += wgt * vb * vb;
                        mxy += wgt * va * vb;
                    }
                const double vx = mxx - mx * mx;
                const double vy = myy - my * my;
                const double cov = mxy - mx * my;
                const double num = (2 * mx * my + C1) * (2 * cov + C2);
                const double den = (mx * mx + my * my + C1) * (vx + vy + C2);
                chan += num / den;
                ++count;
            }
        total += chan / double(count);
    }
    return total / double(N * C);
}

}  // namespace mspf
