#pragma once

// Synthetic snow degradation. Composites a soft particle mask (Gaussian
// discs for flakes, blurred segments for streaks) with a near-white color
// map over the clean image, then applies a smooth transmission field and a
// gray atmospheric term: I = K*T + A*(1-T), K = J*(1-Z) + C*Z.

#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

namespace mspf {

struct SnowParams {
    double mask_density = 400.0;  // particles per megapixel
    double flake_radius_lo = 1.0, flake_radius_hi = 4.0;    // pixels
    double streak_len_lo = 8.0, streak_len_hi = 24.0;       // pixels
    double streak_angle_lo = -30.0, streak_angle_hi = 30.0; // degrees off vertical
    double chroma_lo = 0.8, chroma_hi = 1.0;                // per-channel snow color
    double t_lo = 0.5, t_hi = 0.95;                         // transmission range
    double a_lo = 0.6, a_hi = 0.95;                         // atmospheric gray range
    double streak_fraction = 0.3;  // share of particles rendered as streaks
    uint64_t seed = 0;

    void validate() const {
        if (mask_density < 0) throw ConfigError("snow: mask density must be >= 0");
        if (!(flake_radius_lo > 0) || flake_radius_hi < flake_radius_lo)
            throw ConfigError("snow: flake radius range must be ordered and positive");
        if (!(streak_len_lo > 0) || streak_len_hi < streak_len_lo)
            throw ConfigError("snow: streak length range must be ordered and positive");
        if (streak_angle_hi < streak_angle_lo)
            throw ConfigError("snow: streak angle range must be ordered");
        if (chroma_lo < 0 || chroma_hi > 1 || chroma_hi < chroma_lo)
            throw ConfigError("snow: chroma range must be ordered within [0,1]");
        if (!(t_lo > 0) || t_hi > 1 || t_hi < t_lo)
            throw ConfigError("snow: transmission range must be ordered within (0,1]");
        if (a_lo < 0 || a_hi > 1 || a_hi < a_lo)
            throw ConfigError("snow: atmospheric range must be ordered within [0,1]");
        if (streak_fraction < 0 || streak_fraction > 1)
            throw ConfigError("snow: streak fraction must lie in [0,1]");
    }
};

namespace detail {

// Separable Gaussian blur, sigma 1, radius 3, zero boundary.
inline void blur_sigma1(std::vector<double>& img, int64_t H, int64_t W) {
    constexpr int R = 3;
    double k[2 * R + 1];
    double sum = 0;
    for (int i = -R; i <= R; ++i) {
        k[i + R] = std::exp(-0.5 * double(i) * double(i));
        sum += k[i + R];
    }
    for (double& v : k) v /= sum;
    std::vector<double> tmp(img.size(), 0.0);
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double acc = 0;
            for (int i = -R; i <= R; ++i) {
                const int64_t xx = x + i;
                if (xx >= 0 && xx < W) acc += k[i + R] * img[size_t(y * W + xx)];
            }
            tmp[size_t(y * W + x)] = acc;
        }
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double acc = 0;
            for (int i = -R; i <= R; ++i) {
                const int64_t yy = y + i;
                if (yy >= 0 && yy < H) acc += k[i + R] * tmp[size_t(yy * W + x)];
            }
            img[size_t(y * W + x)] = acc;
        }
}

inline void render_mask(Rng& rng, int64_t H, int64_t W, const SnowParams& p,
                        std::vector<double>& mask) {
    mask.assign(size_t(H * W), 0.0);
    const int64_t total = int64_t(std::llround(p.mask_density * double(H * W) / 1e6));
    if (total <= 0) return;
    const int64_t n_streak = int64_t(std::llround(double(total) * p.streak_fraction));
    const int64_t n_flake = total - n_streak;

    for (int64_t f = 0; f < n_flake; ++f) {
        const double cx = rng.uniform(0.0, double(W));
        const double cy = rng.uniform(0.0, double(H));
        const double r = rng.uniform(p.flake_radius_lo, p.flake_radius_hi);
        const double alpha = rng.uniform(0.55, 1.0);
        const double sigma = r * 0.5;
        const double reach = 3.0 * sigma;
        const int64_t y0 = std::max<int64_t>(0, int64_t(std::floor(cy - reach)));
        const int64_t y1 = std::min<int64_t>(H - 1, int64_t(std::ceil(cy + reach)));
        const int64_t x0 = std::max<int64_t>(0, int64_t(std::floor(cx - reach)));
        const int64_t x1 = std::min<int64_t>(W - 1, int64_t(std::ceil(cx + reach)));
        for (int64_t y = y0; y <= y1; ++y)
            for (int64_t x = x0; x <= x1; ++x) {
                const double dx = double(x) + 0.5 - cx;
                const double dy = double(y) + 0.5 - cy;
                const double v = alpha * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                double& m = mask[size_t(y * W + x)];
                m = std::max(m, v);
            }
    }

    if (n_streak > 0) {
        std::vector<double> layer(size_t(H * W), 0.0);
        constexpr double kPi = 3.14159265358979323846;
        for (int64_t s = 0; s < n_streak; ++s) {
            const double cx = rng.uniform(0.0, double(W));
            const double cy = rng.uniform(0.0, double(H));
            const double len = rng.uniform(p.streak_len_lo, p.streak_len_hi);
            const double ang = rng.uniform(p.streak_angle_lo, p.streak_angle_hi) * kPi / 180.0;
            const double alpha = rng.uniform(0.55, 1.0);
            const double dx = std::sin(ang) * len * 0.5;
            const double dy = std::cos(ang) * len * 0.5;
            const double ax = cx - dx, ay = cy - dy, bx = cx + dx, by = cy + dy;
            const double margin = 2.0;
            const int64_t y0 = std::max<int64_t>(0, int64_t(std::floor(std::min(ay, by) - margin)));
            const int64_t y1 = std::min<int64_t>(H - 1, int64_t(std::ceil(std::max(ay, by) + margin)));
            const int64_t x0 = std::max<int64_t>(0, int64_t(std::floor(std::min(ax, bx) - margin)));
            const int64_t x1 = std::min<int64_t>(W - 1, int64_t(std::ceil(std::max(ax, bx) + margin)));
            const double vx = bx - ax, vy = by - ay;
            const double vv = vx * vx + vy * vy;
            for (int64_t y = y0; y <= y1; ++y)
                for (int64_t x = x0; x <= x1; ++x) {
                    const double px = double(x) + 0.5 - ax;
                    const double py = double(y) + 0.5 - ay;
                    const double t = vv > 0 ? std::clamp((px * vx + py * vy) / vv, 0.0, 1.0) : 0.0;
                    const double ex = px - t * vx, ey = py - t * vy;
                    const double d = std::sqrt(ex * ex + ey * ey);
                    const double v = alpha * std::max(0.0, 1.0 - d);
                    double& m = layer[size_t(y * W + x)];
                    m = std::max(m, v);
                }
        }
        blur_sigma1(layer, H, W);
        for (size_t i = 0; i < mask.size(); ++i) mask[i] = std::max(mask[i], layer[i]);
    }
    for (double& v : mask) v = std::clamp(v, 0.0, 1.0);
}

inline void render_transmission(Rng& rng, int64_t H, int64_t W, const SnowParams& p,
                                std::vector<double>& field) {
    double grid[16];
    for (double& g : grid) g = rng.uniform(p.t_lo, p.t_hi);
    field.assign(size_t(H * W), 0.0);
    for (int64_t y = 0; y < H; ++y) {
        const double gy = std::clamp((double(y) + 0.5) * 4.0 / double(H) - 0.5, 0.0, 3.0);
        const int64_t iy = std::min<int64_t>(2, int64_t(gy));
        const double fy = gy - double(iy);
        for (int64_t x = 0; x < W; ++x) {
            const double gx = std::clamp((double(x) + 0.5) * 4.0 / double(W) - 0.5, 0.0, 3.0);
            const int64_t ix = std::min<int64_t>(2, int64_t(gx));
            const double fx = gx - double(ix);
            const double v00 = grid[iy * 4 + ix], v01 = grid[iy * 4 + ix + 1];
            const double v10 = grid[(iy + 1) * 4 + ix], v11 = grid[(iy + 1) * 4 + ix + 1];
            const double top = v00 + fx * (v01 - v00);
            const double bot = v10 + fx * (v11 - v10);
            field[size_t(y * W + x)] = top + fy * (bot - top);
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> gen_snow_mask(Rng& rng, int64_t H, int64_t W, const SnowParams& p) {
    if (H <= 0 || W <= 0) throw ShapeError("gen_snow_mask: extents must be positive");
    p.validate();
    std::vector<double> mask;
    detail::render_mask(rng, H, W, p, mask);
    Tensor<T> out = Tensor<T>::zeros({1, 1, H, W});
    for (int64_t i = 0; i < H * W; ++i) out.data()[i] = T(mask[size_t(i)]);
    return out;
}

template <typename T>
Tensor<T> gen_transmission(Rng& rng, int64_t H, int64_t W, const SnowParams& p) {
    if (H <= 0 || W <= 0) throw ShapeError("gen_transmission: extents must be positive");
    p.validate();
    std::vector<double> field;
    detail::render_transmission(rng, H, W, p, field);
    Tensor<T> out = Tensor<T>::zeros({1, 1, H, W});
    for (int64_t i = 0; i < H * W; ++i) out.data()[i] = T(field[size_t(i)]);
    return out;
}

inline double gen_atmospheric(Rng& rng, const SnowParams& p) {
    p.validate();
    return rng.uniform(p.a_lo, p.a_hi);
}

template <typename T>
struct SnowSample {
    Tensor<T> snowy;      // I, clamped to [0,1]
    Tensor<T> pre;        // I before the final clamp
    Tensor<T> composite;  // K = J*(1-Z) + C*Z
    Tensor<T> mask;       // Z, [N,1,H,W]
    Tensor<T> trans;      // T, [N,1,H,W]
    Tensor<T> atmos;      // A, [N,1,1,1]
    Tensor<T> chroma;     // C, [N,3,1,1]
};

// Deterministic compositing core: given the clean image and every sampled
// component, evaluates K = J*(1-Z) + C*Z and I = K*T + A*(1-T) per pixel.
// All arithmetic runs in double and is cast to T once per output element.
template <typename T>
SnowSample<T> compose_snow(const Tensor<T>& J, const Tensor<T>& Z, const Tensor<T>& Tmap,
                           const Tensor<T>& A, const Tensor<T>& C) {
    if (J.ndim() != 4 || J.size(1) != 3)
        throw ShapeError("compose_snow: expected an N x 3 x H x W clean image");
    const int64_t N = J.size(0), H = J.size(2), W = J.size(3);
    if (Z.shape() != std::vector<int64_t>{N, 1, H, W})
        throw ShapeError("compose_snow: mask must be N x 1 x H x W");
    if (Tmap.shape() != std::vector<int64_t>{N, 1, H, W})
        throw ShapeError("compose_snow: transmission must be N x 1 x H x W");
    if (A.shape() != std::vector<int64_t>{N, 1, 1, 1})
        throw ShapeError("compose_snow: atmospheric term must be N x 1 x 1 x 1");
    if (C.shape() != std::vector<int64_t>{N, 3, 1, 1})
        throw ShapeError("compose_snow: snow color must be N x 3 x 1 x 1");
    for (int64_t i = 0; i < J.numel(); ++i) {
        const double v = double(J.cdata()[i]);
        if (!(v >= 0.0 && v <= 1.0))
            throw DomainError("compose_snow: clean image values must lie in [0,1]");
    }
    for (int64_t i = 0; i < Z.numel(); ++i) {
        const double z = double(Z.cdata()[i]);
        const double t = double(Tmap.cdata()[i]);
        if (!(z >= 0.0 && z <= 1.0)) throw DomainError("compose_snow: mask values must lie in [0,1]");
        if (!(t >= 0.0 && t <= 1.0))
            throw DomainError("compose_snow: transmission values must lie in [0,1]");
    }

    SnowSample<T> s;
    s.snowy = Tensor<T>::zeros(J.shape());
    s.pre = Tensor<T>::zeros(J.shape());
    s.composite = Tensor<T>::zeros(J.shape());
    s.mask = Z;
    s.trans = Tmap;
    s.atmos = A;
    s.chroma = C;
    for (int64_t n = 0; n < N; ++n) {
        const double a = double(A.cdata()[n]);
        for (int64_t c = 0; c < 3; ++c) {
            const double cc = double(C.cdata()[n * 3 + c]);
            const int64_t base = (n * 3 + c) * H * W;
            const int64_t mbase = n * H * W;
            for (int64_t i = 0; i < H * W; ++i) {
                const double j = double(J.cdata()[base + i]);
                const double z = double(Z.cdata()[mbase + i]);
                const double t = double(Tmap.cdata()[mbase + i]);
                const double k = j * (1.0 - z) + cc * z;
                const double pre = k * t + a * (1.0 - t);
                s.composite.data()[base + i] = T(k);
                s.pre.data()[base + i] = T(pre);
                s.snowy.data()[base + i] = T(std::clamp(pre, 0.0, 1.0));
            }
        }
    }
    return s;
}

template <typename T>
SnowSample<T> synthesize_snow(const Tensor<T>& J, const SnowParams& p, Rng& rng) {
    p.validate();
    if (J.ndim() != 4 || J.size(1) != 3)
        throw ShapeError("synthesize_snow: expected an N x 3 x H x W clean image");
    const int64_t N = J.size(0), H = J.size(2), W = J.size(3);

    Tensor<T> Z = Tensor<T>::zeros({N, 1, H, W});
    Tensor<T> Tm = Tensor<T>::zeros({N, 1, H, W});
    Tensor<T> A = Tensor<T>::zeros({N, 1, 1, 1});
    Tensor<T> C = Tensor<T>::zeros({N, 3, 1, 1});
    std::vector<double> mask, field;
    for (int64_t n = 0; n < N; ++n) {
        detail::render_mask(rng, H, W, p, mask);
        detail::render_transmission(rng, H, W, p, field);
        A.data()[n] = T(rng.uniform(p.a_lo, p.a_hi));
        for (int64_t c = 0; c < 3; ++c) C.data()[n * 3 + c] = T(rng.uniform(p.chroma_lo, p.chroma_hi));
        for (int64_t i = 0; i < H * W; ++i) {
            Z.data()[n * H * W + i] = T(mask[size_t(i)]);
            Tm.data()[n * H * W + i] = T(field[size_t(i)]);
        }
    }
    return compose_snow(J, Z, Tm, A, C);
}

// Shared geometric augmentation: square crop, optional horizontal flip, and
// a quarter-turn rotation, applied identically to both images of a pair.
struct AugmentOps {
    int64_t row = 0, col = 0;
    bool flip = false;
    int rot = 0;  // counterclockwise quarter turns, 0..3
};

inline AugmentOps sample_augment(Rng& rng, int64_t H, int64_t W, int64_t crop) {
    AugmentOps ops;
    ops.row = rng.uniform_int(0, H - crop);
    ops.col = rng.uniform_int(0, W - crop);
    ops.flip = rng.uniform01() < 0.5;
    ops.rot = int(rng.uniform_int(0, 3));
    return ops;
}

template <typename T>
Tensor<T> apply_augment(const Tensor<T>& x, const AugmentOps& ops, int64_t crop) {
    if (x.ndim() != 4) throw ShapeError("apply_augment: expected NCHW input");
    const int64_t H = x.size(2), W = x.size(3);
    if (crop < 1 || crop > H || crop > W)
        throw DomainError("apply_augment: crop must satisfy 1 <= crop <= min(H, W)");
    if (ops.row < 0 || ops.col < 0 || ops.row + crop > H || ops.col + crop > W)
        throw DomainError("apply_augment: crop window out of bounds");
    if (ops.rot < 0 || ops.rot > 3) throw DomainError("apply_augment: rotation must be 0..3");
    const int64_t N = x.size(0), C = x.size(1);
    const int64_t c = crop;
    std::vector<T> buf(static_cast<size_t>(c * c)), tmp(static_cast<size_t>(c * c));
    Tensor<T> out = Tensor<T>::zeros({N, C, c, c});
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* src = x.cdata() + nc * H * W;
        for (int64_t i = 0; i < c; ++i)
            for (int64_t j = 0; j < c; ++j) {
                const int64_t sj = ops.flip ? (ops.col + c - 1 - j) : (ops.col + j);
                buf[size_t(i * c + j)] = src[(ops.row + i) * W + sj];
            }
        for (int r = 0; r < ops.rot; ++r) {
            for (int64_t i = 0; i < c; ++i)
                for (int64_t j = 0; j < c; ++j) tmp[size_t(i * c + j)] = buf[size_t(j * c + (c - 1 - i))];
            std::swap(buf, tmp);
        }
        T* dst = out.data() + nc * c * c;
        for (int64_t i = 0; i < c * c; ++i) dst[i] = buf[size_t(i)];
    }
    return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> augment(const Tensor<T>& a, const Tensor<T>& b, Rng& rng,
                                        int64_t crop) {
    if (a.shape() != b.shape()) throw ShapeError("augment: paired images must share a shape");
    if (a.ndim() != 4) throw ShapeError("augment: expected NCHW inputs");
    if (crop < 1 || crop > a.size(2) || crop > a.size(3))
        throw DomainError("augment: crop must satisfy 1 <= crop <= min(H, W)");
    const AugmentOps ops = sample_augment(rng, a.size(2), a.size(3), crop);
    return {apply_augment(a, ops, crop), apply_augment(b, ops, crop)};
}

}  // namespace mspf
