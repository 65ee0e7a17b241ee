#pragma once

// Binary PPM (P6, maxval 255) image I/O. Images map to [1,3,H,W] tensors
// with values in [0,1]. Header failures report the byte offset at which
// parsing stopped.

#include "tensor.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

namespace mspf {

namespace detail {

class PpmReader {
  public:
    explicit PpmReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open image file: " + path);
    }

    int64_t offset() const { return pos_; }

    int get() {
        const int c = in_.get();
        if (c != EOF) ++pos_;
        return c;
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw FormatError(path_ + ": " + what, pos_);
    }

    // Skips whitespace and '#' comment lines between header tokens.
    void skip_separators() {
        for (;;) {
            int c = in_.peek();
            if (c == '#') {
                while (c != EOF && c != '\n') c = get();
                continue;
            }
            if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                get();
                continue;
            }
            return;
        }
    }

    int64_t read_number(const char* name) {
        skip_separators();
        int c = in_.peek();
        if (c < '0' || c > '9') fail(std::string("expected ") + name);
        int64_t v = 0;
        while (c >= '0' && c <= '9') {
            get();
            v = v * 10 + (c - '0');
            if (v > (int64_t(1) << 31)) fail(std::string(name) + " out of range");
            c = in_.peek();
        }
        return v;
    }

    void read_payload(unsigned char* dst, size_t n) {
        in_.read(reinterpret_cast<char*>(dst), std::streamsize(n));
        if (size_t(in_.gcount()) != n) {
            pos_ += in_.gcount();
            fail("truncated pixel payload");
        }
        pos_ += int64_t(n);
    }

  private:
    std::string path_;
    std::ifstream in_;
    int64_t pos_ = 0;
};

}  // namespace detail

template <typename T>
Tensor<T> image_read(const std::string& path) {
    detail::PpmReader r(path);
    if (r.get() != 'P' || r.get() != '6') r.fail("not a P6 ppm file");
    const int64_t w = r.read_number("width");
    const int64_t h = r.read_number("height");
    const int64_t maxval = r.read_number("maxval");
    if (w <= 0 || h <= 0) r.fail("image extents must be positive");
    if (maxval != 255) r.fail("unsupported maxval (only 255 is handled)");
    const int c = r.get();
    if (c != ' ' && c != '\t' && c != '\r' && c != '\n') r.fail("expected whitespace after maxval");

    std::vector<unsigned char> raw(static_cast<size_t>(w * h * 3));
    r.read_payload(raw.data(), raw.size());
    Tensor<T> out = Tensor<T>::zeros({1, 3, h, w});
    for (int64_t ch = 0; ch < 3; ++ch)
        for (int64_t i = 0; i < h * w; ++i)
            out.data()[ch * h * w + i] = T(double(raw[size_t(i * 3 + ch)]) / 255.0);
    return out;
}

template <typename T>
void image_write(const Tensor<T>& img, const std::string& path) {
    if (img.ndim() != 4 || img.size(0) != 1 || img.size(1) != 3)
        throw ShapeError("image_write: expected a 1 x 3 x H x W image");
    const int64_t h = img.size(2), w = img.size(3);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot create image file: " + path);
    char header[64];
    const int n = std::snprintf(header, sizeof(header), "P6\n%lld %lld\n255\n",
                                static_cast<long long>(w), static_cast<long long>(h));
    out.write(header, n);
    std::vector<unsigned char> raw(static_cast<size_t>(w * h * 3));
    for (int64_t ch = 0; ch < 3; ++ch)
        for (int64_t i = 0; i < h * w; ++i) {
            double v = double(img.cdata()[ch * h * w + i]);
            v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
            raw[size_t(i * 3 + ch)] = static_cast<unsigned char>(std::llround(v * 255.0));
        }
    out.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
    if (!out) throw IoError("failed writing image file: " + path);
}

}  // namespace mspf
