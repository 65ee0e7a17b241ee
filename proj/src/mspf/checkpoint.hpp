#pragma once

// Checkpoint container: "MSPF" magic, format version, then a flat list of
// named little-endian f32 tensors. Optimizer moments ride along as extra
// records suffixed .m/.v followed by a trailing u64 step counter, and the
// run configuration is embedded as a one-dimensional pseudo-tensor holding
// its bytes. Serialization is fully deterministic.

#include "optim.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace mspf {

inline constexpr char kCheckpointMagic[4] = {'M', 'S', 'P', 'F'};
inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr const char* kConfigTensorName = "__run_config__";

struct RawTensorRecord {
    std::string name;
    std::vector<uint32_t> extents;
    std::vector<float> data;
};

struct RawCheckpoint {
    std::vector<RawTensorRecord> tensors;
    bool has_step = false;
    uint64_t step = 0;

    const RawTensorRecord* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

namespace detail {

class ByteWriter {
  public:
    explicit ByteWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot create checkpoint: " + path);
    }
    void u8(uint8_t v) { out_.put(char(v)); }
    void u16(uint16_t v) {
        for (int i = 0; i < 2; ++i) u8(uint8_t(v >> (8 * i)));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(uint8_t(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(uint8_t(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
    void bytes(const void* p, size_t n) { out_.write(static_cast<const char*>(p), std::streamsize(n)); }
    void close() {
        out_.flush();
        if (!out_) throw IoError("failed writing checkpoint: " + path_);
    }

  private:
    std::string path_;
    std::ofstream out_;
};

class ByteReader {
  public:
    explicit ByteReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open checkpoint: " + path);
        in_.seekg(0, std::ios::end);
        size_ = size_t(in_.tellg());
        in_.seekg(0);
    }
    size_t offset() const { return pos_; }
    size_t remaining() const { return size_ - pos_; }
    [[noreturn]] void fail(const std::string& what) const {
        throw FormatError(path_ + ": " + what, pos_);
    }
    void bytes(void* p, size_t n) {
        if (remaining() < n) fail("truncated checkpoint");
        in_.read(static_cast<char*>(p), std::streamsize(n));
        pos_ += n;
    }
    uint8_t u8() {
        uint8_t v;
        bytes(&v, 1);
        return v;
    }
    uint16_t u16() {
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= uint16_t(u8()) << (8 * i);
        return v;
    }
    uint32_t u32() {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(u8()) << (8 * i);
        return v;
    }
    uint64_t u64() {
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(u8()) << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }

  private:
    std::string path_;
    std::ifstream in_;
    size_t size_ = 0;
    size_t pos_ = 0;
};

inline void write_record(ByteWriter& w, const std::string& name,
                         const std::vector<uint32_t>& extents, const float* data) {
    if (name.size() > 0xFFFF) throw ContractError("checkpoint: tensor name too long");
    if (extents.size() > 0xFF) throw ContractError("checkpoint: tensor rank too large");
    w.u16(uint16_t(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(uint8_t(extents.size()));
    uint64_t n = 1;
    for (uint32_t e : extents) {
        w.u32(e);
        n *= e;
    }
    for (uint64_t i = 0; i < n; ++i) w.f32(data[i]);
}

template <typename T>
std::vector<uint32_t> extents_of(const Tensor<T>& t) {
    std::vector<uint32_t> out;
    for (int64_t e : t.shape()) {
        if (e < 0 || e > int64_t(0xFFFFFFFFu)) throw ContractError("checkpoint: extent out of range");
        out.push_back(uint32_t(e));
    }
    return out;
}

template <typename T>
std::vector<float> to_f32(const Tensor<T>& t) {
    std::vector<float> out(static_cast<size_t>(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) out[size_t(i)] = float(t.cdata()[i]);
    return out;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model, const OptimState<T>* opt,
                     const std::string& config_text) {
    auto params = collect_params(model);
    if (opt && opt->m.size() != params.size())
        throw ContractError("save_checkpoint: optimizer state does not match the model");

    uint32_t count = uint32_t(params.size());
    if (opt) count += uint32_t(2 * params.size());
    if (!config_text.empty()) count += 1;

    detail::ByteWriter w(path);
    w.bytes(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    w.u32(count);
    for (auto& [name, p] : params) {
        const auto buf = detail::to_f32(p);
        detail::write_record(w, name, detail::extents_of(p), buf.data());
    }
    if (opt) {
        for (size_t i = 0; i < params.size(); ++i) {
            const auto mbuf = detail::to_f32(opt->m[i]);
            detail::write_record(w, params[i].first + ".m", detail::extents_of(opt->m[i]),
                                 mbuf.data());
            const auto vbuf = detail::to_f32(opt->v[i]);
            detail::write_record(w, params[i].first + ".v", detail::extents_of(opt->v[i]),
                                 vbuf.data());
        }
    }
    if (!config_text.empty()) {
        std::vector<float> buf(config_text.size());
        for (size_t i = 0; i < config_text.size(); ++i)
            buf[i] = float(static_cast<unsigned char>(config_text[i]));
        detail::write_record(w, kConfigTensorName, {uint32_t(config_text.size())}, buf.data());
    }
    if (opt) w.u64(opt->t);
    w.close();
}

inline RawCheckpoint read_checkpoint(const std::string& path) {
    detail::ByteReader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) r.fail("bad checkpoint magic");
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion) r.fail("unsupported checkpoint version");
    const uint32_t count = r.u32();

    RawCheckpoint ck;
    ck.tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        RawTensorRecord rec;
        const uint16_t name_len = r.u16();
        rec.name.resize(name_len);
        r.bytes(rec.name.data(), name_len);
        const uint8_t ndim = r.u8();
        uint64_t n = 1;
        for (uint8_t d = 0; d < ndim; ++d) {
            rec.extents.push_back(r.u32());
            n *= rec.extents.back();
            if (n > (uint64_t(1) << 34)) r.fail("tensor payload implausibly large");
        }
        rec.data.resize(size_t(n));
        for (uint64_t k = 0; k < n; ++k) rec.data[size_t(k)] = r.f32();
        ck.tensors.push_back(std::move(rec));
    }
    if (r.remaining() >= 8) {
        ck.step = r.u64();
        ck.has_step = true;
    }
    if (r.remaining() != 0) r.fail("trailing bytes after checkpoint payload");
    return ck;
}

inline std::string checkpoint_config(const RawCheckpoint& ck) {
    const RawTensorRecord* rec = ck.find(kConfigTensorName);
    if (!rec) return "";
    std::string out(rec->data.size(), '\0');
    for (size_t i = 0; i < rec->data.size(); ++i) out[i] = char(static_cast<unsigned char>(rec->data[i]));
    return out;
}

template <typename T>
void load_model_params(Model<T>& model, const RawCheckpoint& ck) {
    auto params = collect_params(model);
    for (auto& [name, p] : params) {
        const RawTensorRecord* rec = ck.find(name);
        if (!rec) throw IoError("checkpoint is missing tensor " + name);
        if (rec->extents != detail::extents_of(p))
            throw ShapeError("checkpoint tensor " + name + " has mismatched extents");
        for (int64_t i = 0; i < p.numel(); ++i) p.data()[i] = T(rec->data[size_t(i)]);
    }
}

template <typename T>
OptimState<T> load_optim_state(Model<T>& model, const RawCheckpoint& ck) {
    if (!ck.has_step) throw IoError("checkpoint holds no optimizer state");
    OptimState<T> st;
    for (auto& [name, p] : collect_params(model)) {
        const RawTensorRecord* m = ck.find(name + ".m");
        const RawTensorRecord* v = ck.find(name + ".v");
        if (!m || !v) throw IoError("checkpoint is missing optimizer state for " + name);
        if (m->extents != detail::extents_of(p) || v->extents != detail::extents_of(p))
            throw ShapeError("optimizer state for " + name + " has mismatched extents");
        Tensor<T> mt = Tensor<T>::zeros(p.shape());
        Tensor<T> vt = Tensor<T>::zeros(p.shape());
        for (int64_t i = 0; i < p.numel(); ++i) {
            mt.data()[i] = T(m->data[size_t(i)]);
            vt.data()[i] = T(v->data[size_t(i)]);
        }
        st.names.push_back(name);
        st.m.push_back(mt);
        st.v.push_back(vt);
    }
    st.t = ck.step;
    return st;
}

}  // namespace mspf
