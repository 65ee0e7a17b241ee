#pragma once

// Dense row-major tensors plus a tape-based reverse-mode autodiff engine.
// Every op is templated on the element type (float for training, double for
// verification) and records its backward rule onto the thread-local active
// tape when any input requires gradients.

#include "common.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace mspf {

template <typename T>
class Tape;

namespace detail {

inline uint64_t next_tape_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1);
}

template <typename T>
struct TensorData {
    std::vector<int64_t> shape;
    std::vector<T> value;
    std::vector<T> grad;        // sized like value once tracked by a tape
    uint64_t tape_id = 0;       // id of the tape currently tracking this tensor
    bool tape_output = false;   // true when produced by an op on that tape
    bool requires_grad = false;
};

inline int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const std::vector<int64_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace detail

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape) { return full(std::move(shape), T(0)); }

    static Tensor full(std::vector<int64_t> shape, T v) {
        validate_shape(shape);
        auto d = std::make_shared<detail::TensorData<T>>();
        d->value.assign(size_t(detail::numel_of(shape)), v);
        d->shape = std::move(shape);
        return Tensor(std::move(d));
    }

    static Tensor from(std::vector<int64_t> shape, std::vector<T> buf) {
        validate_shape(shape);
        if (int64_t(buf.size()) != detail::numel_of(shape)) {
            throw ShapeError("buffer length " + std::to_string(buf.size()) +
                             " does not match shape " + detail::shape_str(shape));
        }
        auto d = std::make_shared<detail::TensorData<T>>();
        d->shape = std::move(shape);
        d->value = std::move(buf);
        return Tensor(std::move(d));
    }

    static Tensor scalar(T v) { return full({1}, v); }

    bool defined() const { return bool(d_); }
    const std::vector<int64_t>& shape() const { return d_->shape; }
    int ndim() const { return int(d_->shape.size()); }
    int64_t size(int axis) const { return d_->shape[size_t(axis)]; }
    int64_t numel() const { return int64_t(d_->value.size()); }

    const T* cdata() const { return d_->value.data(); }
    T* data() { return d_->value.data(); }
    const std::vector<T>& vec() const { return d_->value; }

    T item() const {
        if (numel() != 1) {
            throw ContractError("item() requires a scalar tensor, got shape " +
                                detail::shape_str(d_->shape));
        }
        return d_->value[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool on) { d_->requires_grad = on; }

    bool has_grad() const { return d_->grad.size() == d_->value.size(); }
    const std::vector<T>& grad() const {
        if (!has_grad()) throw TrackingError("tensor has no gradient buffer");
        return d_->grad;
    }

    // Deep copy; the copy is untracked and does not require gradients.
    Tensor clone() const {
        auto d = std::make_shared<detail::TensorData<T>>();
        d->shape = d_->shape;
        d->value = d_->value;
        return Tensor(std::move(d));
    }

    const std::shared_ptr<detail::TensorData<T>>& node() const { return d_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorData<T>> d) : d_(std::move(d)) {}

    static void validate_shape(const std::vector<int64_t>& shape) {
        if (shape.empty()) throw ShapeError("shape must have at least one extent");
        for (int64_t e : shape) {
            if (e <= 0) throw ShapeError("extents must be positive, got " + detail::shape_str(shape));
        }
    }

    std::shared_ptr<detail::TensorData<T>> d_;
};

// Matches the two creation signatures: scalar fill and explicit buffer.
template <typename T>
Tensor<T> tensor_create(std::vector<int64_t> shape, T fill) {
    return Tensor<T>::full(std::move(shape), fill);
}

template <typename T>
Tensor<T> tensor_create(std::vector<int64_t> shape, std::vector<T> buf) {
    return Tensor<T>::from(std::move(shape), std::move(buf));
}

// ---------------------------------------------------------------------------
// Tape: linear record of backward closures in execution order. One tape per
// training step; single writer. Leaf gradients persist across backward calls
// (add-into accumulation); intermediate gradients are reset per call.

template <typename T>
class Tape {
public:
    Tape() : id_(detail::next_tape_id()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    uint64_t id() const { return id_; }

    static Tape* current() { return current_slot(); }

    // Starts tracking an op input. No-op unless the tensor requires gradients.
    void prepare(const Tensor<T>& t) {
        auto& d = *t.node();
        if (!d.requires_grad || d.tape_id == id_) return;
        d.grad.assign(d.value.size(), T(0));
        d.tape_id = id_;
        d.tape_output = false;
        leaves_.push_back(t.node());
    }

    // Registers an op output; downstream ops will chain gradients through it.
    void emit(Tensor<T>& t) {
        auto& d = *t.node();
        d.requires_grad = true;
        d.grad.assign(d.value.size(), T(0));
        d.tape_id = id_;
        d.tape_output = true;
        outputs_.push_back(t.node());
    }

    void record(std::function<void()> bwd) { ops_.push_back(std::move(bwd)); }

    void backward(const Tensor<T>& root) {
        if (!root.defined() || root.numel() != 1) {
            throw ContractError("backward root must be a scalar tensor");
        }
        auto& d = *root.node();
        if (d.tape_id != id_ || !d.tape_output) {
            throw TrackingError("backward root was not produced on this tape");
        }
        for (auto& o : outputs_) std::fill(o->grad.begin(), o->grad.end(), T(0));
        d.grad[0] = T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    void zero_grads() {
        for (auto& l : leaves_) std::fill(l->grad.begin(), l->grad.end(), T(0));
        for (auto& o : outputs_) std::fill(o->grad.begin(), o->grad.end(), T(0));
    }

private:
    template <typename U>
    friend class TapeScope;

    static Tape*& current_slot() {
        thread_local Tape* cur = nullptr;
        return cur;
    }

    uint64_t id_;
    std::vector<std::function<void()>> ops_;
    std::vector<std::shared_ptr<detail::TensorData<T>>> leaves_;
    std::vector<std::shared_ptr<detail::TensorData<T>>> outputs_;
};

// RAII activation of a tape on the current thread; nestable.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::current_slot()) {
        Tape<T>::current_slot() = &tape;
    }
    ~TapeScope() { Tape<T>::current_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

namespace detail {

// Active tape if any listed input is grad-requiring, else nullptr.
template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> ins) {
    Tape<T>* tape = Tape<T>::current();
    if (!tape) return nullptr;
    for (const Tensor<T>* t : ins) {
        if (t->defined() && t->requires_grad()) return tape;
    }
    return nullptr;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

template <typename T>
void finite_guard(const Tensor<T>& t, const char* op) {
    if (!finite_checks_enabled()) return;
    const T* p = t.cdata();
    for (int64_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(double(p[i]))) {
            throw NumericError(std::string(op) + " produced a non-finite value at flat index " +
                               std::to_string(i));
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.cdata();
    const T* pb = b.cdata();
    T* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    finite_guard(out, "add");
    if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
        tape->prepare(a);
        tape->prepare(b);
        tape->emit(out);
        auto an = a.node(), bn = b.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, bn, on, tid, n] {
            const T* g = on->grad.data();
            if (an->tape_id == tid) {
                T* ga = an->grad.data();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (bn->tape_id == tid) {
                T* gb = bn->grad.data();
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T s) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.cdata();
    T* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + s;
    finite_guard(out, "add");
    if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
        tape->prepare(a);
        tape->emit(out);
        auto an = a.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, on, tid, n] {
            if (an->tape_id != tid) return;
            const T* g = on->grad.data();
            T* ga = an->grad.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.cdata();
    const T* pb = b.cdata();
    T* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    finite_guard(out, "sub");
    if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
        tape->prepare(a);
        tape->prepare(b);
        tape->emit(out);
        auto an = a.node(), bn = b.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, bn, on, tid, n] {
            const T* g = on->grad.data();
            if (an->tape_id == tid) {
                T* ga = an->grad.data();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (bn->tape_id == tid) {
                T* gb = bn->grad.data();
                for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, T s) {
    return add(a, T(-s));
}

// s - a, elementwise.
template <typename T>
Tensor<T> sub(T s, const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.cdata();
    T* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = s - pa[i];
    finite_guard(out, "sub");
    if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
        tape->prepare(a);
        tape->emit(out);
        auto an = a.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, on, tid, n] {
            if (an->tape_id != tid) return;
            const T* g = on->grad.data();
            T* ga = an->grad.data();
            for (int64_t i = 0; i < n; ++i) ga[i] -= g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.cdata();
    const T* pb = b.cdata();
    T* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    finite_guard(out, "mul");
    if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
        tape->prepare(a);
        tape->prepare(b);
        tape->emit(out);
        auto an = a.node(), bn = b.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, bn, on, tid, n] {
            const T* g = on->grad.data();
            if (an->tape_id == tid) {
                T* ga = an->grad.data();
                const T* pb2 = bn->value.data();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
            }
            if (bn->tape_id == tid) {
                T* gb = bn->grad.data();
                const T* pa2 = an->value.data();
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.cdata();
    T* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
    finite_guard(out, "scale");
    if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
        tape->prepare(a);
        tape->emit(out);
        auto an = a.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, on, tid, n, s] {
            if (an->tape_id != tid) return;
            const T* g = on->grad.data();
            T* ga = an->grad.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * s;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, T s) {
    return scale(a, s);
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.cdata();
    T* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
        if (pa[i] < T(0)) {
            throw DomainError("sqrt of negative value at flat index " + std::to_string(i));
        }
        po[i] = std::sqrt(pa[i]);
    }
    finite_guard(out, "sqrt");
    if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
        tape->prepare(a);
        tape->emit(out);
        auto an = a.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, on, tid, n] {
            if (an->tape_id != tid) return;
            const T* g = on->grad.data();
            const T* y = on->value.data();
            T* ga = an->grad.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * T(0.5) / y[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.cdata();
    T* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pa[i];
    finite_guard(out, "square");
    if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
        tape->prepare(a);
        tape->emit(out);
        auto an = a.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, on, tid, n] {
            if (an->tape_id != tid) return;
            const T* g = on->grad.data();
            const T* x = an->value.data();
            T* ga = an->grad.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * T(2) * x[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix products. mm kernels accumulate into C with a fixed loop order so
// results are bit-reproducible.

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void mm_acc(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const T a = A[i * k + p];
            const T* brow = B + p * n;
            T* crow = C + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void mm_nt_acc(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = A + i * k;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = B + j * k;
            T acc = T(0);
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            C[i * n + j] += acc;
        }
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void mm_tn_acc(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t p = 0; p < k; ++p) {
        const T* arow = A + p * m;
        const T* brow = B + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const T a = arow[i];
            T* crow = C + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

struct MatmulDims {
    int64_t batch;  // product of leading extents
    int64_t m;
    int64_t k;
    int64_t n;
    bool b_broadcast;  // b is a single [k,n] (or [n,k]) shared across batches
};

template <typename T>
MatmulDims matmul_dims(const Tensor<T>& a, const Tensor<T>& b, bool b_transposed,
                       const char* op) {
    if (a.ndim() < 2 || b.ndim() < 2) {
        throw ShapeError(std::string(op) + ": operands must have at least 2 axes");
    }
    MatmulDims d;
    d.m = a.size(a.ndim() - 2);
    d.k = a.size(a.ndim() - 1);
    const int64_t b_rows = b.size(b.ndim() - 2);
    const int64_t b_cols = b.size(b.ndim() - 1);
    const int64_t b_inner = b_transposed ? b_cols : b_rows;
    d.n = b_transposed ? b_rows : b_cols;
    if (d.k != b_inner) {
        throw ShapeError(std::string(op) + ": inner extents disagree, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    d.batch = a.numel() / (d.m * d.k);
    d.b_broadcast = (b.ndim() == 2);
    if (!d.b_broadcast) {
        if (a.ndim() != b.ndim()) {
            throw ShapeError(std::string(op) + ": batch rank mismatch");
        }
        for (int i = 0; i < a.ndim() - 2; ++i) {
            if (a.size(i) != b.size(i)) {
                throw ShapeError(std::string(op) + ": batch extents disagree, " +
                                 shape_str(a.shape()) + " vs " + shape_str(b.shape()));
            }
        }
    }
    return d;
}

template <typename T>
std::vector<int64_t> matmul_out_shape(const Tensor<T>& a, int64_t m, int64_t n) {
    std::vector<int64_t> s = a.shape();
    s[s.size() - 2] = m;
    s[s.size() - 1] = n;
    return s;
}

}  // namespace detail

// a[..., m, k] * b[k, n] or a[B..., m, k] * b[B..., k, n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const auto d = detail::matmul_dims(a, b, false, "matmul");
    Tensor<T> out = Tensor<T>::zeros(detail::matmul_out_shape(a, d.m, d.n));
    const T* pa = a.cdata();
    const T* pb = b.cdata();
    T* po = out.data();
    for (int64_t bi = 0; bi < d.batch; ++bi) {
        const T* bb = d.b_broadcast ? pb : pb + bi * d.k * d.n;
        detail::mm_acc(pa + bi * d.m * d.k, bb, po + bi * d.m * d.n, d.m, d.k, d.n);
    }
    finite_guard(out, "matmul");
    if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
        tape->prepare(a);
        tape->prepare(b);
        tape->emit(out);
        auto an = a.node(), bn = b.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, bn, on, tid, d] {
            const T* g = on->grad.data();
            const T* va = an->value.data();
            const T* vb = bn->value.data();
            for (int64_t bi = 0; bi < d.batch; ++bi) {
                const T* gb_ = g + bi * d.m * d.n;
                const T* vb_ = d.b_broadcast ? vb : vb + bi * d.k * d.n;
                if (an->tape_id == tid) {
                    detail::mm_nt_acc(gb_, vb_, an->grad.data() + bi * d.m * d.k,
                                      d.m, d.n, d.k);
                }
                if (bn->tape_id == tid) {
                    T* gout = d.b_broadcast ? bn->grad.data()
                                            : bn->grad.data() + bi * d.k * d.n;
                    detail::mm_tn_acc(va + bi * d.m * d.k, gb_, gout, d.k, d.m, d.n);
                }
            }
        });
    }
    return out;
}

// a[..., m, k] * b[..., n, k]^T; used for query-key products.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    const auto d = detail::matmul_dims(a, b, true, "matmul_nt");
    Tensor<T> out = Tensor<T>::zeros(detail::matmul_out_shape(a, d.m, d.n));
    const T* pa = a.cdata();
    const T* pb = b.cdata();
    T* po = out.data();
    for (int64_t bi = 0; bi < d.batch; ++bi) {
        const T* bb = d.b_broadcast ? pb : pb + bi * d.n * d.k;
        detail::mm_nt_acc(pa + bi * d.m * d.k, bb, po + bi * d.m * d.n, d.m, d.k, d.n);
    }
    finite_guard(out, "matmul_nt");
    if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
        tape->prepare(a);
        tape->prepare(b);
        tape->emit(out);
        auto an = a.node(), bn = b.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, bn, on, tid, d] {
            const T* g = on->grad.data();
            const T* va = an->value.data();
            const T* vb = bn->value.data();
            for (int64_t bi = 0; bi < d.batch; ++bi) {
                const T* gb_ = g + bi * d.m * d.n;
                const T* vb_ = d.b_broadcast ? vb : vb + bi * d.n * d.k;
                if (an->tape_id == tid) {
                    detail::mm_acc(gb_, vb_, an->grad.data() + bi * d.m * d.k,
                                   d.m, d.n, d.k);
                }
                if (bn->tape_id == tid) {
                    T* gout = d.b_broadcast ? bn->grad.data()
                                            : bn->grad.data() + bi * d.n * d.k;
                    detail::mm_tn_acc(gb_, va + bi * d.m * d.k, gout, d.n, d.m, d.k);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions. Accumulation runs in double regardless of T so sums are
// deterministic and accurate; mean adds a residual-correction pass so the
// mean of N equal values is that value bit-exactly.

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    const T* pa = a.cdata();
    const int64_t n = a.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += double(pa[i]);
    Tensor<T> out = Tensor<T>::scalar(T(acc));
    finite_guard(out, "sum");
    if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
        tape->prepare(a);
        tape->emit(out);
        auto an = a.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, on, tid, n] {
            if (an->tape_id != tid) return;
            const T g = on->grad[0];
            T* ga = an->grad.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    const T* pa = a.cdata();
    const int64_t n = a.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += double(pa[i]);
    const double m0 = acc / double(n);
    double resid = 0.0;
    for (int64_t i = 0; i < n; ++i) resid += double(pa[i]) - m0;
    Tensor<T> out = Tensor<T>::scalar(T(m0 + resid / double(n)));
    finite_guard(out, "mean");
    if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
        tape->prepare(a);
        tape->emit(out);
        auto an = a.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, on, tid, n] {
            if (an->tape_id != tid) return;
            const T g = T(double(on->grad[0]) / double(n));
            T* ga = an->grad.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape movement. All movement ops copy; there are no strided views.

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int64_t> shape) {
    if (detail::numel_of(shape) != a.numel()) {
        throw ShapeError("reshape: element count mismatch " + detail::shape_str(a.shape()) +
                         " -> " + detail::shape_str(shape));
    }
    Tensor<T> out = Tensor<T>::from(std::move(shape), a.vec());
    if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
        tape->prepare(a);
        tape->emit(out);
        auto an = a.node(), on = out.node();
        const uint64_t tid = tape->id();
        const int64_t n = a.numel();
        tape->record([an, on, tid, n] {
            if (an->tape_id != tid) return;
            const T* g = on->grad.data();
            T* ga = an->grad.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        });
    }
    return out;
}

namespace detail {

inline std::vector<int64_t> strides_of(const std::vector<int64_t>& shape) {
    std::vector<int64_t> st(shape.size());
    int64_t acc = 1;
    for (size_t i = shape.size(); i-- > 0;) {
        st[i] = acc;
        acc *= shape[i];
    }
    return st;
}

// Flat index map realizing out[i] = in[perm_map(i)] for an axis permutation.
inline std::vector<int64_t> permute_index_map(const std::vector<int64_t>& in_shape,
                                              const std::vector<int>& axes) {
    const auto in_strides = strides_of(in_shape);
    std::vector<int64_t> out_shape(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = in_shape[size_t(axes[i])];
    const int64_t n = numel_of(out_shape);
    std::vector<int64_t> map(static_cast<size_t>(n));
    std::vector<int64_t> idx(axes.size(), 0);
    for (int64_t flat = 0; flat < n; ++flat) {
        int64_t src = 0;
        for (size_t i = 0; i < axes.size(); ++i) src += idx[i] * in_strides[size_t(axes[i])];
        map[size_t(flat)] = src;
        for (size_t i = axes.size(); i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    return map;
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes) {
    if (int(axes.size()) != a.ndim()) {
        throw ShapeError("permute: axes rank mismatch");
    }
    std::vector<bool> seen(axes.size(), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= a.ndim() || seen[size_t(ax)]) {
            throw ShapeError("permute: axes must be a permutation of 0..ndim-1");
        }
        seen[size_t(ax)] = true;
    }
    std::vector<int64_t> out_shape(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = a.size(axes[i]);
    auto map = detail::permute_index_map(a.shape(), axes);
    Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
    const T* pa = a.cdata();
    T* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[map[size_t(i)]];
    if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
        tape->prepare(a);
        tape->emit(out);
        auto an = a.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, on, tid, n, map = std::move(map)] {
            if (an->tape_id != tid) return;
            const T* g = on->grad.data();
            T* ga = an->grad.data();
            for (int64_t i = 0; i < n; ++i) ga[map[size_t(i)]] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& a, int axis, int64_t start, int64_t len) {
    if (axis < 0 || axis >= a.ndim()) throw ShapeError("narrow: axis out of range");
    if (start < 0 || len <= 0 || start + len > a.size(axis)) {
        throw ShapeError("narrow: window [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") exceeds extent " +
                         std::to_string(a.size(axis)));
    }
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.size(i);
    for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.size(i);
    const int64_t mid = a.size(axis);
    std::vector<int64_t> out_shape = a.shape();
    out_shape[size_t(axis)] = len;
    Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
    const T* pa = a.cdata();
    T* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        const T* src = pa + (o * mid + start) * inner;
        T* dst = po + o * len * inner;
        std::copy(src, src + len * inner, dst);
    }
    if (Tape<T>* tape = detail::recording_tape<T>({&a})) {
        tape->prepare(a);
        tape->emit(out);
        auto an = a.node(), on = out.node();
        const uint64_t tid = tape->id();
        tape->record([an, on, tid, outer, inner, mid, start, len] {
            if (an->tape_id != tid) return;
            const T* g = on->grad.data();
            T* ga = an->grad.data();
            for (int64_t o = 0; o < outer; ++o) {
                T* dst = ga + (o * mid + start) * inner;
                const T* src = g + o * len * inner;
                for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: needs at least one input");
    const Tensor<T>& first = parts.front();
    if (axis < 0 || axis >= first.ndim()) throw ShapeError("concat: axis out of range");
    int64_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.ndim() != first.ndim()) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < first.ndim(); ++i) {
            if (i != axis && p.size(i) != first.size(i)) {
                throw ShapeError("concat: extent mismatch at axis " + std::to_string(i) +
                                 ": " + detail::shape_str(p.shape()) + " vs " +
                                 detail::shape_str(first.shape()));
            }
        }
        total_axis += p.size(axis);
    }
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= first.size(i);
    for (int i = axis + 1; i < first.ndim(); ++i) inner *= first.size(i);
    std::vector<int64_t> out_shape = first.shape();
    out_shape[size_t(axis)] = total_axis;
    Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
    T* po = out.data();
    int64_t at = 0;
    for (const auto& p : parts) {
        const int64_t len = p.size(axis);
        const T* src = p.cdata();
        for (int64_t o = 0; o < outer; ++o) {
            std::copy(src + o * len * inner, src + (o + 1) * len * inner,
                      po + (o * total_axis + at) * inner);
        }
        at += len;
    }
    bool any_grad = false;
    if (Tape<T>* tape = Tape<T>::current()) {
        for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
        if (any_grad) {
            std::vector<std::shared_ptr<detail::TensorData<T>>> nodes;
            std::vector<int64_t> lens;
            for (const auto& p : parts) {
                tape->prepare(p);
                nodes.push_back(p.node());
                lens.push_back(p.size(axis));
            }
            tape->emit(out);
            auto on = out.node();
            const uint64_t tid = tape->id();
            tape->record([nodes = std::move(nodes), lens = std::move(lens), on, tid,
                          outer, inner, total_axis] {
                const T* g = on->grad.data();
                int64_t at2 = 0;
                for (size_t pi = 0; pi < nodes.size(); ++pi) {
                    const int64_t len = lens[pi];
                    if (nodes[pi]->tape_id == tid) {
                        T* ga = nodes[pi]->grad.data();
                        for (int64_t o = 0; o < outer; ++o) {
                            const T* src = g + (o * total_axis + at2) * inner;
                            T* dst = ga + o * len * inner;
                            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                        }
                    }
                    at2 += len;
                }
            });
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Precision conversion and deterministic initialization helpers.

template <typename U, typename T>
Tensor<U> cast(const Tensor<T>& a) {
    std::vector<U> buf(size_t(a.numel()));
    const T* pa = a.cdata();
    for (int64_t i = 0; i < a.numel(); ++i) buf[size_t(i)] = U(pa[i]);
    return Tensor<U>::from(a.shape(), std::move(buf));
}

// Draws are made in double so the same seed produces the same sequence of
// values regardless of the storage type.
template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
    T* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = T(rng.uniform(lo, hi));
}

template <typename T>
void fill_trunc_normal(Tensor<T>& t, Rng& rng, double stddev) {
    T* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = T(rng.trunc_normal(stddev));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking. The callable is evaluated generically
// so the numeric side always runs in double; the analytic side runs in T via
// the tape. The op output is reduced to a scalar through a fixed random
// weighting shared exactly between both sides.

struct FdReport {
    double max_rel_err = 0.0;
    bool pass = false;
    size_t worst_input = 0;
    int64_t worst_coord = -1;
};

template <typename T, typename Fn>
FdReport finite_diff_check(Fn&& op, const std::vector<Tensor<T>>& inputs, double step,
                           double tol, uint64_t weight_seed = 0x5EEDBA5Eull) {
    if (!(step > 0.0)) throw ContractError("finite_diff_check requires step > 0");
    if (inputs.empty()) throw ContractError("finite_diff_check requires at least one input");

    // Probe the output extent, then fix the reduction weights.
    std::vector<Tensor<double>> dref;
    dref.reserve(inputs.size());
    for (const auto& t : inputs) dref.push_back(cast<double>(t));
    Tensor<double> probe = op(dref);
    const int64_t out_n = probe.numel();
    Rng wrng(weight_seed);
    std::vector<T> w_t(static_cast<size_t>(out_n));
    std::vector<double> w_d(static_cast<size_t>(out_n));
    for (int64_t i = 0; i < out_n; ++i) {
        w_t[size_t(i)] = T(wrng.uniform(-1.0, 1.0));
        w_d[size_t(i)] = double(w_t[size_t(i)]);
    }

    // Analytic gradients through the tape at storage precision.
    std::vector<Tensor<T>> tin;
    tin.reserve(inputs.size());
    for (const auto& t : inputs) {
        Tensor<T> c = t.clone();
        c.set_requires_grad(true);
        tin.push_back(std::move(c));
    }
    Tape<T> tape;
    {
        TapeScope<T> scope(tape);
        Tensor<T> out = op(tin);
        if (out.numel() != out_n) {
            throw ContractError("finite_diff_check: output extent changed between probes");
        }
        Tensor<T> weights = Tensor<T>::from(out.shape(), w_t);
        Tensor<T> loss = sum(mul(out, weights));
        tape.backward(loss);
    }

    auto weighted = [&](const Tensor<double>& out) {
        const double* p = out.cdata();
        double s = 0.0;
        for (int64_t i = 0; i < out_n; ++i) s += w_d[size_t(i)] * p[i];
        return s;
    };

    FdReport rep;
    rep.pass = true;
    for (size_t ii = 0; ii < dref.size(); ++ii) {
        double* px = dref[ii].data();
        const auto& gnode = tin[ii].node();
        const bool have_grad = gnode->grad.size() == size_t(tin[ii].numel());
        for (int64_t c = 0; c < dref[ii].numel(); ++c) {
            const double orig = px[c];
            px[c] = orig + step;
            Tensor<double> outp = op(dref);
            px[c] = orig - step;
            Tensor<double> outm = op(dref);
            px[c] = orig;
            const double fp = weighted(outp);
            const double fm = weighted(outm);
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw NumericError("finite_diff_check: non-finite output while perturbing input " +
                                   std::to_string(ii) + " coordinate " + std::to_string(c));
            }
            const double numeric = (fp - fm) / (2.0 * step);
            const double analytic = have_grad ? double(gnode->grad[size_t(c)]) : 0.0;
            const double denom =
                std::max({std::fabs(analytic), std::fabs(numeric), 1e-3});
            const double rel = std::fabs(analytic - numeric) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_input = ii;
                rep.worst_coord = c;
            }
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace mspf
