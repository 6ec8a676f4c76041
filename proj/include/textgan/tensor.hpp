#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "textgan/errors.hpp"

namespace textgan {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;        // empty until a backward pass touches it
    bool requires_grad = false; // leaf (parameter) flag
    bool tracked = false;       // true while part of the active tape's graph
};

// Value-semantic handle to a shared dense buffer. Copying a Tensor aliases
// the underlying storage; ops always allocate fresh outputs.
template <typename T>
class Tensor {
public:
    Tensor() : d_(std::make_shared<TensorData<T>>()) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.d_->shape = std::move(shape);
        t.d_->values.assign(shape_numel(t.d_->shape), T(0));
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t = zeros(std::move(shape));
        for (T& v : t.d_->values) v = value;
        return t;
    }

    static Tensor from(std::vector<T> values, Shape shape, bool requires_grad = false) {
        if (values.size() != shape_numel(shape))
            throw DimensionError("tensor: " + std::to_string(values.size()) +
                                 " values do not fill shape " + shape_str(shape));
        Tensor t;
        t.d_->shape = std::move(shape);
        t.d_->values = std::move(values);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T v) { return from({v}, {1}); }

    const Shape& shape() const { return d_->shape; }
    std::size_t ndim() const { return d_->shape.size(); }
    std::size_t numel() const { return d_->values.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape.at(i); }

    // Last-axis extent and the number of rows when the tensor is viewed as
    // a (rows x last_dim) matrix. Most ops operate in this view.
    std::size_t last_dim() const { return d_->shape.empty() ? 1 : d_->shape.back(); }
    std::size_t rows() const { return last_dim() == 0 ? 0 : numel() / last_dim(); }

    std::span<T> values() { return d_->values; }
    std::span<const T> values() const { return d_->values; }
    T* data() { return d_->values.data(); }
    const T* data() const { return d_->values.data(); }

    T item() const {
        if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
        return d_->values[0];
    }

    T at(std::size_t r, std::size_t c) const { return d_->values[r * last_dim() + c]; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool on) { d_->requires_grad = on; }
    bool tracked() const { return d_->tracked || d_->requires_grad; }
    void mark_tracked() { d_->tracked = true; }

    bool has_grad() const { return !d_->grad.empty(); }
    std::span<T> grad() {
        ensure_grad();
        return d_->grad;
    }
    std::span<const T> grad_view() const { return d_->grad; }

    void ensure_grad() {
        if (d_->grad.size() != d_->values.size()) d_->grad.assign(d_->values.size(), T(0));
    }

    void zero_grad() { d_->grad.assign(d_->values.size(), T(0)); }

    void accum_grad(std::span<const T> g) {
        if (g.size() != d_->values.size()) throw DimensionError("accum_grad: size mismatch");
        ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d_->grad[i] += g[i];
    }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

private:
    std::shared_ptr<TensorData<T>> d_;
};

// Ordered record of executed differentiable operations. Ops append their
// backward closures in execution order, which is a topological order of the
// computation graph by construction; backward() replays them once, in
// reverse. A tape is active for the duration of a TapeScope; with no active
// tape, forward ops are pure and record nothing.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return entries_.size(); }

    // Seeds d(loss)/d(loss) = 1 and propagates through every recorded
    // operation exactly once, accumulating into .grad of tracked tensors.
    void backward(Tensor<T> loss) {
        if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        loss.grad()[0] = T(1);
        for (std::size_t i = entries_.size(); i > 0; --i) entries_[i - 1]();
    }

private:
    template <typename U>
    friend class TapeScope;
    std::vector<std::function<void()>> entries_;
    static inline thread_local Tape* active_ = nullptr;
};

// RAII activation of a tape on the current thread.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active_) { Tape<T>::active_ = &tape; }
    ~TapeScope() { Tape<T>::active_ = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
    tape.backward(loss);
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    for (const T v : t.values())
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
}

}  // namespace textgan
