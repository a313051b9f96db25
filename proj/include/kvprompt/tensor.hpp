#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include "kvprompt/errors.hpp"
#include "kvprompt/rng.hpp"

namespace kvp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major tensor. The gradient buffer exists only while the tensor
// requires grad; ops allocate it for their outputs whenever any input
// requires grad so gradients can flow through frozen intermediates.
template <class T>
struct Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor requires float or double");

    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;

    Tensor() = default;
    explicit Tensor(Shape s, bool rg = false)
        : shape(std::move(s)), data(shape_numel(shape), T(0)) {
        if (rg) enable_grad();
    }

    std::size_t numel() const { return data.size(); }

    std::size_t rank() const { return shape.size(); }

    std::size_t rows() const {
        require_2d("rows()");
        return shape[0];
    }
    std::size_t cols() const {
        require_2d("cols()");
        return shape[1];
    }

    T& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    T at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    void enable_grad() {
        requires_grad = true;
        grad.assign(data.size(), T(0));
    }
    void disable_grad() {
        requires_grad = false;
        grad.clear();
        grad.shrink_to_fit();
    }
    void zero_grad() {
        if (requires_grad) grad.assign(data.size(), T(0));
    }

    void check_finite(const char* what) const {
        for (T v : data) {
            if (!std::isfinite(v)) {
                throw NumericError(std::string("non-finite value in ") + what);
            }
        }
    }

private:
    void require_2d(const char* who) const {
        if (shape.size() != 2) {
            throw ShapeError(std::string(who) + " on tensor of shape " + shape_str(shape));
        }
    }
};

template <class T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <class T>
TensorPtr<T> make_tensor(Shape s, bool requires_grad = false) {
    return std::make_shared<Tensor<T>>(std::move(s), requires_grad);
}

template <class T>
TensorPtr<T> make_tensor(Shape s, std::vector<T> values, bool requires_grad = false) {
    auto t = std::make_shared<Tensor<T>>(std::move(s), requires_grad);
    if (t->numel() != values.size()) {
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(t->shape));
    }
    t->data = std::move(values);
    if (requires_grad) t->grad.assign(t->data.size(), T(0));
    return t;
}

// In-place initializers used for backbone/prompt parameter setup.
template <class T>
void fill_trunc_normal(Tensor<T>& t, Rng& rng, double stddev) {
    for (T& v : t.data) v = static_cast<T>(rng.truncated_normal(stddev));
}

template <class T>
void fill_he_normal(Tensor<T>& t, Rng& rng, std::size_t fan_in) {
    for (T& v : t.data) v = static_cast<T>(rng.he_normal(fan_in));
}

template <class T>
void fill_constant(Tensor<T>& t, T value) {
    for (T& v : t.data) v = value;
}

// Linear record of backward closures. Ops append in execution order, so the
// list is already topologically sorted; backward() is one reverse sweep and
// visits each node exactly once. A tape and its tensors are a single-threaded
// unit.
template <class T>
class Tape {
public:
    void record(std::function<void()> fn) {
        if (recording_) nodes_.push_back(std::move(fn));
    }

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad tensor
    // reachable from it. Gradients accumulate additively across calls.
    void backward(const TensorPtr<T>& loss) {
        if (!loss || loss->numel() != 1) {
            throw ShapeError("backward requires a scalar loss, got " +
                             (loss ? shape_str(loss->shape) : std::string("null")));
        }
        if (loss->requires_grad) loss->grad[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
    bool recording_ = true;
};

// Disables node recording within a scope (pure inference paths).
template <class T>
class NoGradGuard {
public:
    explicit NoGradGuard(Tape<T>& tape) : tape_(tape), prev_(tape.recording()) {
        tape_.set_recording(false);
    }
    ~NoGradGuard() { tape_.set_recording(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape<T>& tape_;
    bool prev_;
};

}  // namespace kvp
