// Dense rank-N tensors with define-by-run reverse-mode differentiation.
//
// A Tensor<T> is a shared handle to contiguous row-major storage plus an
// optional gradient buffer. Primitives (see ops.hpp) append backward
// closures to an explicit Tape; Tape::backward replays them in reverse
// order. T is float for training, double for gradient checks.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dehaze {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                           std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParamError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
};

template <typename T>
class Tensor {
public:
    Tensor() : s_(std::make_shared<TensorStorage<T>>()) {}

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : s_(std::make_shared<TensorStorage<T>>()) {
        for (auto d : shape)
            if (d <= 0) throw ShapeError("Tensor: nonpositive dimension in " + shape_str(shape));
        s_->shape = std::move(shape);
        s_->data.assign(static_cast<std::size_t>(shape_numel(s_->shape)), fill);
        s_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : s_(std::make_shared<TensorStorage<T>>()) {
        if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
            throw ShapeError("Tensor: value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        s_->shape = std::move(shape);
        s_->data = std::move(values);
        s_->requires_grad = requires_grad;
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
    }

    const Shape& shape() const { return s_->shape; }
    std::int64_t dim(int i) const { return s_->shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(s_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(s_->data.size()); }

    std::vector<T>& data() { return s_->data; }
    const std::vector<T>& data() const { return s_->data; }
    T* ptr() { return s_->data.data(); }
    const T* ptr() const { return s_->data.data(); }

    T& operator[](std::int64_t i) { return s_->data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return s_->data[static_cast<std::size_t>(i)]; }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool on) { s_->requires_grad = on; }

    bool has_grad() const { return !s_->grad.empty(); }
    std::vector<T>& grad() {
        ensure_grad();
        return s_->grad;
    }
    const std::vector<T>& grad() const {
        const_cast<Tensor*>(this)->ensure_grad();
        return s_->grad;
    }
    void ensure_grad() {
        if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    }
    void zero_grad() {
        if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
    }

    // Identity of the underlying storage; two handles compare equal iff they
    // alias the same buffer.
    const void* id() const { return s_.get(); }

    Tensor clone() const {
        Tensor out;
        out.s_->shape = s_->shape;
        out.s_->data = s_->data;
        out.s_->requires_grad = s_->requires_grad;
        return out;
    }

private:
    std::shared_ptr<TensorStorage<T>> s_;
};

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    for (const T& v : t.data())
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string(op) + ": non-finite value produced");
}

// Ordered record of executed primitives. Backward replays the closures in
// reverse; each closure reads output gradients and accumulates into input
// gradients. A tape may run backward once; reset() re-arms it.
template <typename T>
class Tape {
public:
    void record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
    }

    std::size_t size() const { return nodes_.size(); }

    void backward(Tensor<T> loss) {
        if (loss.numel() != 1)
            throw ParamError("backward: loss must be scalar, got shape " +
                             shape_str(loss.shape()));
        if (ran_)
            throw ParamError("backward: tape already consumed; call reset() first");
        ran_ = true;
        loss.ensure_grad();
        loss.grad()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    void reset() {
        nodes_.clear();
        ran_ = false;
    }

private:
    std::vector<std::function<void()>> nodes_;
    bool ran_ = false;
};

}  // namespace dehaze
