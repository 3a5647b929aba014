#pragma once

#include <functional>
#include <memory>
#include <span>
#include <utility>

#include "hnf/common.hpp"

namespace hnf {

// Dense N-dimensional array with optional gradient storage. Layout is
// contiguous row-major; feature maps use channels-first N x C x D x H x W.
// Tensors are value-semantic handles onto shared storage and are treated as
// immutable once produced by an op; in-place mutation is reserved for leaf
// initialization and optimizer updates between tapes.
template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a backward pass reaches this tensor
    bool requires_grad = false;
};

template <typename T>
class Tape;

template <typename T>
class Tensor {
public:
    Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(static_cast<size_t>(numel(t.impl_->shape)), T(0));
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.impl_->data) v = value;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (static_cast<int64_t>(data.size()) != numel(shape))
            throw ConfigError("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
        Tensor t;
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(data);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    const Shape& shape() const { return impl_->shape; }
    int64_t dim(size_t i) const { return impl_->shape.at(i); }
    size_t rank() const { return impl_->shape.size(); }
    int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }
    bool defined() const { return !impl_->shape.empty(); }

    std::span<const T> values() const { return impl_->data; }
    // Leaf mutation only (initializers, optimizer steps). Never call on an
    // op output that is still referenced by a live tape.
    std::span<T> mutable_values() { return impl_->data; }

    T item() const {
        if (impl_->data.size() != 1)
            throw ContractError("item() on non-scalar tensor of shape " + shape_str(impl_->shape));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    std::vector<T>& grad_buffer() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
        return impl_->grad;
    }

    bool all_finite() const {
        for (T v : impl_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

// Ordered record of executed differentiable ops. Ops append in execution
// order; backward() replays in reverse, which is a reverse topological order
// of the dataflow graph, visiting each node exactly once. One tape per
// training context, single-threaded by contract.
template <typename T>
class Tape {
public:
    using PullFn = std::function<void(std::span<const T>)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    class Scope {
    public:
        explicit Scope(Tape& tape) : prev_(current_slot()) { current_slot() = &tape; }
        ~Scope() { current_slot() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    static Tape* current() { return current_slot(); }

    void record(std::shared_ptr<TensorImpl<T>> out, PullFn pull) {
        nodes_.push_back(Node{std::move(out), std::move(pull)});
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor.
    void backward(const Tensor<T>& loss) {
        if (loss.size() != 1)
            throw ContractError("backward() requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
        if (nodes_.empty()) throw ContractError("backward() on an empty tape");
        loss.impl()->grad.assign(1, T(1));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->out->grad.empty()) continue;  // not reachable from the loss
            it->pull(std::span<const T>(it->out->grad));
        }
    }

private:
    struct Node {
        std::shared_ptr<TensorImpl<T>> out;
        PullFn pull;
    };
    std::vector<Node> nodes_;

    static Tape*& current_slot() {
        thread_local Tape* tape = nullptr;
        return tape;
    }
};

namespace detail {

template <typename T>
inline std::vector<T>& grad_of(const std::shared_ptr<TensorImpl<T>>& impl) {
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), T(0));
    return impl->grad;
}

template <typename T>
inline bool track(std::initializer_list<const Tensor<T>*> inputs) {
    if (Tape<T>::current() == nullptr) return false;
    for (const Tensor<T>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

}  // namespace detail

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace hnf
