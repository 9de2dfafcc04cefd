#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "difct/common.hpp"

namespace difct {

namespace detail {

template <class T>
struct TensorNode {
    std::vector<int64_t> shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized lazily during backward()
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Adds this node's gradient contribution into its parents' grads.
    std::function<void(TensorNode&)> backward_fn;

    int64_t numel() const { return int64_t(value.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

}  // namespace detail

// Scoped disable of graph recording (inference / oracle evaluation).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_mode_enabled();

// Dense n-dimensional array with reverse-mode autodiff. Copying a Tensor
// copies the handle; the buffer is shared. T is float in production and
// double in gradient-check builds.
template <class T>
class Tensor {
public:
    using Node = detail::TensorNode<T>;

    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<int64_t> shape, T value, bool requires_grad = false);
    static Tensor from_data(std::vector<int64_t> shape, std::vector<T> data,
                            bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const std::vector<int64_t>& shape() const { return n_->shape; }
    int64_t dim() const { return int64_t(n_->shape.size()); }
    int64_t numel() const { return n_->numel(); }
    int64_t size(int axis) const { return n_->shape[size_t(axis)]; }

    T* data() { return n_->value.data(); }
    const T* data() const { return n_->value.data(); }
    std::vector<T>& values() { return n_->value; }
    const std::vector<T>& values() const { return n_->value; }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        n_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<T>& grad() const { return n_->grad; }
    std::vector<T>& grad() { return n_->grad; }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
    }

    T item() const;

    std::shared_ptr<Node> node() const { return n_; }

private:
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}
    std::shared_ptr<Node> n_;

    template <class U>
    friend Tensor<U> make_op_result(std::vector<int64_t> shape,
                                    std::vector<U> value,
                                    std::vector<Tensor<U>> inputs,
                                    std::function<void(detail::TensorNode<U>&)> bw);
};

// ---- primitives -----------------------------------------------------------

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0);

template <class T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

// features [B,C,H,W], coords [B,N,2] in continuous pixel units (x, y).
// Taps outside [0,W-1]x[0,H-1] contribute zero. No gradient w.r.t. coords.
template <class T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& features, const Tensor<T>& coords);

template <class T>
Tensor<T> relu(const Tensor<T>& x);

template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x);  // window 2, stride 2

template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x);  // window 2, stride 2

template <class T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x);

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> reduce_max(const Tensor<T>& x, int axis);

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x, int axis);

template <class T>
Tensor<T> sum(const Tensor<T>& x);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s);

template <class T>
Tensor<T> permute(const Tensor<T>& x, std::vector<int> axes);

template <class T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int64_t> new_shape);

template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target);

// Reverse-mode sweep from a scalar loss. Visits recorded ops in reverse
// topological order exactly once, accumulates additively into every
// reachable requires_grad tensor, then releases the graph.
template <class T>
void backward(const Tensor<T>& loss);

// Classical momentum: v <- m*v + g; theta <- theta - lr*v.
template <class T>
class SgdMomentum {
public:
    explicit SgdMomentum(T momentum) : momentum_(momentum) {}

    void step(std::span<Tensor<T>> params, T lr);
    T momentum() const { return momentum_; }

private:
    T momentum_;
    std::unordered_map<const detail::TensorNode<T>*, std::vector<T>> velocity_;
};

template <class T>
void sgd_step(std::span<Tensor<T>> params, SgdMomentum<T>& state, T lr) {
    state.step(params, lr);
}

std::string shape_str(const std::vector<int64_t>& s);

}  // namespace difct
