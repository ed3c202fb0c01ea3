#pragma once

// Tape-free reverse-mode automatic differentiation over Tensor<T>. Each
// operation records its parents and a backward closure; Var::backward()
// topologically orders the recorded graph and runs the closures in reverse.

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "vce/core/tensor.hpp"

namespace vce::ag {

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Tensor<T>& grad_ref() {
        if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

bool grad_enabled();

// Disables graph recording in its scope (inference, metric evaluation).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <class T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Var constant(Tensor<T> value);
    static Var parameter(Tensor<T> value);

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad_ref(); }
    Tensor<T>& mutable_grad() { return node_->grad_ref(); }
    void zero_grad() { node_->grad = Tensor<T>(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t size() const { return node_->value.size(); }
    T item() const { return node_->value[0]; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

    // Seeds d(self)/d(self) = 1; self must hold a single element.
    void backward() const;

private:
    std::shared_ptr<Node<T>> node_;
};

// Geometry of a 2-D convolution mapping in_c x in_h x in_w to
// out_c x out_h x out_w. Transposed convolutions reuse the geometry of the
// forward convolution they invert.
struct ConvGeom {
    int in_c = 0, in_h = 0, in_w = 0;
    int out_c = 0, out_h = 0, out_w = 0;
    int kernel = 0, stride = 1;
    int pad_top = 0, pad_left = 0;

    // "same" padding: out = ceil(in / stride), extra padding on bottom/right.
    static ConvGeom same(int in_c, int in_h, int in_w, int out_c, int kernel, int stride);
};

// elementwise, equal shapes
template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> div(const Var<T>& a, const Var<T>& b);
// a / b with 0 wherever b == 0 (and no gradient there)
template <class T> Var<T> safe_div(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& a, T s);
template <class T> Var<T> add_scalar(const Var<T>& a, T s);
template <class T> Var<T> mul_const(const Var<T>& a, const Tensor<T>& c);
template <class T> Var<T> exp(const Var<T>& a);
template <class T> Var<T> log(const Var<T>& a);
template <class T> Var<T> square(const Var<T>& a);
template <class T> Var<T> abs(const Var<T>& a);
template <class T> Var<T> sigmoid(const Var<T>& a);
template <class T> Var<T> leaky_relu(const Var<T>& a, T slope);

// reductions
template <class T> Var<T> sum(const Var<T>& a);
template <class T> Var<T> mean(const Var<T>& a);
// [N, ...] -> [N]
template <class T> Var<T> sum_rows(const Var<T>& a);

// shape
template <class T> Var<T> reshape(const Var<T>& a, Shape shape);
template <class T> Var<T> concat_cols(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> concat_rows(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> slice_cols(const Var<T>& a, int begin, int count);
template <class T> Var<T> gather_cols(const Var<T>& a, std::span<const int> cols);
template <class T> Var<T> gather_rows(const Var<T>& a, std::span<const std::size_t> rows);

// layers
// x [N, in], weight [out, in], bias [out] (may be empty)
template <class T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
// x [N, C, H, W], weight [O, C, K, K], bias [O]
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeom& geom);
// Transpose of conv2d with geometry `geom`: x [N, geom.out_c, out_h, out_w],
// weight [geom.out_c, geom.in_c, K, K], result [N, geom.in_c, in_h, in_w].
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        const ConvGeom& geom);
// Per-channel normalisation with batch statistics (axis 1; all other axes
// reduced). Writes the batch mean/variance for running-average updates.
template <class T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        Tensor<T>* batch_mean, Tensor<T>* batch_var);
// Per-channel normalisation with fixed statistics.
template <class T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                       const Tensor<T>& mean, const Tensor<T>& var, T eps);
template <class T> Var<T> dropout(const Var<T>& x, T rate, std::mt19937_64& rng);
template <class T> Var<T> log_softmax(const Var<T>& x);
// -log p[i, label_i] per row -> [N]
template <class T> Var<T> nll_rows(const Var<T>& log_probs, std::span<const int> labels);
// identity forward, gradient multiplied by -lambda backward
template <class T> Var<T> grad_reverse(const Var<T>& x, T lambda = T(1));
// Detached copy (no gradient flows back).
template <class T> Var<T> detach(const Var<T>& x);

}  // namespace vce::ag
