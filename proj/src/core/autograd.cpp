#include "vce/core/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "vce/core/linalg.hpp"

namespace vce::ag {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

ConvGeom ConvGeom::same(int in_c, int in_h, int in_w, int out_c, int kernel, int stride) {
    ConvGeom g;
    g.in_c = in_c;
    g.in_h = in_h;
    g.in_w = in_w;
    g.out_c = out_c;
    g.kernel = kernel;
    g.stride = stride;
    g.out_h = (in_h + stride - 1) / stride;
    g.out_w = (in_w + stride - 1) / stride;
    const int pad_h = std::max((g.out_h - 1) * stride + kernel - in_h, 0);
    const int pad_w = std::max((g.out_w - 1) * stride + kernel - in_w, 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
    return g;
}

template <class T>
Var<T> Var<T>::constant(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return Var<T>(std::move(node));
}

template <class T>
Var<T> Var<T>::parameter(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var<T>(std::move(node));
}

template <class T>
void Var<T>::backward() const {
    if (node_->value.size() != 1)
        throw std::invalid_argument("backward() needs a scalar root, got shape " +
                                    shape_str(node_->value.shape()));
    if (!node_->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    node_->grad_ref().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward && node->grad.size() == node->value.size()) node->backward(*node);
    }
}

namespace {

template <class T>
bool needs_grad(const std::vector<std::shared_ptr<Node<T>>>& parents) {
    if (!g_grad_enabled) return false;
    return std::any_of(parents.begin(), parents.end(),
                       [](const auto& p) { return p && p->requires_grad; });
}

template <class T>
Var<T> make_result(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                   std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    if (needs_grad(parents)) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Var<T>(std::move(node));
}

template <class T>
bool wants(const std::shared_ptr<Node<T>>& n) {
    return n && n->requires_grad;
}

void check_same(const Shape& a, const Shape& b, const char* op) {
    if (a != b)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                    shape_str(b));
}

template <class T, class F, class G>
Var<T> unary(const Var<T>& a, F forward, G derivative) {
    const Tensor<T>& x = a.value();
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = forward(x[i]);
    auto an = a.node();
    return make_result<T>(std::move(y), {an}, [an, derivative](Node<T>& self) {
        Tensor<T>& g = an->grad_ref();
        const Tensor<T>& x = an->value;
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * derivative(x[i], self.value[i]);
    });
}

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
    const int k = g.kernel;
    const int hw = g.out_h * g.out_w;
    for (int c = 0; c < g.in_c; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                T* row = cols + static_cast<std::size_t>((c * k + ki) * k + kj) * hw;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad_top + ki;
                    T* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= g.in_h) {
                        std::fill(dst, dst + g.out_w, T(0));
                        continue;
                    }
                    const T* src = x + (static_cast<std::size_t>(c) * g.in_h + iy) * g.in_w;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad_left + kj;
                        dst[ox] = (ix < 0 || ix >= g.in_w) ? T(0) : src[ix];
                    }
                }
            }
        }
    }
}

template <class T>
void col2im(const T* cols, const ConvGeom& g, T* x) {
    const int k = g.kernel;
    const int hw = g.out_h * g.out_w;
    for (int c = 0; c < g.in_c; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const T* row = cols + static_cast<std::size_t>((c * k + ki) * k + kj) * hw;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad_top + ki;
                    if (iy < 0 || iy >= g.in_h) continue;
                    const T* src = row + oy * g.out_w;
                    T* dst = x + (static_cast<std::size_t>(c) * g.in_h + iy) * g.in_w;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad_left + kj;
                        if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

// Channel layout helpers for batch norm: [N, C, rest...]
struct ChannelLayout {
    std::size_t n, c, inner;
};

ChannelLayout channel_layout(const Shape& s) {
    if (s.size() < 2) throw std::invalid_argument("batch norm needs rank >= 2");
    std::size_t inner = 1;
    for (std::size_t i = 2; i < s.size(); ++i) inner *= static_cast<std::size_t>(s[i]);
    return {static_cast<std::size_t>(s[0]), static_cast<std::size_t>(s[1]), inner};
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same(a.shape(), b.shape(), "add");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(y), {an, bn}, [an, bn](Node<T>& self) {
        for (auto* p : {an.get(), bn.get()}) {
            if (!p->requires_grad) continue;
            Tensor<T>& g = p->grad_ref();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check_same(a.shape(), b.shape(), "sub");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(y), {an, bn}, [an, bn](Node<T>& self) {
        if (an->requires_grad) {
            Tensor<T>& g = an->grad_ref();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            Tensor<T>& g = bn->grad_ref();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_same(a.shape(), b.shape(), "mul");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(y), {an, bn}, [an, bn](Node<T>& self) {
        if (an->requires_grad) {
            Tensor<T>& g = an->grad_ref();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            Tensor<T>& g = bn->grad_ref();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
        }
    });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    check_same(a.shape(), b.shape(), "div");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] / b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(y), {an, bn}, [an, bn](Node<T>& self) {
        if (an->requires_grad) {
            Tensor<T>& g = an->grad_ref();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bn->value[i];
        }
        if (bn->requires_grad) {
            Tensor<T>& g = bn->grad_ref();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] -= self.grad[i] * self.value[i] / bn->value[i];
        }
    });
}

template <class T>
Var<T> safe_div(const Var<T>& a, const Var<T>& b) {
    check_same(a.shape(), b.shape(), "safe_div");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = b.value()[i] == T(0) ? T(0) : a.value()[i] / b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(y), {an, bn}, [an, bn](Node<T>& self) {
        for (std::size_t i = 0; i < self.value.size(); ++i) {
            const T den = bn->value[i];
            if (den == T(0)) continue;
            if (an->requires_grad) an->grad_ref()[i] += self.grad[i] / den;
            if (bn->requires_grad) bn->grad_ref()[i] -= self.grad[i] * self.value[i] / den;
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
    return unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
    return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> mul_const(const Var<T>& a, const Tensor<T>& c) {
    check_same(a.shape(), c.shape(), "mul_const");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * c[i];
    auto an = a.node();
    return make_result<T>(std::move(y), {an}, [an, c](Node<T>& self) {
        Tensor<T>& g = an->grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c[i];
    });
}

template <class T>
Var<T> exp(const Var<T>& a) {
    return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& a) {
    return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Var<T> square(const Var<T>& a) {
    return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Var<T> abs(const Var<T>& a) {
    return unary(
        a, [](T x) { return std::abs(x); },
        [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
    return unary(
        a, [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
    return unary(
        a, [slope](T x) { return x > T(0) ? x : slope * x; },
        [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <class T>
Var<T> sum(const Var<T>& a) {
    T acc = T(0);
    for (T v : a.value().span()) acc += v;
    auto an = a.node();
    return make_result<T>(Tensor<T>({1}, acc), {an}, [an](Node<T>& self) {
        Tensor<T>& g = an->grad_ref();
        const T s = self.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s;
    });
}

template <class T>
Var<T> mean(const Var<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Var<T> sum_rows(const Var<T>& a) {
    const std::size_t n = static_cast<std::size_t>(a.shape().at(0));
    const std::size_t row = a.value().row_size();
    Tensor<T> y({static_cast<int>(n)});
    for (std::size_t i = 0; i < n; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < row; ++j) acc += a.value()[i * row + j];
        y[i] = acc;
    }
    auto an = a.node();
    return make_result<T>(std::move(y), {an}, [an, n, row](Node<T>& self) {
        Tensor<T>& g = an->grad_ref();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < row; ++j) g[i * row + j] += self.grad[i];
    });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> y = a.value();
    y.reshape(std::move(shape));
    auto an = a.node();
    return make_result<T>(std::move(y), {an}, [an](Node<T>& self) {
        Tensor<T>& g = an->grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[0] != b.shape()[0])
        throw std::invalid_argument("concat_cols: incompatible " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    const int n = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
    Tensor<T> y({n, p + q});
    for (int i = 0; i < n; ++i) {
        std::copy_n(a.value().data() + i * p, p, y.data() + i * (p + q));
        std::copy_n(b.value().data() + i * q, q, y.data() + i * (p + q) + p);
    }
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(y), {an, bn}, [an, bn, n, p, q](Node<T>& self) {
        if (an->requires_grad) {
            Tensor<T>& g = an->grad_ref();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < p; ++j) g[i * p + j] += self.grad[i * (p + q) + j];
        }
        if (bn->requires_grad) {
            Tensor<T>& g = bn->grad_ref();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < q; ++j) g[i * q + j] += self.grad[i * (p + q) + p + j];
        }
    });
}

template <class T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
    Shape sa = a.shape(), sb = b.shape();
    if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1))
        throw std::invalid_argument("concat_rows: incompatible " + shape_str(sa) + " and " +
                                    shape_str(sb));
    Shape s = sa;
    s[0] = sa[0] + sb[0];
    Tensor<T> y(s);
    std::copy(a.value().vec().begin(), a.value().vec().end(), y.data());
    std::copy(b.value().vec().begin(), b.value().vec().end(), y.data() + a.size());
    auto an = a.node(), bn = b.node();
    const std::size_t na = a.size();
    return make_result<T>(std::move(y), {an, bn}, [an, bn, na](Node<T>& self) {
        if (an->requires_grad) {
            Tensor<T>& g = an->grad_ref();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            Tensor<T>& g = bn->grad_ref();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
        }
    });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, int begin, int count) {
    std::vector<int> cols(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) cols[static_cast<std::size_t>(i)] = begin + i;
    return gather_cols(a, std::span<const int>(cols));
}

template <class T>
Var<T> gather_cols(const Var<T>& a, std::span<const int> cols) {
    if (a.shape().size() != 2) throw std::invalid_argument("gather_cols needs a matrix");
    const int n = a.shape()[0], w = a.shape()[1];
    const int m = static_cast<int>(cols.size());
    std::vector<int> idx(cols.begin(), cols.end());
    for (int c : idx)
        if (c < 0 || c >= w) throw std::out_of_range("gather_cols: column out of range");
    Tensor<T> y({n, m});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) y[i * m + j] = a.value()[i * w + idx[j]];
    auto an = a.node();
    return make_result<T>(std::move(y), {an}, [an, idx, n, w, m](Node<T>& self) {
        Tensor<T>& g = an->grad_ref();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) g[i * w + idx[j]] += self.grad[i * m + j];
    });
}

template <class T>
Var<T> gather_rows(const Var<T>& a, std::span<const std::size_t> rows) {
    Tensor<T> y = vce::gather_rows(a.value(), rows);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    const std::size_t row = a.value().row_size();
    auto an = a.node();
    return make_result<T>(std::move(y), {an}, [an, idx, row](Node<T>& self) {
        Tensor<T>& g = an->grad_ref();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < row; ++j) g[idx[i] * row + j] += self.grad[i * row + j];
    });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
        throw std::invalid_argument("linear: input " + shape_str(xs) + " vs weight " +
                                    shape_str(ws));
    const int n = xs[0], in = xs[1], out = ws[0];
    Tensor<T> y({n, out});
    gemm<T>(false, true, n, out, in, T(1), x.value().data(), in, weight.value().data(), in, T(0),
            y.data(), out);
    const bool has_bias = static_cast<bool>(bias);
    if (has_bias)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < out; ++j) y[i * out + j] += bias.value()[j];
    auto xn = x.node(), wn = weight.node();
    auto bn = has_bias ? bias.node() : nullptr;
    std::vector<std::shared_ptr<Node<T>>> parents{xn, wn};
    if (bn) parents.push_back(bn);
    return make_result<T>(std::move(y), parents, [xn, wn, bn, n, in, out](Node<T>& self) {
        if (xn->requires_grad)
            gemm<T>(false, false, n, in, out, T(1), self.grad.data(), out, wn->value.data(), in,
                    T(1), xn->grad_ref().data(), in);
        if (wn->requires_grad)
            gemm<T>(true, false, out, in, n, T(1), self.grad.data(), out, xn->value.data(), in,
                    T(1), wn->grad_ref().data(), in);
        if (bn && bn->requires_grad) {
            Tensor<T>& g = bn->grad_ref();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < out; ++j) g[j] += self.grad[i * out + j];
        }
    });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeom& g) {
    const Shape& xs = x.shape();
    if (xs.size() != 4 || xs[1] != g.in_c || xs[2] != g.in_h || xs[3] != g.in_w)
        throw std::invalid_argument("conv2d: input " + shape_str(xs) + " does not match geometry");
    const int n = xs[0];
    const int ckk = g.in_c * g.kernel * g.kernel;
    const int ohw = g.out_h * g.out_w;
    const std::size_t in_sz = static_cast<std::size_t>(g.in_c) * g.in_h * g.in_w;
    const std::size_t out_sz = static_cast<std::size_t>(g.out_c) * ohw;
    Tensor<T> y({n, g.out_c, g.out_h, g.out_w});
    std::vector<T> cols(static_cast<std::size_t>(ckk) * ohw);
    for (int s = 0; s < n; ++s) {
        im2col(x.value().data() + s * in_sz, g, cols.data());
        T* ys = y.data() + s * out_sz;
        gemm<T>(false, false, g.out_c, ohw, ckk, T(1), weight.value().data(), ckk, cols.data(), ohw,
                T(0), ys, ohw);
        if (bias)
            for (int o = 0; o < g.out_c; ++o) {
                const T b = bias.value()[o];
                for (int p = 0; p < ohw; ++p) ys[o * ohw + p] += b;
            }
    }
    auto xn = x.node(), wn = weight.node();
    auto bn = bias ? bias.node() : nullptr;
    std::vector<std::shared_ptr<Node<T>>> parents{xn, wn};
    if (bn) parents.push_back(bn);
    return make_result<T>(std::move(y), parents,
                          [xn, wn, bn, g, n, ckk, ohw, in_sz, out_sz](Node<T>& self) {
        std::vector<T> cols(static_cast<std::size_t>(ckk) * ohw);
        for (int s = 0; s < n; ++s) {
            const T* dy = self.grad.data() + s * out_sz;
            if (wn->requires_grad) {
                im2col(xn->value.data() + s * in_sz, g, cols.data());
                gemm<T>(false, true, g.out_c, ckk, ohw, T(1), dy, ohw, cols.data(), ohw, T(1),
                        wn->grad_ref().data(), ckk);
            }
            if (xn->requires_grad) {
                gemm<T>(true, false, ckk, ohw, g.out_c, T(1), wn->value.data(), ckk, dy, ohw, T(0),
                        cols.data(), ohw);
                col2im(cols.data(), g, xn->grad_ref().data() + s * in_sz);
            }
            if (bn && bn->requires_grad) {
                Tensor<T>& gb = bn->grad_ref();
                for (int o = 0; o < g.out_c; ++o) {
                    T acc = T(0);
                    for (int p = 0; p < ohw; ++p) acc += dy[o * ohw + p];
                    gb[o] += acc;
                }
            }
        }
    });
}

template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        const ConvGeom& g) {
    const Shape& xs = x.shape();
    if (xs.size() != 4 || xs[1] != g.out_c || xs[2] != g.out_h || xs[3] != g.out_w)
        throw std::invalid_argument("conv_transpose2d: input " + shape_str(xs) +
                                    " does not match geometry");
    const int n = xs[0];
    const int ckk = g.in_c * g.kernel * g.kernel;
    const int ihw = g.out_h * g.out_w;  // spatial size of the transposed-conv input
    const std::size_t x_sz = static_cast<std::size_t>(g.out_c) * ihw;
    const std::size_t y_sz = static_cast<std::size_t>(g.in_c) * g.in_h * g.in_w;
    const int yhw = g.in_h * g.in_w;
    Tensor<T> y({n, g.in_c, g.in_h, g.in_w});
    std::vector<T> cols(static_cast<std::size_t>(ckk) * ihw);
    for (int s = 0; s < n; ++s) {
        gemm<T>(true, false, ckk, ihw, g.out_c, T(1), weight.value().data(), ckk,
                x.value().data() + s * x_sz, ihw, T(0), cols.data(), ihw);
        T* ys = y.data() + s * y_sz;
        col2im(cols.data(), g, ys);
        if (bias)
            for (int c = 0; c < g.in_c; ++c) {
                const T b = bias.value()[c];
                for (int p = 0; p < yhw; ++p) ys[c * yhw + p] += b;
            }
    }
    auto xn = x.node(), wn = weight.node();
    auto bn = bias ? bias.node() : nullptr;
    std::vector<std::shared_ptr<Node<T>>> parents{xn, wn};
    if (bn) parents.push_back(bn);
    return make_result<T>(std::move(y), parents,
                          [xn, wn, bn, g, n, ckk, ihw, x_sz, y_sz, yhw](Node<T>& self) {
        std::vector<T> cols(static_cast<std::size_t>(ckk) * ihw);
        for (int s = 0; s < n; ++s) {
            const T* dy = self.grad.data() + s * y_sz;
            if (xn->requires_grad || wn->requires_grad) im2col(dy, g, cols.data());
            if (xn->requires_grad)
                gemm<T>(false, false, g.out_c, ihw, ckk, T(1), wn->value.data(), ckk, cols.data(),
                        ihw, T(1), xn->grad_ref().data() + s * x_sz, ihw);
            if (wn->requires_grad)
                gemm<T>(false, true, g.out_c, ckk, ihw, T(1), xn->value.data() + s * x_sz, ihw,
                        cols.data(), ihw, T(1), wn->grad_ref().data(), ckk);
            if (bn && bn->requires_grad) {
                Tensor<T>& gb = bn->grad_ref();
                for (int c = 0; c < g.in_c; ++c) {
                    T acc = T(0);
                    for (int p = 0; p < yhw; ++p) acc += dy[c * yhw + p];
                    gb[c] += acc;
                }
            }
        }
    });
}

template <class T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        Tensor<T>* batch_mean, Tensor<T>* batch_var) {
    const ChannelLayout L = channel_layout(x.shape());
    const std::size_t m = L.n * L.inner;
    std::vector<T> mu(L.c, T(0)), var(L.c, T(0));
    const T* xv = x.value().data();
    for (std::size_t i = 0; i < L.n; ++i)
        for (std::size_t c = 0; c < L.c; ++c) {
            const T* p = xv + (i * L.c + c) * L.inner;
            for (std::size_t k = 0; k < L.inner; ++k) mu[c] += p[k];
        }
    for (auto& v : mu) v /= static_cast<T>(m);
    for (std::size_t i = 0; i < L.n; ++i)
        for (std::size_t c = 0; c < L.c; ++c) {
            const T* p = xv + (i * L.c + c) * L.inner;
            for (std::size_t k = 0; k < L.inner; ++k) {
                const T d = p[k] - mu[c];
                var[c] += d * d;
            }
        }
    for (auto& v : var) v /= static_cast<T>(m);
    std::vector<T> inv_std(L.c);
    for (std::size_t c = 0; c < L.c; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);

    Tensor<T> xhat(x.shape());
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < L.n; ++i)
        for (std::size_t c = 0; c < L.c; ++c) {
            const std::size_t off = (i * L.c + c) * L.inner;
            const T gm = gamma.value()[c], bt = beta.value()[c];
            for (std::size_t k = 0; k < L.inner; ++k) {
                const T h = (xv[off + k] - mu[c]) * inv_std[c];
                xhat[off + k] = h;
                y[off + k] = gm * h + bt;
            }
        }
    if (batch_mean) *batch_mean = Tensor<T>({static_cast<int>(L.c)}, mu);
    if (batch_var) *batch_var = Tensor<T>({static_cast<int>(L.c)}, var);

    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_result<T>(std::move(y), {xn, gn, bn},
                          [xn, gn, bn, L, m, xhat = std::move(xhat), inv_std](Node<T>& self) {
        std::vector<T> sum_dy(L.c, T(0)), sum_dy_xhat(L.c, T(0));
        for (std::size_t i = 0; i < L.n; ++i)
            for (std::size_t c = 0; c < L.c; ++c) {
                const std::size_t off = (i * L.c + c) * L.inner;
                for (std::size_t k = 0; k < L.inner; ++k) {
                    sum_dy[c] += self.grad[off + k];
                    sum_dy_xhat[c] += self.grad[off + k] * xhat[off + k];
                }
            }
        if (gn->requires_grad) {
            Tensor<T>& g = gn->grad_ref();
            for (std::size_t c = 0; c < L.c; ++c) g[c] += sum_dy_xhat[c];
        }
        if (bn->requires_grad) {
            Tensor<T>& g = bn->grad_ref();
            for (std::size_t c = 0; c < L.c; ++c) g[c] += sum_dy[c];
        }
        if (xn->requires_grad) {
            Tensor<T>& g = xn->grad_ref();
            const T inv_m = T(1) / static_cast<T>(m);
            for (std::size_t i = 0; i < L.n; ++i)
                for (std::size_t c = 0; c < L.c; ++c) {
                    const std::size_t off = (i * L.c + c) * L.inner;
                    const T k0 = gn->value[c] * inv_std[c];
                    for (std::size_t k = 0; k < L.inner; ++k)
                        g[off + k] += k0 * (self.grad[off + k] - inv_m * sum_dy[c] -
                                            xhat[off + k] * inv_m * sum_dy_xhat[c]);
                }
        }
    });
}

template <class T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                       const Tensor<T>& mean, const Tensor<T>& var, T eps) {
    const ChannelLayout L = channel_layout(x.shape());
    std::vector<T> inv_std(L.c);
    for (std::size_t c = 0; c < L.c; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);
    Tensor<T> y(x.shape());
    const T* xv = x.value().data();
    for (std::size_t i = 0; i < L.n; ++i)
        for (std::size_t c = 0; c < L.c; ++c) {
            const std::size_t off = (i * L.c + c) * L.inner;
            for (std::size_t k = 0; k < L.inner; ++k)
                y[off + k] = gamma.value()[c] * (xv[off + k] - mean[c]) * inv_std[c] + beta.value()[c];
        }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_result<T>(std::move(y), {xn, gn, bn}, [xn, gn, bn, L, mean, inv_std](Node<T>& self) {
        for (std::size_t i = 0; i < L.n; ++i)
            for (std::size_t c = 0; c < L.c; ++c) {
                const std::size_t off = (i * L.c + c) * L.inner;
                for (std::size_t k = 0; k < L.inner; ++k) {
                    const T dy = self.grad[off + k];
                    const T h = (xn->value[off + k] - mean[c]) * inv_std[c];
                    if (xn->requires_grad) xn->grad_ref()[off + k] += dy * gn->value[c] * inv_std[c];
                    if (gn->requires_grad) gn->grad_ref()[c] += dy * h;
                    if (bn->requires_grad) bn->grad_ref()[c] += dy;
                }
            }
    });
}

template <class T>
Var<T> dropout(const Var<T>& x, T rate, std::mt19937_64& rng) {
    if (rate <= T(0)) return x;
    Tensor<T> mask(x.shape());
    std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
    const T s = T(1) / (T(1) - rate);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? s : T(0);
    return mul_const(x, mask);
}

template <class T>
Var<T> log_softmax(const Var<T>& x) {
    if (x.shape().size() != 2) throw std::invalid_argument("log_softmax needs [N, K]");
    const int n = x.shape()[0], k = x.shape()[1];
    Tensor<T> y(x.shape());
    for (int i = 0; i < n; ++i) {
        const T* row = x.value().data() + i * k;
        const T mx = *std::max_element(row, row + k);
        T acc = T(0);
        for (int j = 0; j < k; ++j) acc += std::exp(row[j] - mx);
        const T lse = mx + std::log(acc);
        for (int j = 0; j < k; ++j) y[i * k + j] = row[j] - lse;
    }
    auto xn = x.node();
    return make_result<T>(std::move(y), {xn}, [xn, n, k](Node<T>& self) {
        Tensor<T>& g = xn->grad_ref();
        for (int i = 0; i < n; ++i) {
            T s = T(0);
            for (int j = 0; j < k; ++j) s += self.grad[i * k + j];
            for (int j = 0; j < k; ++j)
                g[i * k + j] += self.grad[i * k + j] - std::exp(self.value[i * k + j]) * s;
        }
    });
}

template <class T>
Var<T> nll_rows(const Var<T>& log_probs, std::span<const int> labels) {
    const int n = log_probs.shape().at(0), k = log_probs.shape().at(1);
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("nll_rows: label count does not match batch");
    std::vector<int> lab(labels.begin(), labels.end());
    Tensor<T> y({n});
    for (int i = 0; i < n; ++i) {
        if (lab[i] < 0 || lab[i] >= k) throw std::out_of_range("nll_rows: label out of range");
        y[i] = -log_probs.value()[i * k + lab[i]];
    }
    auto ln = log_probs.node();
    return make_result<T>(std::move(y), {ln}, [ln, lab, k](Node<T>& self) {
        Tensor<T>& g = ln->grad_ref();
        for (std::size_t i = 0; i < lab.size(); ++i) g[i * k + lab[i]] -= self.grad[i];
    });
}

template <class T>
Var<T> grad_reverse(const Var<T>& x, T lambda) {
    return unary(x, [](T v) { return v; }, [lambda](T, T) { return -lambda; });
}

template <class T>
Var<T> detach(const Var<T>& x) {
    return Var<T>::constant(x.value());
}

#define VCE_INSTANTIATE_AG(T)                                                                    \
    template class Var<T>;                                                                       \
    template Var<T> add(const Var<T>&, const Var<T>&);                                           \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                           \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                           \
    template Var<T> div(const Var<T>&, const Var<T>&);                                           \
    template Var<T> safe_div(const Var<T>&, const Var<T>&);                                      \
    template Var<T> scale(const Var<T>&, T);                                                     \
    template Var<T> add_scalar(const Var<T>&, T);                                                \
    template Var<T> mul_const(const Var<T>&, const Tensor<T>&);                                  \
    template Var<T> exp(const Var<T>&);                                                          \
    template Var<T> log(const Var<T>&);                                                          \
    template Var<T> square(const Var<T>&);                                                       \
    template Var<T> abs(const Var<T>&);                                                          \
    template Var<T> sigmoid(const Var<T>&);                                                      \
    template Var<T> leaky_relu(const Var<T>&, T);                                                \
    template Var<T> sum(const Var<T>&);                                                          \
    template Var<T> mean(const Var<T>&);                                                         \
    template Var<T> sum_rows(const Var<T>&);                                                     \
    template Var<T> reshape(const Var<T>&, Shape);                                               \
    template Var<T> concat_cols(const Var<T>&, const Var<T>&);                                   \
    template Var<T> concat_rows(const Var<T>&, const Var<T>&);                                   \
    template Var<T> slice_cols(const Var<T>&, int, int);                                         \
    template Var<T> gather_cols(const Var<T>&, std::span<const int>);                            \
    template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                    \
    template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                         \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, const ConvGeom&);        \
    template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&, const Var<T>&,                \
                                     const ConvGeom&);                                           \
    template Var<T> batch_norm_train(const Var<T>&, const Var<T>&, const Var<T>&, T,             \
                                     Tensor<T>*, Tensor<T>*);                                    \
    template Var<T> batch_norm_eval(const Var<T>&, const Var<T>&, const Var<T>&,                 \
                                    const Tensor<T>&, const Tensor<T>&, T);                      \
    template Var<T> dropout(const Var<T>&, T, std::mt19937_64&);                                 \
    template Var<T> log_softmax(const Var<T>&);                                                  \
    template Var<T> nll_rows(const Var<T>&, std::span<const int>);                               \
    template Var<T> grad_reverse(const Var<T>&, T);                                              \
    template Var<T> detach(const Var<T>&);

VCE_INSTANTIATE_AG(float)
VCE_INSTANTIATE_AG(double)

}  // namespace vce::ag
