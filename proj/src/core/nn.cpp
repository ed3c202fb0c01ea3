#include "vce/core/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace vce::nn {

LayerSpec LayerSpec::conv(int kernel, int stride, int channels) {
    LayerSpec s;
    s.kind = LayerKind::conv;
    s.kernel = kernel;
    s.stride = stride;
    s.units = channels;
    return s;
}

LayerSpec LayerSpec::tconv(int kernel, int stride, int channels) {
    LayerSpec s = conv(kernel, stride, channels);
    s.kind = LayerKind::tconv;
    return s;
}

LayerSpec LayerSpec::fc(int width) {
    LayerSpec s;
    s.kind = LayerKind::fc;
    s.units = width;
    return s;
}

LayerSpec LayerSpec::bn() {
    LayerSpec s;
    s.kind = LayerKind::batch_norm;
    return s;
}

LayerSpec LayerSpec::lrelu(double slope) {
    LayerSpec s;
    s.kind = LayerKind::leaky_relu;
    s.slope = slope;
    return s;
}

LayerSpec LayerSpec::sigmoid_out() {
    LayerSpec s;
    s.kind = LayerKind::sigmoid;
    return s;
}

LayerSpec LayerSpec::softmax_out() {
    LayerSpec s;
    s.kind = LayerKind::softmax;
    return s;
}

LayerSpec LayerSpec::drop(double rate) {
    LayerSpec s;
    s.kind = LayerKind::dropout;
    s.rate = rate;
    return s;
}

LayerSpec LayerSpec::reshape_to(Shape shape) {
    LayerSpec s;
    s.kind = LayerKind::reshape;
    s.shape = std::move(shape);
    return s;
}

LayerSpec LayerSpec::flatten_all() {
    LayerSpec s;
    s.kind = LayerKind::flatten;
    return s;
}

std::string layer_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::conv: return "conv";
        case LayerKind::tconv: return "tconv";
        case LayerKind::fc: return "fc";
        case LayerKind::batch_norm: return "bn";
        case LayerKind::leaky_relu: return "lrelu";
        case LayerKind::sigmoid: return "sigmoid";
        case LayerKind::softmax: return "softmax";
        case LayerKind::dropout: return "dropout";
        case LayerKind::reshape: return "reshape";
        case LayerKind::flatten: return "flatten";
    }
    return "?";
}

namespace {

LayerKind kind_from_name(const std::string& name) {
    for (LayerKind k : {LayerKind::conv, LayerKind::tconv, LayerKind::fc, LayerKind::batch_norm,
                        LayerKind::leaky_relu, LayerKind::sigmoid, LayerKind::softmax,
                        LayerKind::dropout, LayerKind::reshape, LayerKind::flatten})
        if (layer_name(k) == name) return k;
    throw std::invalid_argument("unknown layer kind '" + name + "'");
}

template <class T>
Tensor<T> glorot(Shape shape, int fan_in, int fan_out, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
    return t;
}

}  // namespace

nlohmann::json spec_to_json(const NetworkSpec& spec) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& l : spec) {
        nlohmann::json j{{"layer", layer_name(l.kind)}};
        switch (l.kind) {
            case LayerKind::conv:
            case LayerKind::tconv:
                j["kernel"] = l.kernel;
                j["stride"] = l.stride;
                j["channels"] = l.units;
                break;
            case LayerKind::fc: j["units"] = l.units; break;
            case LayerKind::leaky_relu: j["slope"] = l.slope; break;
            case LayerKind::dropout: j["rate"] = l.rate; break;
            case LayerKind::reshape: j["shape"] = l.shape; break;
            default: break;
        }
        arr.push_back(std::move(j));
    }
    return arr;
}

NetworkSpec spec_from_json(const nlohmann::json& j) {
    NetworkSpec spec;
    for (const auto& e : j) {
        const LayerKind kind = kind_from_name(e.at("layer").get<std::string>());
        switch (kind) {
            case LayerKind::conv:
                spec.push_back(LayerSpec::conv(e.at("kernel"), e.at("stride"), e.at("channels")));
                break;
            case LayerKind::tconv:
                spec.push_back(LayerSpec::tconv(e.at("kernel"), e.at("stride"), e.at("channels")));
                break;
            case LayerKind::fc: spec.push_back(LayerSpec::fc(e.at("units"))); break;
            case LayerKind::batch_norm: spec.push_back(LayerSpec::bn()); break;
            case LayerKind::leaky_relu: spec.push_back(LayerSpec::lrelu(e.value("slope", 0.1))); break;
            case LayerKind::sigmoid: spec.push_back(LayerSpec::sigmoid_out()); break;
            case LayerKind::softmax: spec.push_back(LayerSpec::softmax_out()); break;
            case LayerKind::dropout: spec.push_back(LayerSpec::drop(e.at("rate"))); break;
            case LayerKind::reshape:
                spec.push_back(LayerSpec::reshape_to(e.at("shape").get<Shape>()));
                break;
            case LayerKind::flatten: spec.push_back(LayerSpec::flatten_all()); break;
        }
    }
    return spec;
}

template <class T>
Sequential<T>::Sequential(std::string name, NetworkSpec spec, Shape input_shape,
                          std::mt19937_64& init_rng)
    : name_(std::move(name)), spec_(std::move(spec)), input_shape_(std::move(input_shape)) {
    Shape cur = input_shape_;
    for (std::size_t i = 0; i < spec_.size(); ++i) {
        const LayerSpec& ls = spec_[i];
        const std::string where = name_ + " layer " + std::to_string(i) + " (" + layer_name(ls.kind) + ")";
        Built b;
        b.spec = ls;
        b.in = cur;
        switch (ls.kind) {
            case LayerKind::conv:
            case LayerKind::tconv: {
                if (cur.size() != 3)
                    throw std::invalid_argument(where + ": expects C x H x W input, got " + shape_str(cur));
                if (ls.kernel < 1 || ls.stride < 1 || ls.units < 1)
                    throw std::invalid_argument(where + ": invalid kernel/stride/channels");
                const int k = ls.kernel;
                if (ls.kind == LayerKind::conv) {
                    b.geom = ag::ConvGeom::same(cur[0], cur[1], cur[2], ls.units, k, ls.stride);
                    b.out = {ls.units, b.geom.out_h, b.geom.out_w};
                    b.weight = ag::Var<T>::parameter(
                        glorot<T>({ls.units, cur[0], k, k}, cur[0] * k * k, ls.units * k * k, init_rng));
                } else {
                    // geometry of the convolution this layer transposes
                    b.geom = ag::ConvGeom::same(ls.units, cur[1] * ls.stride, cur[2] * ls.stride,
                                                cur[0], k, ls.stride);
                    if (b.geom.out_h != cur[1] || b.geom.out_w != cur[2])
                        throw std::invalid_argument(where + ": inconsistent transposed geometry");
                    b.out = {ls.units, cur[1] * ls.stride, cur[2] * ls.stride};
                    b.weight = ag::Var<T>::parameter(
                        glorot<T>({cur[0], ls.units, k, k}, cur[0] * k * k, ls.units * k * k, init_rng));
                }
                b.bias = ag::Var<T>::parameter(Tensor<T>({ls.units}));
                break;
            }
            case LayerKind::fc: {
                if (cur.size() != 1)
                    throw std::invalid_argument(where + ": expects a flat input, got " + shape_str(cur));
                if (ls.units < 1) throw std::invalid_argument(where + ": width must be positive");
                b.out = {ls.units};
                b.weight = ag::Var<T>::parameter(glorot<T>({ls.units, cur[0]}, cur[0], ls.units, init_rng));
                b.bias = ag::Var<T>::parameter(Tensor<T>({ls.units}));
                break;
            }
            case LayerKind::batch_norm: {
                b.out = cur;
                b.weight = ag::Var<T>::parameter(Tensor<T>({cur[0]}, T(1)));
                b.bias = ag::Var<T>::parameter(Tensor<T>({cur[0]}));
                b.running_mean = Tensor<T>({cur[0]});
                b.running_var = Tensor<T>({cur[0]}, T(1));
                break;
            }
            case LayerKind::softmax:
                if (cur.size() != 1)
                    throw std::invalid_argument(where + ": expects a flat input, got " + shape_str(cur));
                b.out = cur;
                break;
            case LayerKind::reshape:
                if (shape_numel(ls.shape) != shape_numel(cur))
                    throw std::invalid_argument(where + ": cannot reshape " + shape_str(cur) + " to " +
                                                shape_str(ls.shape));
                b.out = ls.shape;
                break;
            case LayerKind::flatten:
                b.out = {static_cast<int>(shape_numel(cur))};
                break;
            default:
                b.out = cur;
                break;
        }
        cur = b.out;
        layers_.push_back(std::move(b));
    }
    output_shape_ = cur;
}

template <class T>
ag::Var<T> Sequential<T>::forward(const ag::Var<T>& x, const RunContext& ctx) {
    const Shape& xs = x.shape();
    if (xs.size() != input_shape_.size() + 1 || !std::equal(input_shape_.begin(), input_shape_.end(), xs.begin() + 1))
        throw std::invalid_argument(name_ + ": input " + shape_str(xs) + " does not match " +
                                    shape_str(input_shape_));
    const int n = xs[0];
    ag::Var<T> h = x;
    for (auto& b : layers_) {
        switch (b.spec.kind) {
            case LayerKind::conv: h = ag::conv2d(h, b.weight, b.bias, b.geom); break;
            case LayerKind::tconv: h = ag::conv_transpose2d(h, b.weight, b.bias, b.geom); break;
            case LayerKind::fc: h = ag::linear(h, b.weight, b.bias); break;
            case LayerKind::batch_norm:
                if (ctx.mode == Mode::train) {
                    Tensor<T> mu, var;
                    h = ag::batch_norm_train(h, b.weight, b.bias, T(kBatchNormEps), &mu, &var);
                    if (ctx.update_running_stats) {
                        const T m = T(kBatchNormMomentum);
                        for (std::size_t c = 0; c < mu.size(); ++c) {
                            b.running_mean[c] = m * b.running_mean[c] + (T(1) - m) * mu[c];
                            b.running_var[c] = m * b.running_var[c] + (T(1) - m) * var[c];
                        }
                    }
                } else {
                    h = ag::batch_norm_eval(h, b.weight, b.bias, b.running_mean, b.running_var,
                                            T(kBatchNormEps));
                }
                break;
            case LayerKind::leaky_relu: h = ag::leaky_relu(h, T(b.spec.slope)); break;
            case LayerKind::sigmoid: h = ag::sigmoid(h); break;
            case LayerKind::softmax: h = ag::log_softmax(h); break;
            case LayerKind::dropout:
                if (ctx.mode == Mode::train) {
                    if (!ctx.rng) throw std::logic_error(name_ + ": dropout in training mode needs an rng");
                    h = ag::dropout(h, T(b.spec.rate), *ctx.rng);
                }
                break;
            case LayerKind::reshape:
            case LayerKind::flatten: {
                Shape s{n};
                s.insert(s.end(), b.out.begin(), b.out.end());
                h = ag::reshape(h, s);
                break;
            }
        }
    }
    return h;
}

template <class T>
std::vector<ag::Var<T>> Sequential<T>::parameters() const {
    std::vector<ag::Var<T>> out;
    for (const auto& b : layers_) {
        if (b.weight) out.push_back(b.weight);
        if (b.bias) out.push_back(b.bias);
    }
    return out;
}

template <class T>
std::vector<NamedTensor<T>> Sequential<T>::state() {
    std::vector<NamedTensor<T>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        auto& b = layers_[i];
        const std::string prefix = name_ + "." + std::to_string(i) + ".";
        const bool bn = b.spec.kind == LayerKind::batch_norm;
        if (b.weight) out.push_back({prefix + (bn ? "gamma" : "weight"), &b.weight.mutable_value()});
        if (b.bias) out.push_back({prefix + (bn ? "beta" : "bias"), &b.bias.mutable_value()});
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        auto& b = layers_[i];
        if (b.spec.kind != LayerKind::batch_norm) continue;
        const std::string prefix = name_ + "." + std::to_string(i) + ".";
        out.push_back({prefix + "running_mean", &b.running_mean});
        out.push_back({prefix + "running_var", &b.running_var});
    }
    return out;
}

template <class T>
void Sequential<T>::set_trainable(bool trainable) {
    for (auto& p : parameters()) p.set_requires_grad(trainable);
}

template <class T>
std::size_t Sequential<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.size();
    return n;
}

template class Sequential<float>;
template class Sequential<double>;

}  // namespace vce::nn
