#pragma once

// Declarative layer stacks. A NetworkSpec is a list of LayerSpec entries
// (the same vocabulary as the architecture tables: Conv2D, TConv2D, FC,
// batch normalisation, leaky rectifier, dropout, softmax, sigmoid), built
// into a Sequential with shape inference at construction time.

#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "vce/core/autograd.hpp"

namespace vce::nn {

enum class LayerKind { conv, tconv, fc, batch_norm, leaky_relu, sigmoid, softmax, dropout, reshape, flatten };

struct LayerSpec {
    LayerKind kind = LayerKind::fc;
    int kernel = 0;
    int stride = 1;
    int units = 0;  // channels for conv/tconv, width for fc
    double rate = 0.0;
    double slope = 0.1;
    Shape shape;  // reshape target (per sample)

    static LayerSpec conv(int kernel, int stride, int channels);
    static LayerSpec tconv(int kernel, int stride, int channels);
    static LayerSpec fc(int width);
    static LayerSpec bn();
    static LayerSpec lrelu(double slope = 0.1);
    static LayerSpec sigmoid_out();
    static LayerSpec softmax_out();
    static LayerSpec drop(double rate);
    static LayerSpec reshape_to(Shape shape);
    static LayerSpec flatten_all();

    bool operator==(const LayerSpec&) const = default;
};

using NetworkSpec = std::vector<LayerSpec>;

nlohmann::json spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const nlohmann::json& j);
std::string layer_name(LayerKind kind);

// Training mode uses batch statistics and active dropout; evaluation mode
// uses running statistics and no dropout.
enum class Mode { train, eval };

struct RunContext {
    Mode mode = Mode::eval;
    std::mt19937_64* rng = nullptr;
    bool update_running_stats = true;
};

template <class T>
struct NamedTensor {
    std::string name;
    Tensor<T>* tensor;
};

template <class T>
class Sequential {
public:
    Sequential() = default;
    // input_shape is per sample (e.g. {1, 32, 32} or {8}).
    Sequential(std::string name, NetworkSpec spec, Shape input_shape, std::mt19937_64& init_rng);

    ag::Var<T> forward(const ag::Var<T>& x, const RunContext& ctx);

    const std::string& name() const { return name_; }
    const NetworkSpec& spec() const { return spec_; }
    const Shape& input_shape() const { return input_shape_; }
    const Shape& output_shape() const { return output_shape_; }

    std::vector<ag::Var<T>> parameters() const;
    // Trainable tensors followed by batch-norm running statistics.
    std::vector<NamedTensor<T>> state();
    void set_trainable(bool trainable);
    std::size_t parameter_count() const;

private:
    struct Built {
        LayerSpec spec;
        Shape in, out;
        ag::ConvGeom geom;
        ag::Var<T> weight, bias;
        Tensor<T> running_mean, running_var;
    };

    std::string name_;
    NetworkSpec spec_;
    Shape input_shape_, output_shape_;
    std::vector<Built> layers_;
};

// BatchNorm constants (running-average momentum and variance epsilon).
inline constexpr double kBatchNormMomentum = 0.99;
inline constexpr double kBatchNormEps = 1e-3;

}  // namespace vce::nn
