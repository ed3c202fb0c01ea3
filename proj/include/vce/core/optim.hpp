#pragma once

#include <cstdint>
#include <vector>

#include "vce/core/autograd.hpp"

namespace vce::optim {

struct AdamConfig {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-4;
};

// Adam over a fixed parameter list. Moments live alongside the parameters in
// registration order, so checkpoints can store them positionally.
template <class T>
class Adam {
public:
    Adam() = default;
    Adam(std::vector<ag::Var<T>> params, AdamConfig config);

    // Applies one update from the accumulated gradients, then clears them.
    void step();
    void zero_grad();

    const AdamConfig& config() const { return config_; }
    std::int64_t steps() const { return t_; }
    void set_steps(std::int64_t t) { t_ = t; }
    std::vector<Tensor<T>>& first_moments() { return m_; }
    std::vector<Tensor<T>>& second_moments() { return v_; }
    const std::vector<ag::Var<T>>& params() const { return params_; }

private:
    std::vector<ag::Var<T>> params_;
    std::vector<Tensor<T>> m_, v_;
    AdamConfig config_;
    std::int64_t t_ = 0;
};

}  // namespace vce::optim
