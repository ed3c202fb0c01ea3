#include "vce/core/optim.hpp"

#include <cmath>

namespace vce::optim {

template <class T>
Adam<T>::Adam(std::vector<ag::Var<T>> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
        m_.emplace_back(p.shape());
        v_.emplace_back(p.shape());
    }
}

template <class T>
void Adam<T>::step() {
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const T lr = static_cast<T>(config_.learning_rate);
    const T eps = static_cast<T>(config_.epsilon);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p.node()->grad.size()) continue;
        Tensor<T>& w = p.mutable_value();
        const Tensor<T>& g = p.grad();
        Tensor<T>& m = m_[i];
        Tensor<T>& v = v_[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = static_cast<T>(b1) * m[k] + static_cast<T>(1.0 - b1) * g[k];
            v[k] = static_cast<T>(b2) * v[k] + static_cast<T>(1.0 - b2) * g[k] * g[k];
            const T mhat = m[k] / static_cast<T>(c1);
            const T vhat = v[k] / static_cast<T>(c2);
            w[k] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
    zero_grad();
}

template <class T>
void Adam<T>::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

template class Adam<float>;
template class Adam<double>;

}  // namespace vce::optim
