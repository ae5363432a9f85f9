#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "tca/errors.hpp"

namespace tca {

enum class OptimizerKind { adaptive_moments_decoupled_decay, plain_gradient_descent };

struct OptimizerParams {
    double learning_rate = 0.005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with decoupled weight decay:
///   p <- p * (1 - lr * wd)
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
class AdamW {
public:
    explicit AdamW(std::size_t n, OptimizerParams params = {})
        : params_(params), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::span<double> params, std::span<const double> grad) {
        if (params.size() != m_.size() || grad.size() != m_.size()) {
            throw InvalidArgument("AdamW::step: size mismatch");
        }
        ++t_;
        const double lr = params_.learning_rate;
        const double bc1 = 1.0 - std::pow(params_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(params_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i] *= 1.0 - lr * params_.weight_decay;
            m_[i] = params_.beta1 * m_[i] + (1.0 - params_.beta1) * grad[i];
            v_[i] = params_.beta2 * v_[i] + (1.0 - params_.beta2) * grad[i] * grad[i];
            const double m_hat = m_[i] / bc1;
            const double v_hat = v_[i] / bc2;
            params[i] -= lr * m_hat / (std::sqrt(v_hat) + params_.epsilon);
        }
    }

    std::size_t steps() const noexcept { return t_; }

private:
    OptimizerParams params_;
    std::vector<double> m_;
    std::vector<double> v_;
    std::size_t t_ = 0;
};

inline void gradient_descent_step(std::span<double> params, std::span<const double> grad, double lr) {
    if (params.size() != grad.size()) {
        throw InvalidArgument("gradient_descent_step: size mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i] -= lr * grad[i];
    }
}

}  // namespace tca
