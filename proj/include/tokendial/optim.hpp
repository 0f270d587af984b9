#pragma once

#include "tokendial/autograd.hpp"

#include <cmath>
#include <vector>

namespace tokendial {

// Adam with decoupled weight decay. Moments are kept per parameter, in order.
struct AdamW {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    void step(std::vector<ag::Var>& params) {
        if (m_.empty()) {
            for (auto& p : params) {
                m_.push_back(ag::Mat::Zero(p.rows(), p.cols()));
                v_.push_back(ag::Mat::Zero(p.rows(), p.cols()));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, t_);
        const double bc2 = 1.0 - std::pow(beta2, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            ag::Var& p = params[i];
            if (!p.has_grad()) continue;
            const ag::Mat& g = p.grad();
            m_[i] = beta1 * m_[i] + (1.0 - beta1) * g;
            v_[i] = beta2 * v_[i] + (1.0 - beta2) * g.cwiseProduct(g);
            ag::Mat& w = p.mutable_value();
            if (weight_decay != 0.0) w *= (1.0 - lr * weight_decay);
            w.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps);
        }
    }

    int steps_taken() const { return t_; }

private:
    std::vector<ag::Mat> m_, v_;
    int t_ = 0;
};

// Global-norm gradient clipping; returns the pre-clip norm.
inline double clip_grad_norm(std::vector<ag::Var>& params, double max_norm) {
    double sq = 0.0;
    for (auto& p : params)
        if (p.has_grad()) sq += p.grad().squaredNorm();
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / (norm + 1e-12);
        for (auto& p : params)
            if (p.has_grad()) p.mutable_grad() *= s;
    }
    return norm;
}

}  // namespace tokendial
