#pragma once

#include "tokendial/autograd.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace th {

using tokendial::ag::Mat;
using tokendial::ag::Var;

inline Mat random_mat(int r, int c, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

// Max relative error between the tape gradient and central differences of f
// w.r.t. each input; f must return a 1x1 Var.
inline double grad_check(const std::vector<Mat>& inputs, const std::function<Var(const std::vector<Var>&)>& f,
                         double h = 1e-6) {
    std::vector<Var> vars;
    for (const auto& m : inputs) vars.push_back(Var::leaf(m, true));
    tokendial::ag::backward(f(vars));
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
            auto eval = [&](double delta) {
                std::vector<Var> vs;
                for (std::size_t j = 0; j < inputs.size(); ++j) {
                    Mat m = inputs[j];
                    if (j == k) m.data()[i] += delta;
                    vs.push_back(Var::constant(m));
                }
                return f(vs).item();
            };
            const double fd = (eval(h) - eval(-h)) / (2.0 * h);
            const double an = vars[k].has_grad() ? vars[k].grad().data()[i] : 0.0;
            const double err = std::abs(fd - an) / std::max(1.0, std::abs(fd) + std::abs(an));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace th
