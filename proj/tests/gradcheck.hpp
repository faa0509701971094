#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cafe/autograd.hpp"

namespace testutil {

// Largest relative error between analytic and central-difference gradients
// of a scalar loss with respect to `leaf`, normalised by max(|a|, |n|, floor).
inline double gradcheck(cafe::ag::Var<double>& leaf, const std::function<cafe::ag::Var<double>()>& loss,
                        double h = 1e-6, double floor = 1e-6) {
    leaf.zero_grad();
    loss().backward();
    const cafe::Tensor<double> analytic = leaf.grad();
    double worst = 0;
    auto& v = leaf.mutable_value();
    for (std::int64_t i = 0; i < v.size(); ++i) {
        const double keep = v[i];
        double lp, lm;
        {
            cafe::ag::NoGradGuard ng;
            v[i] = keep + h;
            lp = loss().value()[0];
            v[i] = keep - h;
            lm = loss().value()[0];
        }
        v[i] = keep;
        const double numeric = (lp - lm) / (2 * h);
        const double scale = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
        worst = std::max(worst, std::abs(numeric - analytic[i]) / scale);
    }
    return worst;
}

// Relative error ||a - n|| / max(||a||, ||n||) over every entry of every
// leaf, with central differences. Robust to isolated entries near ReLU kinks.
inline double gradcheck_normwise(std::vector<cafe::ag::Var<double>> leaves,
                                 const std::function<cafe::ag::Var<double>()>& loss, double h = 1e-6) {
    for (auto& l : leaves) l.zero_grad();
    loss().backward();
    double diff = 0, na = 0, nn = 0;
    for (auto& leaf : leaves) {
        const cafe::Tensor<double> analytic = leaf.grad();
        auto& v = leaf.mutable_value();
        for (std::int64_t i = 0; i < v.size(); ++i) {
            const double keep = v[i];
            double lp, lm;
            {
                cafe::ag::NoGradGuard ng;
                v[i] = keep + h;
                lp = loss().value()[0];
                v[i] = keep - h;
                lm = loss().value()[0];
            }
            v[i] = keep;
            const double numeric = (lp - lm) / (2 * h);
            diff += (numeric - analytic[i]) * (numeric - analytic[i]);
            na += analytic[i] * analytic[i];
            nn += numeric * numeric;
        }
    }
    const double scale = std::sqrt(std::max(na, nn));
    return scale > 0 ? std::sqrt(diff) / scale : 0.0;
}

inline cafe::Tensor<double> random_tensor(cafe::Shape shape, unsigned seed, double lo = -1, double hi = 1) {
    std::mt19937 gen(seed);
    std::uniform_real_distribution<double> d(lo, hi);
    cafe::Tensor<double> t(std::move(shape));
    for (auto& x : t.storage()) x = d(gen);
    return t;
}

}  // namespace testutil
