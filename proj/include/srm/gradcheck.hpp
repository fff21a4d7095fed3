#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "srm/tensor.hpp"

namespace srm {

struct GradCheckResult {
    double max_rel_error = 0.0;
    bool finite = true;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::string message;

    bool passed(double tol) const { return finite && max_rel_error < tol; }
};

using ScalarFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares reverse-mode gradients with central differences on every element
/// of every input. Inputs are perturbed in place and restored. Error per
/// element is |a - fd| / max(|a|, |fd|, 1e-8).
inline GradCheckResult grad_check(const ScalarFn& fn, std::vector<Tensor<double>> inputs, double eps = 1e-6) {
    GradCheckResult result;
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }
    Tensor<double> loss = fn(inputs);
    if (loss.numel() != 1 || !std::isfinite(loss.item())) {
        result.finite = false;
        result.message = "loss is not a finite scalar";
        return result;
    }
    backward(loss);

    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs) {
        if (in.has_grad()) {
            analytic.emplace_back(in.grad().begin(), in.grad().end());
        } else {
            analytic.emplace_back(in.numel(), 0.0);
        }
    }

    NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto values = inputs[k].mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double up = fn(inputs).item();
            values[i] = saved - eps;
            const double down = fn(inputs).item();
            values[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                result.finite = false;
                result.message = "non-finite loss while perturbing input " + std::to_string(k);
                return result;
            }
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[k][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double err = std::abs(a - numeric) / denom;
            if (err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst_input = k;
                result.worst_index = i;
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
        }
    }
    for (auto& in : inputs) in.zero_grad();
    return result;
}

}  // namespace srm
