// Central finite-difference verification of reverse-mode gradients.
// Always run at 64-bit precision; step sizes in [1e-6, 1e-4].

#pragma once

#include <functional>

#include "dehaze/ops.hpp"
#include "dehaze/tensor.hpp"

namespace dehaze {

// f rebuilds the scalar loss from the (shared) parameter tensors on every
// call. Returns the max over all parameter elements of
// |analytic - central difference| / max(|analytic|, |central|, denom_floor).
//
// denom_floor sets the gradient magnitude below which agreement is measured
// in absolute terms: central differences carry irreducible floating-point
// noise (~|loss|*1e-12 / step), so a tight relative comparison of gradients
// smaller than that noise floor only measures the noise. Elementwise checks
// of a single primitive keep the tight default; deep compositions should
// raise it to just above their FD noise floor.
inline double grad_check(const std::function<Tensor<double>(Tape<double>&)>& f,
                         std::vector<Tensor<double>> params, double step = 1e-5,
                         double denom_floor = 1e-12) {
    if (step < 1e-6 || step > 1e-4)
        throw ParamError("grad_check: step must lie in [1e-6, 1e-4]");
    if (denom_floor <= 0) throw ParamError("grad_check: denom_floor must be positive");
    for (auto& p : params) {
        p.ensure_grad();
        p.zero_grad();
    }
    Tape<double> tape;
    Tensor<double> loss = f(tape);
    tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) analytic.push_back(p.grad());

    auto eval = [&]() {
        Tape<double> t;
        Tensor<double> l = f(t);
        if (l.numel() != 1) throw ParamError("grad_check: f must return a scalar");
        return l[0];
    };

    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            const double orig = p[i];
            p[i] = orig + step;
            const double fp = eval();
            p[i] = orig - step;
            const double fm = eval();
            p[i] = orig;
            const double fd = (fp - fm) / (2.0 * step);
            const double a = analytic[pi][static_cast<std::size_t>(i)];
            const double denom = std::max({std::abs(a), std::abs(fd), denom_floor});
            max_rel = std::max(max_rel, std::abs(a - fd) / denom);
        }
    }
    return max_rel;
}

}  // namespace dehaze
