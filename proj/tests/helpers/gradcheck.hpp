#pragma once

// Central finite-difference gradient checking against the tape.

#include <cmath>
#include <functional>
#include <string>

#include "octfew/autodiff.hpp"

namespace octfew::testing {

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    int64_t checked = 0;
    std::string worst;  // "name[i]" of the worst element
};

// fn must build a scalar loss from the current values of `inputs` on the
// given tape. Each input is perturbed elementwise with step h and the
// analytic gradient is compared against (f(x+h) - f(x-h)) / 2h using
// relative error with an absolute floor.
inline GradCheckResult grad_check(
    const std::function<ad::Var(ad::Tape&)>& fn, const std::vector<ad::Var>& inputs,
    double h = 1e-5, double floor = 1e-6) {
    GradCheckResult res;

    // Analytic pass.
    for (auto& v : inputs) v->zero_grad();
    {
        ad::Tape tape;
        ad::Var loss = fn(tape);
        tape.backward(loss);
    }
    std::vector<Tensor> analytic;
    for (auto& v : inputs) {
        v->ensure_grad();
        analytic.push_back(v->grad);
    }

    for (size_t vi = 0; vi < inputs.size(); ++vi) {
        auto& v = inputs[vi];
        const int64_t n = v->value.numel();
        for (int64_t i = 0; i < n; ++i) {
            const size_t k = static_cast<size_t>(i);
            const double orig = v->value[k];

            v->value[k] = orig + h;
            double fp;
            {
                ad::Tape tape;
                fp = fn(tape)->value[0];
            }
            v->value[k] = orig - h;
            double fm;
            {
                ad::Tape tape;
                fm = fn(tape)->value[0];
            }
            v->value[k] = orig;

            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[vi][k];
            const double abs_err = std::abs(a - numeric);
            const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = (v->name.empty() ? "input" + std::to_string(vi) : v->name) + "[" +
                            std::to_string(i) + "]";
            }
            res.max_abs_err = std::max(res.max_abs_err, abs_err);
        }
    }
    return res;
}

}  // namespace octfew::testing
