#pragma once

// Shared test-only helpers. The finite-difference oracle lives here, not in
// the library, so gradient checks stay independent of the tape's backward
// path.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "minidrive/nn.hpp"
#include "minidrive/tape.hpp"
#include "minidrive/tensor.hpp"

namespace testutil {

/// Central finite differences of `loss_fn` for every trainable parameter in
/// `ps`, compared against gradients already stored in the params. `loss_fn`
/// must rebuild the forward pass from scratch on each call. Returns the
/// worst relative error, rel = |fd-an| / max(|fd|,|an|,1).
template <typename S>
double max_grad_rel_error(minidrive::ParamStore<S>& ps, const std::function<S()>& loss_fn, double h = 1e-5,
                          std::string* worst_name = nullptr) {
    double worst = 0.0;
    for (minidrive::Param<S>* p : ps.params()) {
        if (!p->trainable) continue;
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
            const S orig = p->value[i];
            p->value[i] = orig + static_cast<S>(h);
            const double fp = static_cast<double>(loss_fn());
            p->value[i] = orig - static_cast<S>(h);
            const double fm = static_cast<double>(loss_fn());
            p->value[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = static_cast<double>(p->grad[i]);
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1.0});
            if (rel > worst) {
                worst = rel;
                if (worst_name) *worst_name = p->name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return worst;
}

/// `forward(true)` must build a fresh tape, run backward, and leave analytic
/// gradients in `ps`; `forward(false)` only evaluates the loss.
template <typename S>
double check_gradients(minidrive::ParamStore<S>& ps, const std::function<S(bool)>& forward, double h = 1e-5,
                       std::string* worst_name = nullptr) {
    ps.zero_grad();
    (void)forward(true);
    return max_grad_rel_error<S>(ps, [&]() { return forward(false); }, h, worst_name);
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0}); }

}  // namespace testutil
