#include "minidrive/planner.hpp"

#include <algorithm>
#include <stdexcept>

namespace minidrive::planner {

NormalizationRanges compute_ranges(const std::vector<const sim::Scenario*>& train_set) {
    if (train_set.empty()) throw std::invalid_argument("compute_ranges: empty training set");
    double x_lo = 1e300, x_hi = -1e300, y_lo = 1e300, y_hi = -1e300;
    for (const sim::Scenario* scn : train_set) {
        for (const auto& p : scn->ego_future) {
            x_lo = std::min(x_lo, p.x);
            x_hi = std::max(x_hi, p.x);
            y_lo = std::min(y_lo, p.y);
            y_hi = std::max(y_hi, p.y);
        }
    }
    auto pad = [](double& lo, double& hi) {
        const double span = hi - lo;
        lo -= 0.05 * span;
        hi += 0.05 * span;
        // minimum half-span so degenerate coordinates cannot blow up the map
        const double mid = 0.5 * (lo + hi);
        const double half = std::max(0.5 * (hi - lo), 1.0);
        lo = mid - half;
        hi = mid + half;
    };
    pad(x_lo, x_hi);
    pad(y_lo, y_hi);
    NormalizationRanges r;
    r.x_min = x_lo;
    r.x_max = x_hi;
    r.y_min = y_lo;
    r.y_max = y_hi;
    return r;
}

}  // namespace minidrive::planner
