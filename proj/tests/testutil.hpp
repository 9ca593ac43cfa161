#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cape/rng.hpp"
#include "cape/tensor.hpp"

namespace testutil {

inline double rel_err(double a, double b, double floor_mag) {
    return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), floor_mag);
}

// Central finite differences of a scalar-valued closure with respect to
// one tensor's entries. The closure must recompute the forward pass from
// the tensor's current values. Returns the max relative error against the
// tensor's recorded analytic gradient.
inline double fd_check(cape::Tensor& leaf, const std::function<double()>& loss_fn,
                       double h = 1e-5, double floor_mag = 1e-3) {
    double worst = 0.0;
    for (std::size_t i = 0; i < leaf.data().size(); ++i) {
        const double saved = leaf.data()[i];
        leaf.data()[i] = saved + h;
        const double up = loss_fn();
        leaf.data()[i] = saved - h;
        const double down = loss_fn();
        leaf.data()[i] = saved;
        const double fd = (up - down) / (2.0 * h);
        worst = std::max(worst, rel_err(leaf.grad()[i], fd, floor_mag));
    }
    return worst;
}

inline std::vector<double> random_vec(cape::Rng& rng, std::size_t n, double lo = -2.0,
                                      double hi = 2.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

}  // namespace testutil
