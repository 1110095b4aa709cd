#pragma once

// Shared synthetic data for unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <vector>

#include "lowent/rng.hpp"
#include "lowent/tagger.hpp"

namespace lowent::fixtures {

/// Gaussian features whose entropy target is 0.6 - 0.5 x0, so the
/// low-entropy label at tau = 0.6 is exactly the sign of the first feature.
inline std::vector<TaggerSample> separable_samples(std::size_t n, std::size_t dim, std::uint64_t seed) {
    RngState rng = substream(seed, "separable");
    std::vector<TaggerSample> out(n);
    for (auto& s : out) {
        s.features.resize(dim);
        for (auto& x : s.features) x = next_normal(rng);
        s.entropy = std::max(0.0, 0.6 - 0.5 * s.features[0]);
    }
    return out;
}

/// Max relative error between the analytic gradient and central differences.
inline double gradient_check(const MlpHead& head, const std::vector<FeatureVector>& xs, const std::vector<double>& ys,
                             double step = 1e-6) {
    std::vector<double> grad, scratch;
    head.loss_and_gradient(xs, ys, grad);
    MlpHead probe = head;
    double worst = 0.0;
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const double keep = probe.params()[i];
        probe.params()[i] = keep + step;
        const double up = probe.loss_and_gradient(xs, ys, scratch);
        probe.params()[i] = keep - step;
        const double down = probe.loss_and_gradient(xs, ys, scratch);
        probe.params()[i] = keep;
        const double numeric = (up - down) / (2.0 * step);
        const double denom = std::max(1e-7, std::abs(numeric) + std::abs(grad[i]));
        worst = std::max(worst, std::abs(numeric - grad[i]) / denom);
    }
    return worst;
}

}  // namespace lowent::fixtures
