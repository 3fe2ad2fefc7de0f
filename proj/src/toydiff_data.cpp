#include <cmath>
#include <stdexcept>

#include "mpqdm2/toydiff.hpp"

namespace mpqdm2 {

namespace {

constexpr double kPi = 3.14159265358979323846;

// The raw moon pair has mean exactly (0.5, 0.25); recentering keeps the
// population mean at the origin regardless of the draw.
void moon_point(Rng& rng, double* out) {
    const double theta = rng.uniform(0.0, kPi);
    double x, y;
    if (rng.below(2) == 0) {
        x = std::cos(theta);
        y = std::sin(theta);
    } else {
        x = 1.0 - std::cos(theta);
        y = 0.5 - std::sin(theta);
    }
    out[0] = 1.2 * (x - 0.5 + 0.05 * rng.normal());
    out[1] = 1.2 * (y - 0.25 + 0.05 * rng.normal());
}

void mixture8_point(Rng& rng, double* out) {
    const double angle = 2.0 * kPi * double(rng.below(8)) / 8.0;
    out[0] = 1.5 * std::cos(angle) + 0.05 * rng.normal();
    out[1] = 1.5 * std::sin(angle) + 0.05 * rng.normal();
}

}  // namespace

Tensor2D sample_dataset(DatasetSpec spec, std::size_t n, Rng& rng) {
    Tensor2D out(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
        double* p = out.data.data() + 2 * i;
        if (spec == DatasetSpec::two_moons)
            moon_point(rng, p);
        else
            mixture8_point(rng, p);
    }
    return out;
}

double energy_distance(const Tensor2D& x, const Tensor2D& y) {
    if (x.cols != y.cols) throw std::invalid_argument("energy_distance: dimension mismatch");
    if (x.rows == 0 || y.rows == 0) throw std::invalid_argument("energy_distance: empty set");
    const std::size_t d = x.cols;
    auto pair_mean = [d](const Tensor2D& a, const Tensor2D& b) {
        double acc = 0.0;
        for (std::size_t i = 0; i < a.rows; ++i)
            for (std::size_t j = 0; j < b.rows; ++j) {
                double sq = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    const double diff = a.at(i, c) - b.at(j, c);
                    sq += diff * diff;
                }
                acc += std::sqrt(sq);
            }
        return acc / (double(a.rows) * double(b.rows));
    };
    return 2.0 * pair_mean(x, y) - pair_mean(x, x) - pair_mean(y, y);
}

}  // namespace mpqdm2
