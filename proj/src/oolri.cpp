#include "mpqdm2/oolri.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "mpqdm2/numkit.hpp"

namespace mpqdm2 {

Tensor2D quant_residual(const Tensor2D& w, const LayerQuantState& state) {
    if (state.has_adapter())
        throw std::invalid_argument("quant_residual: expects the bare quantizer state");
    const Tensor2D deq = dequantized_weight(state, w);
    Tensor2D e(w.rows, w.cols);
    for (std::size_t i = 0; i < w.data.size(); ++i) e.data[i] = w.data[i] - deq.data[i];
    return e;
}

AdapterInit init_adapter(const Tensor2D& e, std::size_t r) {
    const std::size_t k = std::min(e.rows, e.cols);
    if (r < 1 || r > k) throw std::invalid_argument("init_adapter: rank out of range");
    const SvdResult svd_e = svd(e);
    AdapterInit out;
    out.rank = r;
    out.l1 = Tensor2D(e.rows, r);
    out.l2 = Tensor2D(r, e.cols);
    for (std::size_t i = 0; i < r; ++i) {
        const double root = std::sqrt(svd_e.s[i]);
        for (std::size_t m = 0; m < e.rows; ++m) out.l1.at(m, i) = root * svd_e.u.at(m, i);
        for (std::size_t n = 0; n < e.cols; ++n) out.l2.at(i, n) = root * svd_e.v.at(n, i);
    }
    out.residual_norm_before = frobenius_norm(e);
    out.residual_norm_after = frobenius_distance(e, matmul(out.l1, out.l2));
    return out;
}

namespace {

double objective(const Tensor2D& e, const Tensor2D& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < e.data.size(); ++i) {
        const double d = e.data[i] - x.data[i];
        acc += d * d;
    }
    return acc;
}

Tensor2D gradient(const Tensor2D& e, const Tensor2D& x) {
    Tensor2D g(e.rows, e.cols);
    for (std::size_t i = 0; i < e.data.size(); ++i) g.data[i] = -2.0 * (e.data[i] - x.data[i]);
    return g;
}

}  // namespace

ObjectiveCheckReport verify_objective_properties(const Tensor2D& e, Rng& rng,
                                                 std::size_t trials) {
    ObjectiveCheckReport report;
    report.trials = trials;
    const double scale = std::max(1.0, frobenius_norm(e));
    for (std::size_t t = 0; t < trials; ++t) {
        Rng tr = rng.split(t);
        Tensor2D x1(e.rows, e.cols), x2(e.rows, e.cols);
        for (double& v : x1.data) v = scale * tr.normal();
        for (double& v : x2.data) v = scale * tr.normal();
        const double lambda = tr.uniform();

        Tensor2D mix(e.rows, e.cols);
        for (std::size_t i = 0; i < mix.data.size(); ++i)
            mix.data[i] = lambda * x1.data[i] + (1.0 - lambda) * x2.data[i];
        const double convexity = objective(e, mix) -
                                 (lambda * objective(e, x1) + (1.0 - lambda) * objective(e, x2));
        report.max_convexity_violation = std::max(report.max_convexity_violation, convexity);
        if (convexity > 1e-9 && report.detail.empty()) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "convexity violated at trial %zu (lambda=%.6f)", t,
                          lambda);
            report.detail = buf;
        }

        const Tensor2D g1 = gradient(e, x1);
        const Tensor2D g2 = gradient(e, x2);
        const double smooth =
            std::fabs(frobenius_distance(g1, g2) - 2.0 * frobenius_distance(x1, x2));
        report.max_smoothness_error = std::max(report.max_smoothness_error, smooth);
        if (smooth > 1e-9 && report.detail.empty()) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "gradient-Lipschitz identity off by %.3e at trial %zu",
                          smooth, t);
            report.detail = buf;
        }

        // Central finite differences on a few random entries of X1.
        constexpr double h = 1e-6;
        for (int probe = 0; probe < 3; ++probe) {
            const std::size_t idx = tr.below(x1.data.size());
            Tensor2D xp = x1, xm = x1;
            xp.data[idx] += h;
            xm.data[idx] -= h;
            const double fd = (objective(e, xp) - objective(e, xm)) / (2.0 * h);
            const double an = g1.data[idx];
            const double rel = std::fabs(fd - an) / std::max(1.0, std::fabs(an));
            report.max_fd_rel_error = std::max(report.max_fd_rel_error, rel);
            if (rel > 1e-5 && report.detail.empty()) {
                char buf[128];
                std::snprintf(buf, sizeof buf,
                              "finite-difference mismatch %.3e at trial %zu entry %zu", rel, t,
                              idx);
                report.detail = buf;
            }
        }
    }
    report.passed = report.max_convexity_violation <= 1e-9 &&
                    report.max_smoothness_error <= 1e-9 && report.max_fd_rel_error <= 1e-5;
    return report;
}

std::pair<double, double> init_loss_comparison(const Tensor2D& w, const LayerQuantState& state,
                                               std::size_t r) {
    LayerQuantState bare = state;
    bare.adapter_l1 = Tensor2D();
    bare.adapter_l2 = Tensor2D();
    const Tensor2D e = quant_residual(w, bare);
    const double loss_zero = objective(e, Tensor2D(w.rows, w.cols));

    const AdapterInit init = init_adapter(e, r);
    LayerQuantState with = bare;
    with.adapter_l1 = init.l1;
    with.adapter_l2 = init.l2;
    const Tensor2D deq = dequantized_weight(with, w);
    double loss_oolri = 0.0;
    for (std::size_t i = 0; i < w.data.size(); ++i) {
        const double d = w.data[i] - deq.data[i];
        loss_oolri += d * d;
    }
    return {loss_zero, loss_oolri};
}

}  // namespace mpqdm2
