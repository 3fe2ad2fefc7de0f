#include "mpqdm2/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

#include "mpqdm2/errors.hpp"

namespace mpqdm2 {

namespace {

double sgn(double x) { return x < 0.0 ? -1.0 : 1.0; }

void check_bits(int bits) {
    if (bits < 1 || bits > 8)
        throw std::invalid_argument("quantizer bits must lie in [1, 8]");
}

}  // namespace

UniformQuantizer UniformQuantizer::from_range(double lo, double hi, int bits) {
    check_bits(bits);
    if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi)
        throw std::invalid_argument("quantizer range must be finite with lo <= hi");
    UniformQuantizer q;
    q.bits = bits;
    q.lower = lo;
    q.upper = hi;
    if (lo == hi) {
        if (lo == 0.0) {
            q.step = 1e-8;
            q.zero_point = 0;
        } else {
            q.step = std::fabs(lo);
            q.zero_point = lo > 0.0 ? -1 : 1;
        }
        return q;
    }
    q.step = (hi - lo) / double(q.max_code());
    q.zero_point = -std::llround(lo / q.step);
    return q;
}

std::int64_t UniformQuantizer::code(double x) const {
    const double k = std::round(x / step) + double(zero_point);
    const double m = double(max_code());
    return std::int64_t(std::clamp(k, 0.0, m));
}

Tensor2D quantize_uniform(const Tensor2D& x, const UniformQuantizer& q) {
    Tensor2D out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = q.quantize(x.data[i]);
    require_finite(out, "quantize_uniform output");
    return out;
}

UniformQuantizer calibrate_uniform(std::span<const double> x, int bits) {
    check_bits(bits);
    if (x.empty()) throw std::invalid_argument("calibrate_uniform: empty input");
    if (!all_finite(x)) throw NumericError("calibrate_uniform: non-finite input");
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    return UniformQuantizer::from_range(*lo, *hi, bits);
}

UniformQuantizer calibrate_uniform(const Tensor2D& x, int bits) {
    return calibrate_uniform(std::span<const double>(x.data), bits);
}

std::vector<UniformQuantizer> calibrate_per_channel(const Tensor2D& x, int bits) {
    std::vector<UniformQuantizer> out;
    out.reserve(x.rows);
    for (std::size_t r = 0; r < x.rows; ++r) out.push_back(calibrate_uniform(x.row(r), bits));
    return out;
}

ChannelScaling compute_prescale(const Tensor2D& w, const Tensor2D& x_calib) {
    if (w.cols != x_calib.cols)
        throw std::invalid_argument("compute_prescale: channel count mismatch");
    if (!all_finite(w) || !all_finite(x_calib))
        throw NumericError("compute_prescale: non-finite input");
    ChannelScaling sc;
    sc.delta.assign(w.cols, 1.0);
    for (std::size_t i = 0; i < w.cols; ++i) {
        double wmax = 0.0;
        for (std::size_t o = 0; o < w.rows; ++o) wmax = std::max(wmax, std::fabs(w.at(o, i)));
        double xmax = 0.0;
        for (std::size_t s = 0; s < x_calib.rows; ++s)
            xmax = std::max(xmax, std::fabs(x_calib.at(s, i)));
        if (wmax > 0.0 && xmax > 0.0) sc.delta[i] = std::sqrt(wmax / xmax);
    }
    return sc;
}

Tensor2D apply_prescale_activations(const Tensor2D& x, const ChannelScaling& sc) {
    if (x.cols != sc.delta.size())
        throw std::invalid_argument("apply_prescale_activations: channel count mismatch");
    Tensor2D out = x;
    for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t c = 0; c < x.cols; ++c) out.at(r, c) *= sc.delta[c];
    return out;
}

Tensor2D apply_prescale_weight(const Tensor2D& w, const ChannelScaling& sc) {
    if (w.cols != sc.delta.size())
        throw std::invalid_argument("apply_prescale_weight: channel count mismatch");
    Tensor2D out = w;
    for (std::size_t r = 0; r < w.rows; ++r)
        for (std::size_t c = 0; c < w.cols; ++c) out.at(r, c) /= sc.delta[c];
    return out;
}

double ResidualQuantizer::quantize(double x) const {
    double v = base.quantize(x);
    if (tiers >= 1) v += delta_res * sgn(x - v);
    if (tiers >= 2) v += delta_res2 * sgn(x - v);
    return v;
}

ResidualQuantizer calibrate_residual(std::span<const double> x, int total_bits, int tiers,
                                     OpMode mode) {
    if (tiers < 0 || tiers > 2)
        throw std::invalid_argument("calibrate_residual: tiers must be 0, 1, or 2");
    if (total_bits - tiers < 1)
        throw std::invalid_argument("calibrate_residual: base bits must be >= 1");
    ResidualQuantizer q;
    q.base = calibrate_uniform(x, total_bits - tiers);
    q.tiers = tiers;
    q.mode = mode;
    if (tiers >= 1) {
        if (mode == OpMode::joint) {
            q.delta_res = q.base.step / 2.0;
            if (tiers >= 2) q.delta_res2 = q.base.step / 4.0;
        } else {
            double acc = 0.0;
            for (double v : x) acc += std::fabs(v - q.base.quantize(v));
            q.delta_res = std::max(acc / double(x.size()), 1e-12);
            if (tiers >= 2) {
                ResidualQuantizer one = q;
                one.tiers = 1;
                double acc2 = 0.0;
                for (double v : x) acc2 += std::fabs(v - one.quantize(v));
                q.delta_res2 = std::max(acc2 / double(x.size()), 1e-12);
            }
        }
    }
    return q;
}

std::vector<double> quantize_residual(std::span<const double> x, const ResidualQuantizer& q) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = q.quantize(x[i]);
    return out;
}

double quant_sse(std::span<const double> x, const ResidualQuantizer& q) {
    double acc = 0.0;
    for (double v : x) {
        const double d = v - q.quantize(v);
        acc += d * d;
    }
    return acc;
}

double quant_sse(std::span<const double> x, const UniformQuantizer& q) {
    double acc = 0.0;
    for (double v : x) {
        const double d = v - q.quantize(v);
        acc += d * d;
    }
    return acc;
}

namespace {

// Minimize f over [lo, hi]: 64 log-spaced coarse probes, then 3 golden-section
// refinement levels on the winning bracket. Tracks the best point ever seen,
// so the result can only improve on the coarse scan. Deterministic.
std::pair<double, double> search_1d(const std::function<double(double)>& f, double lo,
                                    double hi) {
    constexpr int kCoarse = 64;
    const double llo = std::log(lo);
    const double lhi = std::log(hi);
    double best_x = lo;
    double best_f = std::numeric_limits<double>::infinity();
    int best_i = 0;
    for (int i = 0; i < kCoarse; ++i) {
        const double x = std::exp(llo + (lhi - llo) * double(i) / double(kCoarse - 1));
        const double v = f(x);
        if (v < best_f) {
            best_f = v;
            best_x = x;
            best_i = i;
        }
    }
    double a = std::exp(llo + (lhi - llo) * double(std::max(0, best_i - 1)) / double(kCoarse - 1));
    double b = std::exp(llo + (lhi - llo) * double(std::min(kCoarse - 1, best_i + 1)) /
                                 double(kCoarse - 1));
    constexpr double kInvPhi = 0.6180339887498949;
    for (int level = 0; level < 3; ++level) {
        for (int it = 0; it < 12; ++it) {
            const double x1 = b - kInvPhi * (b - a);
            const double x2 = a + kInvPhi * (b - a);
            const double f1 = f(x1);
            const double f2 = f(x2);
            if (f1 < best_f) {
                best_f = f1;
                best_x = x1;
            }
            if (f2 < best_f) {
                best_f = f2;
                best_x = x2;
            }
            if (f1 <= f2)
                b = x2;
            else
                a = x1;
        }
    }
    return {best_x, best_f};
}

double sse_with(std::span<const double> x, ResidualQuantizer q, double step,
                std::optional<double> d1 = std::nullopt,
                std::optional<double> d2 = std::nullopt) {
    q.base.step = step;
    if (q.mode == OpMode::joint) {
        q.delta_res = step / 2.0;
        q.delta_res2 = step / 4.0;
    } else {
        if (d1) q.delta_res = *d1;
        if (d2) q.delta_res2 = *d2;
    }
    return quant_sse(x, q);
}

struct SepFit {
    double sse;
    double d1;
    double d2;
};

// With the base step fixed, the tier partition (sign pattern) is fixed, so the
// SSE is quadratic in each delta and the minimizer is the mean absolute
// residual of its tier. Tier 2 is fitted on what tier 1 leaves behind.
SepFit fit_deltas_for_step(std::span<const double> x, const ResidualQuantizer& q, double step) {
    UniformQuantizer base = q.base;
    base.step = step;
    const std::size_t n = x.size();
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = x[i] - base.quantize(x[i]);
    SepFit out{0.0, 1e-12, 1e-12};
    if (q.tiers >= 1) {
        double acc = 0.0;
        for (double v : r) acc += std::abs(v);
        out.d1 = std::max(acc / double(n), 1e-12);
        for (double& v : r) v -= out.d1 * sgn(v);
    }
    if (q.tiers >= 2) {
        double acc = 0.0;
        for (double v : r) acc += std::abs(v);
        out.d2 = std::max(acc / double(n), 1e-12);
        for (double& v : r) v -= out.d2 * sgn(v);
    }
    for (double v : r) out.sse += v * v;
    return out;
}

}  // namespace

ResidualQuantizer fit_step_sizes(std::span<const double> x, const ResidualQuantizer& q) {
    if (x.empty()) throw std::invalid_argument("fit_step_sizes: empty input");
    ResidualQuantizer fit = q;
    // A degenerate base already reconstructs the constant exactly; moving its
    // step would break that, so only the free deltas are tightened.
    if (!q.base.degenerate()) {
        const double s0 = q.base.step;
        const double slo = s0 / 256.0;
        const double shi = s0 * 1.25;
        if (q.mode == OpMode::joint || q.tiers == 0) {
            auto [s_best, f_best] = search_1d(
                [&](double s) { return sse_with(x, q, s); }, slo, shi);
            if (sse_with(x, q, s0) <= f_best) s_best = s0;
            fit.base.step = s_best;
            if (q.mode == OpMode::joint && q.tiers >= 1) {
                fit.delta_res = s_best / 2.0;
                if (q.tiers >= 2) fit.delta_res2 = s_best / 4.0;
            }
            return fit;
        }
        // separate mode: search the base step; deltas follow in closed form
        auto [s_best, f_best] =
            search_1d([&](double s) { return fit_deltas_for_step(x, q, s).sse; }, slo, shi);
        double cs = s_best;
        double cur = f_best;
        // The joint optimum's step is a feasible probe; refitting its deltas can
        // only lower the error there, so "separate <= joint" holds by construction.
        if (q.tiers >= 1) {
            ResidualQuantizer jq = q;
            jq.mode = OpMode::joint;
            const ResidualQuantizer jfit = fit_step_sizes(x, jq);
            const double fj = fit_deltas_for_step(x, q, jfit.base.step).sse;
            if (fj < cur) {
                cs = jfit.base.step;
                cur = fj;
            }
        }
        const SepFit sf = fit_deltas_for_step(x, q, cs);
        fit.base.step = cs;
        fit.delta_res = sf.d1;
        if (q.tiers >= 2) fit.delta_res2 = sf.d2;
        return fit;
    }
    if (q.mode == OpMode::separate && q.tiers >= 1) {
        fit.delta_res = 1e-12;
        if (q.tiers >= 2) fit.delta_res2 = 1e-12;
    }
    return fit;
}

PackedChannel pack_residual(std::span<const double> x, const ResidualQuantizer& q) {
    PackedChannel p;
    p.count = std::uint32_t(x.size());
    p.base_bits = q.base.bits;
    p.tiers = q.tiers;
    p.base_codes.resize(x.size());
    const std::size_t mask_bytes = (x.size() + 7) / 8;
    if (q.tiers >= 1) p.tier1_mask.assign(mask_bytes, 0);
    if (q.tiers >= 2) p.tier2_mask.assign(mask_bytes, 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::int64_t code = q.base.code(x[i]);
        p.base_codes[i] = std::uint8_t(code);
        double v = q.base.value(code);
        if (q.tiers >= 1) {
            const double s1 = sgn(x[i] - v);
            if (s1 > 0.0) p.tier1_mask[i / 8] |= std::uint8_t(1u << (i % 8));
            v += q.delta_res * s1;
        }
        if (q.tiers >= 2) {
            const double s2 = sgn(x[i] - v);
            if (s2 > 0.0) p.tier2_mask[i / 8] |= std::uint8_t(1u << (i % 8));
        }
    }
    return p;
}

std::vector<double> unpack_residual(const PackedChannel& p, const ResidualQuantizer& q) {
    if (p.base_bits != q.base.bits || p.tiers != q.tiers)
        throw FormatError("unpack_residual: packed layout does not match quantizer");
    std::vector<double> out(p.count);
    for (std::size_t i = 0; i < p.count; ++i) {
        double v = q.base.value(p.base_codes[i]);
        if (p.tiers >= 1) {
            const bool plus = p.tier1_mask[i / 8] & (1u << (i % 8));
            v += q.delta_res * (plus ? 1.0 : -1.0);
        }
        if (p.tiers >= 2) {
            const bool plus = p.tier2_mask[i / 8] & (1u << (i % 8));
            v += q.delta_res2 * (plus ? 1.0 : -1.0);
        }
        out[i] = v;
    }
    return out;
}

double act_quantize(double x, const ActQuantParams& q) {
    const double m = double((std::int64_t{1} << q.bits) - 1);
    const double k = std::clamp(std::round(x / q.step) + q.zero, 0.0, m);
    return q.step * (k - q.zero);
}

Tensor2D act_quantize(const Tensor2D& x, const ActQuantParams& q) {
    Tensor2D out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = act_quantize(x.data[i], q);
    return out;
}

ActQuantParams calibrate_act(const Tensor2D& x, int bits) {
    const UniformQuantizer u = calibrate_uniform(x, bits);
    return ActQuantParams{bits, u.step, double(u.zero_point)};
}

Tensor2D dequantized_weight(const LayerQuantState& state, const Tensor2D& w) {
    const std::size_t channels = w.cols;
    if (state.scaling.delta.size() != channels)
        throw std::invalid_argument("dequantized_weight: scaling size mismatch");
    if (state.specs.size() != channels)
        throw std::invalid_argument("dequantized_weight: spec count mismatch");
    Tensor2D shifted = w;
    if (state.has_adapter()) {
        if (state.adapter_l1.rows != w.rows || state.adapter_l2.cols != w.cols ||
            state.adapter_l1.cols != state.adapter_l2.rows)
            throw std::invalid_argument("dequantized_weight: adapter shape mismatch");
        for (std::size_t o = 0; o < w.rows; ++o)
            for (std::size_t i = 0; i < channels; ++i) {
                double acc = 0.0;
                for (std::size_t k = 0; k < state.adapter_l1.cols; ++k)
                    acc += state.adapter_l1.at(o, k) * state.adapter_l2.at(k, i);
                shifted.at(o, i) += acc;
            }
    }
    Tensor2D out(w.rows, w.cols);
    for (std::size_t i = 0; i < channels; ++i) {
        const double d = state.scaling.delta[i];
        const ResidualQuantizer& spec = state.specs[i];
        for (std::size_t o = 0; o < w.rows; ++o)
            out.at(o, i) = d * spec.quantize(shifted.at(o, i) / d);
    }
    require_finite(out, "dequantized_weight output");
    return out;
}

}  // namespace mpqdm2
