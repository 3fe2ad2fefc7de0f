#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mpqdm2/tensor.hpp"

namespace mpqdm2 {

// Uniform affine quantizer: x -> s * (clip(round(x/s) + z, 0, 2^bits - 1) - z).
// The zero point is integral, so the reconstruction grid is {s * k}. A
// degenerate calibration range (lower == upper) collapses to a single exact
// level: the constant 0 keeps s = 1e-8, z = 0; a nonzero constant c uses
// s = |c|, z = -sign(c) so quantize(c) == c bit for bit.
struct UniformQuantizer {
    int bits = 8;
    double step = 1.0;
    std::int64_t zero_point = 0;
    double lower = 0.0;
    double upper = 0.0;

    static UniformQuantizer from_range(double lo, double hi, int bits);

    std::int64_t max_code() const { return (std::int64_t{1} << bits) - 1; }
    std::int64_t code(double x) const;       // clipped integer grid index
    double value(std::int64_t code) const { return step * (double(code) - double(zero_point)); }
    double quantize(double x) const { return value(code(x)); }
    bool degenerate() const { return lower == upper; }
};

// Quantize every entry with one shared quantizer (per-tensor granularity).
Tensor2D quantize_uniform(const Tensor2D& x, const UniformQuantizer& q);

// Min/max calibration. bits must lie in [1, 8].
UniformQuantizer calibrate_uniform(const Tensor2D& x, int bits);
UniformQuantizer calibrate_uniform(std::span<const double> x, int bits);
// One quantizer per row (channel-major: rows are channels).
std::vector<UniformQuantizer> calibrate_per_channel(const Tensor2D& x, int bits);

// Per-input-channel balancing factors delta_i = sqrt(max|W_:,i| / max|X_:,i|).
// Scaling activations by delta and weights by 1/delta preserves the product
// X W^T exactly in real arithmetic while evening out per-channel ranges.
struct ChannelScaling {
    std::vector<double> delta;
};

// w: (out x in) weight, x_calib: (samples x in) activations. Channels where
// either maximum vanishes get delta = 1.
ChannelScaling compute_prescale(const Tensor2D& w, const Tensor2D& x_calib);
// Scale column i of x by delta_i.
Tensor2D apply_prescale_activations(const Tensor2D& x, const ChannelScaling& sc);
// Scale column i of w by 1/delta_i.
Tensor2D apply_prescale_weight(const Tensor2D& w, const ChannelScaling& sc);

enum class OpMode : std::uint8_t { joint = 0, separate = 1 };

// Base quantizer at (total - tiers) bits plus up to two binary refinement
// tiers: tier k adds delta_k * sign(residual), sign(0) := +1. Total stored
// bits per element = base.bits + tiers. In joint mode the tier deltas are
// locked to the base step (delta_res = step/2, delta_res2 = step/4), so the
// whole ladder moves with one parameter; separate mode frees each delta.
struct ResidualQuantizer {
    UniformQuantizer base;
    int tiers = 1;  // 0, 1, or 2
    double delta_res = 0.0;
    double delta_res2 = 0.0;
    OpMode mode = OpMode::separate;

    int total_bits() const { return base.bits + tiers; }
    double quantize(double x) const;
};

// Calibrates base from min/max at (total_bits - tiers) bits and initializes
// tier deltas from mean |residual| (separate) or the step coupling (joint).
ResidualQuantizer calibrate_residual(std::span<const double> x, int total_bits, int tiers,
                                     OpMode mode);

std::vector<double> quantize_residual(std::span<const double> x, const ResidualQuantizer& q);

// Sum of squared reconstruction errors ||x - Q(x)||^2.
double quant_sse(std::span<const double> x, const ResidualQuantizer& q);
double quant_sse(std::span<const double> x, const UniformQuantizer& q);

// Coarse-to-fine 1-D search per free step parameter: 64 log-spaced coarse
// probes, then 3 golden-section refinement levels. Joint mode fits only the
// base step; separate mode coordinate-descends over (step, deltas) and always
// evaluates the joint-fitted candidate, so the fitted separate error is never
// above the fitted joint error for the same input.
ResidualQuantizer fit_step_sizes(std::span<const double> x, const ResidualQuantizer& q);

// Logical storage model: dense base codes plus one bit-packed sign mask per
// refinement tier. Round-trips quantize_residual output bit for bit.
struct PackedChannel {
    std::uint32_t count = 0;
    int base_bits = 0;
    int tiers = 0;
    std::vector<std::uint8_t> base_codes;  // one code per element
    std::vector<std::uint8_t> tier1_mask;  // bit-packed signs, +1 -> 1
    std::vector<std::uint8_t> tier2_mask;

    std::size_t stored_bits() const {
        return std::size_t(count) * std::size_t(base_bits) + std::size_t(tiers) * count;
    }
};

PackedChannel pack_residual(std::span<const double> x, const ResidualQuantizer& q);
std::vector<double> unpack_residual(const PackedChannel& p, const ResidualQuantizer& q);

// Per-timestep activation quantizer. The zero offset is kept real-valued
// because it is trained; it shifts the clip window of the integer grid.
struct ActQuantParams {
    int bits = 8;
    double step = 1.0;
    double zero = 0.0;
};

double act_quantize(double x, const ActQuantParams& q);
Tensor2D act_quantize(const Tensor2D& x, const ActQuantParams& q);
ActQuantParams calibrate_act(const Tensor2D& x, int bits);

// Everything needed to run one linear layer quantized: input-channel scaling,
// per-channel bit allocation and quantizer specs, a low-rank additive weight
// adapter, and per-timestep activation quantizers.
struct LayerQuantState {
    ChannelScaling scaling;
    std::vector<int> bit_alloc;
    std::vector<ResidualQuantizer> specs;
    Tensor2D adapter_l1;  // (out x r); empty means no adapter
    Tensor2D adapter_l2;  // (r x in)
    // Residual norms recorded at adapter-init time (zero for zero-filled
    // adapters); informational metadata carried through serialization.
    double adapter_norm_before = 0.0;
    double adapter_norm_after = 0.0;
    std::vector<ActQuantParams> act_quant;  // indexed by timestep - 1

    bool has_adapter() const { return adapter_l1.size() > 0 && adapter_l2.size() > 0; }
};

// Effective weight seen by a forward pass, mapped back to the original weight
// domain: W_eff[o][i] = delta_i * Q_i((W + L1 L2)[o][i] / delta_i). With unit
// scaling, no adapter, and identical per-channel specs this reduces to the
// plain quantize_uniform path.
Tensor2D dequantized_weight(const LayerQuantState& state, const Tensor2D& w);

}  // namespace mpqdm2
