#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "mpqdm2/quantizer.hpp"
#include "mpqdm2/tensor.hpp"

namespace mpqdm2 {

// Channels are rows throughout this module: callers pass the pre-scaled
// transposed weight (C x C_out) so that row i is the weight vector fed by
// input channel i, and calibration activations as (samples x C).

struct ChannelGroup {
    std::vector<std::size_t> channels;
    double kurtosis = 0.0;
    int bits = 0;
    OpMode mode = OpMode::joint;
};

struct AllocationResult {
    std::vector<int> bits;
    std::vector<OpMode> modes;
    std::vector<ChannelGroup> groups;
    double objective = 0.0;
    double baseline = 0.0;
};

// Per-channel excess-free kurtosis, sorted descending; ties keep index order.
std::vector<std::pair<std::size_t, double>> rank_channels(const Tensor2D& w_rows);

// Balanced contiguous split of the ranked list into g groups (sizes differ by
// at most one); the group statistic is the mean member kurtosis.
std::vector<ChannelGroup> partition_groups(
    const std::vector<std::pair<std::size_t, double>>& ranked, std::size_t g);

// Picks the step-coupling mode whose fitted quantizers give the smaller
// activation-aware output error on this group; ties go to joint.
OpMode select_op_mode(const Tensor2D& w_group_rows, const Tensor2D& x_group_cols,
                      const Tensor2D& xq_group_cols, int base_bits, int tiers);

struct SearchConfig {
    int n = 3;                  // average bit budget per channel
    std::size_t groups = 0;     // 0 -> max(1, C/10)
    double surplus_2bit = 0.0;  // extra fraction of channels upgraded one tier
    int act_bits = 8;
};

AllocationResult search_allocation(const Tensor2D& w_rows, const Tensor2D& x_calib,
                                   const SearchConfig& cfg);

}  // namespace mpqdm2
