#include "mpqdm2/mpq_search.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <span>
#include <stdexcept>

#include "mpqdm2/numkit.hpp"

namespace mpqdm2 {

namespace {

Tensor2D take_cols(const Tensor2D& x, const std::vector<std::size_t>& cols) {
    Tensor2D out(x.rows, cols.size());
    for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t j = 0; j < cols.size(); ++j) out.at(r, j) = x.at(r, cols[j]);
    return out;
}

Tensor2D take_rows(const Tensor2D& w, const std::vector<std::size_t>& rows) {
    Tensor2D out(rows.size(), w.cols);
    for (std::size_t j = 0; j < rows.size(); ++j)
        for (std::size_t c = 0; c < w.cols; ++c) out.at(j, c) = w.at(rows[j], c);
    return out;
}

double sq_distance(const Tensor2D& a, const Tensor2D& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc;
}

Tensor2D quantize_rows(const Tensor2D& w_rows, int base_bits, int tiers, OpMode mode) {
    Tensor2D out(w_rows.rows, w_rows.cols);
    for (std::size_t r = 0; r < w_rows.rows; ++r) {
        const std::span<const double> row = w_rows.row(r);
        const ResidualQuantizer q =
            fit_step_sizes(row, calibrate_residual(row, base_bits + tiers, tiers, mode));
        for (std::size_t c = 0; c < w_rows.cols; ++c) out.at(r, c) = q.quantize(row[c]);
    }
    return out;
}

struct ModedProduct {
    OpMode mode = OpMode::joint;
    Tensor2D product;  // Q(X_g) . Q^mode(W_g), samples x C_out
};

ModedProduct fit_group_product(const Tensor2D& w_group_rows, const Tensor2D& x_group_cols,
                               const Tensor2D& xq_group_cols, int base_bits, int tiers) {
    ModedProduct out;
    const Tensor2D qw_joint = quantize_rows(w_group_rows, base_bits, tiers, OpMode::joint);
    Tensor2D p_joint = matmul(xq_group_cols, qw_joint);
    if (tiers == 0) {
        out.mode = OpMode::joint;
        out.product = std::move(p_joint);
        return out;
    }
    const Tensor2D qw_sep = quantize_rows(w_group_rows, base_bits, tiers, OpMode::separate);
    Tensor2D p_sep = matmul(xq_group_cols, qw_sep);
    const Tensor2D ref = matmul(x_group_cols, w_group_rows);
    const double err_joint = sq_distance(ref, p_joint);
    const double err_sep = sq_distance(ref, p_sep);
    if (err_sep < err_joint) {
        out.mode = OpMode::separate;
        out.product = std::move(p_sep);
    } else {
        out.mode = OpMode::joint;
        out.product = std::move(p_joint);
    }
    return out;
}

}  // namespace

std::vector<std::pair<std::size_t, double>> rank_channels(const Tensor2D& w_rows) {
    if (w_rows.rows == 0) throw std::invalid_argument("rank_channels: no channels");
    std::vector<std::pair<std::size_t, double>> ranked(w_rows.rows);
    for (std::size_t r = 0; r < w_rows.rows; ++r) ranked[r] = {r, kurtosis(w_rows.row(r))};
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    return ranked;
}

std::vector<ChannelGroup> partition_groups(
    const std::vector<std::pair<std::size_t, double>>& ranked, std::size_t g) {
    const std::size_t c = ranked.size();
    if (g < 1 || g > c) throw std::invalid_argument("partition_groups: group count out of range");
    std::vector<ChannelGroup> groups(g);
    const std::size_t base = c / g;
    const std::size_t rem = c % g;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < g; ++i) {
        const std::size_t size = base + (i < rem ? 1 : 0);
        ChannelGroup& grp = groups[i];
        double acc = 0.0;
        for (std::size_t k = 0; k < size; ++k) {
            grp.channels.push_back(ranked[pos].first);
            acc += ranked[pos].second;
            ++pos;
        }
        grp.kurtosis = acc / double(size);
    }
    return groups;
}

OpMode select_op_mode(const Tensor2D& w_group_rows, const Tensor2D& x_group_cols,
                      const Tensor2D& xq_group_cols, int base_bits, int tiers) {
    if (w_group_rows.rows == 0) throw std::invalid_argument("select_op_mode: empty group");
    return fit_group_product(w_group_rows, x_group_cols, xq_group_cols, base_bits, tiers).mode;
}

AllocationResult search_allocation(const Tensor2D& w_rows, const Tensor2D& x_calib,
                                   const SearchConfig& cfg) {
    const std::size_t c = w_rows.rows;
    if (c == 0) throw std::invalid_argument("search_allocation: no channels");
    if (x_calib.rows == 0 || x_calib.cols != c)
        throw std::invalid_argument("search_allocation: calibration shape mismatch");
    if (cfg.n < 2) throw std::invalid_argument("search_allocation: need n >= 2");
    const int base_bits = cfg.n - 1;

    const std::size_t g = cfg.groups == 0 ? std::max<std::size_t>(1, c / 10)
                                          : std::min(cfg.groups, c);
    std::vector<ChannelGroup> groups = partition_groups(rank_channels(w_rows), g);

    const ActQuantParams act = calibrate_act(x_calib, cfg.act_bits);
    const Tensor2D xq = act_quantize(x_calib, act);
    const Tensor2D y_ref = matmul(x_calib, w_rows);

    // One fitted product per (group, tier count); the op mode rides along.
    std::vector<std::array<ModedProduct, 3>> fitted(g);
    for (std::size_t i = 0; i < g; ++i) {
        const Tensor2D wg = take_rows(w_rows, groups[i].channels);
        const Tensor2D xg = take_cols(x_calib, groups[i].channels);
        const Tensor2D xqg = take_cols(xq, groups[i].channels);
        for (int tiers = 0; tiers < 3; ++tiers)
            fitted[i][tiers] = fit_group_product(wg, xg, xqg, base_bits, tiers);
    }

    // Enumerate zero-sum group offsets; candidate order {0,-1,+1} visits the
    // all-n assignment first so ties keep it.
    std::vector<std::int64_t> sizes(g);
    for (std::size_t i = 0; i < g; ++i) sizes[i] = std::int64_t(groups[i].channels.size());
    std::vector<std::int64_t> tail(g + 1, 0);
    for (std::size_t i = g; i-- > 0;) tail[i] = tail[i + 1] + sizes[i];

    std::vector<Tensor2D> acc(g + 1, Tensor2D(y_ref.rows, y_ref.cols));
    std::vector<int> offsets(g, 0);
    std::vector<int> best_offsets;
    double best_obj = std::numeric_limits<double>::infinity();
    double baseline = 0.0;
    bool baseline_set = false;

    auto dfs = [&](auto&& self, std::size_t depth, std::int64_t budget) -> void {
        if (depth == g) {
            if (budget != 0) return;
            const double obj = sq_distance(y_ref, acc[g]);
            if (!baseline_set) {
                baseline = obj;  // first leaf is the all-n assignment
                baseline_set = true;
            }
            if (obj < best_obj) {
                best_obj = obj;
                best_offsets = offsets;
            }
            return;
        }
        for (int o : {0, -1, +1}) {
            const std::int64_t next = budget + o * sizes[depth];
            if (std::llabs(next) > tail[depth + 1]) continue;
            offsets[depth] = o;
            const Tensor2D& p = fitted[depth][o + 1].product;
            Tensor2D& dst = acc[depth + 1];
            const Tensor2D& src = acc[depth];
            for (std::size_t k = 0; k < dst.data.size(); ++k)
                dst.data[k] = src.data[k] + p.data[k];
            self(self, depth + 1, next);
        }
    };
    dfs(dfs, 0, 0);

    AllocationResult result;
    result.bits.assign(c, 0);
    result.modes.assign(c, OpMode::joint);
    for (std::size_t i = 0; i < g; ++i) {
        const int tiers = best_offsets[i] + 1;
        groups[i].bits = cfg.n + best_offsets[i];
        groups[i].mode = fitted[i][tiers].mode;
        for (std::size_t ch : groups[i].channels) {
            result.bits[ch] = groups[i].bits;
            result.modes[ch] = groups[i].mode;
        }
    }
    result.groups = groups;
    result.objective = best_obj;
    result.baseline = baseline;

    const std::size_t upgrades =
        std::size_t(std::max(0.0, std::ceil(cfg.surplus_2bit * double(c) - 1e-9)));
    if (upgrades > 0) {
        // Kurtosis lookup in channel order for the greedy pick.
        std::vector<double> kappa(c, 0.0);
        for (const auto& [ch, kap] : rank_channels(w_rows)) kappa[ch] = kap;

        std::vector<std::size_t> eligible;
        for (std::size_t ch = 0; ch < c; ++ch)
            if (result.bits[ch] < cfg.n + 1) eligible.push_back(ch);
        if (eligible.size() < upgrades)
            throw std::invalid_argument("search_allocation: surplus exceeds upgradable channels");
        std::stable_sort(eligible.begin(), eligible.end(), [&](std::size_t a, std::size_t b) {
            if (result.bits[a] != result.bits[b]) return result.bits[a] < result.bits[b];
            return kappa[a] > kappa[b];
        });
        for (std::size_t k = 0; k < upgrades; ++k) {
            const std::size_t ch = eligible[k];
            result.bits[ch] += 1;
            const std::vector<std::size_t> one{ch};
            const int tiers = result.bits[ch] - base_bits;
            result.modes[ch] = select_op_mode(take_rows(w_rows, one), take_cols(x_calib, one),
                                              take_cols(xq, one), base_bits, tiers);
        }
        // Recompute the achieved objective with the per-channel upgrades in.
        Tensor2D sum(y_ref.rows, y_ref.cols);
        for (const ChannelGroup& grp : groups) {
            for (std::size_t ch : grp.channels) {
                const std::vector<std::size_t> one{ch};
                const Tensor2D qw = quantize_rows(take_rows(w_rows, one), base_bits,
                                                  result.bits[ch] - base_bits, result.modes[ch]);
                const Tensor2D p = matmul(take_cols(xq, one), qw);
                for (std::size_t k = 0; k < sum.data.size(); ++k) sum.data[k] += p.data[k];
            }
        }
        result.objective = sq_distance(y_ref, sum);
    }
    return result;
}

}  // namespace mpqdm2
