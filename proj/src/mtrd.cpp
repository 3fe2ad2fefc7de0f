#include "mpqdm2/mtrd.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <utility>

namespace mpqdm2 {

namespace {

// First n entries of a partial Fisher-Yates shuffle of [0, count), sorted
// ascending so insertion order is the input row order. Consumes exactly n
// draws from rng.
std::vector<std::size_t> sample_without_replacement(std::size_t count, std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + std::size_t(rng.below(std::uint64_t(count - i)));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<double> scaled_logits(const ReferenceMatrix& ref, std::span<const double> x,
                                  double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("mtrd: tau must be positive");
    if (x.size() != ref.f_ref.cols)
        throw std::invalid_argument("mtrd: feature dimension does not match the reference");
    std::vector<double> z(ref.f_ref.rows);
    for (std::size_t r = 0; r < ref.f_ref.rows; ++r) {
        double dot = 0.0;
        const double* row = ref.f_ref.data.data() + r * ref.f_ref.cols;
        for (std::size_t c = 0; c < x.size(); ++c) dot += row[c] * x[c];
        z[r] = dot / tau;
    }
    return z;
}

void log_softmax_inplace(std::vector<double>& z) {
    const double m = *std::max_element(z.begin(), z.end());
    double acc = 0.0;
    for (double v : z) acc += std::exp(v - m);
    const double lse = m + std::log(acc);
    for (double& v : z) v -= lse;
}

double pair_divergence(const ReferenceMatrix& ref, std::span<const double> x_fp,
                       std::span<const double> x_q, double tau, RelationMetric metric) {
    std::vector<double> lp = scaled_logits(ref, x_fp, tau);
    std::vector<double> lq = scaled_logits(ref, x_q, tau);
    log_softmax_inplace(lp);
    log_softmax_inplace(lq);
    double acc = 0.0;
    if (metric == RelationMetric::kl) {
        for (std::size_t i = 0; i < lp.size(); ++i) acc += std::exp(lp[i]) * (lp[i] - lq[i]);
    } else {
        for (std::size_t i = 0; i < lp.size(); ++i) {
            const double d = std::exp(lp[i]) - std::exp(lq[i]);
            acc += d * d;
        }
        acc /= double(lp.size());
    }
    return acc;
}

}  // namespace

TemporalMemory::TemporalMemory(int timesteps, std::size_t dim, std::size_t capacity)
    : timesteps_(timesteps), dim_(dim), capacity_(capacity),
      queues_(timesteps > 0 ? std::size_t(timesteps) : 0) {
    if (timesteps < 1) throw std::invalid_argument("temporal memory: timesteps must be >= 1");
    if (dim == 0) throw std::invalid_argument("temporal memory: feature dimension must be >= 1");
    if (capacity == 0) throw std::invalid_argument("temporal memory: capacity must be >= 1");
}

std::size_t TemporalMemory::queue_size(int t) const {
    if (t < 1 || t > timesteps_) throw std::invalid_argument("temporal memory: timestep out of range");
    return queues_[std::size_t(t - 1)].size();
}

bool TemporalMemory::warm() const {
    for (const auto& q : queues_)
        if (q.empty()) return false;
    return true;
}

std::span<const double> TemporalMemory::stored(int t, std::size_t i) const {
    if (t < 1 || t > timesteps_) throw std::invalid_argument("temporal memory: timestep out of range");
    const auto& q = queues_[std::size_t(t - 1)];
    if (i >= q.size()) throw std::invalid_argument("temporal memory: slot out of range");
    return q[i];
}

void TemporalMemory::push(int t, const Tensor2D& x_fp, std::size_t n, Rng& rng) {
    if (t < 1 || t > timesteps_) throw std::invalid_argument("temporal memory: timestep out of range");
    if (x_fp.cols != dim_)
        throw std::invalid_argument("temporal memory: feature dimension mismatch");
    if (n > x_fp.rows)
        throw std::invalid_argument("temporal memory: push count exceeds batch rows");
    const std::vector<std::size_t> rows = sample_without_replacement(x_fp.rows, n, rng);
    auto& q = queues_[std::size_t(t - 1)];
    for (const std::size_t r : rows) {
        if (q.size() == capacity_) q.pop_front();
        const auto row = x_fp.row(r);
        q.emplace_back(row.begin(), row.end());
    }
}

std::string TemporalMemory::debug_summary() const {
    std::string out;
    char line[128];
    for (int t = 1; t <= timesteps_; ++t) {
        const auto& q = queues_[std::size_t(t - 1)];
        if (q.empty()) {
            std::snprintf(line, sizeof line, "t=%d len=0\n", t);
        } else {
            double sum = 0.0, sumsq = 0.0;
            std::size_t count = 0;
            for (const auto& v : q)
                for (const double x : v) {
                    sum += x;
                    sumsq += x * x;
                    ++count;
                }
            const double mean = sum / double(count);
            const double var = std::max(0.0, sumsq / double(count) - mean * mean);
            std::snprintf(line, sizeof line, "t=%d len=%zu mean=%.6g std=%.6g\n", t, q.size(),
                          mean, std::sqrt(var));
        }
        out += line;
    }
    return out;
}

ReferenceMatrix build_reference(const TemporalMemory& mem, std::size_t k, Rng& rng) {
    if (k < 1) throw std::invalid_argument("build_reference: k must be >= 1");
    const int t_count = mem.timesteps();
    ReferenceMatrix ref;
    ref.k = k;
    ref.f_ref = Tensor2D(std::size_t(t_count) * k, mem.dim());
    ref.row_timestep.reserve(ref.f_ref.rows);
    ref.row_slot.reserve(ref.f_ref.rows);
    std::size_t out_row = 0;
    for (int t = 1; t <= t_count; ++t) {
        const std::size_t len = mem.queue_size(t);
        if (len == 0)
            throw std::runtime_error("cold memory: queue for timestep " + std::to_string(t) +
                                     " is empty");
        std::vector<std::size_t> slots;
        if (len >= k) {
            slots = sample_without_replacement(len, k, rng);
        } else {
            slots.resize(k);
            for (std::size_t i = 0; i < k; ++i) slots[i] = std::size_t(rng.below(len));
        }
        for (const std::size_t s : slots) {
            const auto src = mem.stored(t, s);
            std::copy(src.begin(), src.end(), ref.f_ref.row(out_row).begin());
            ref.row_timestep.push_back(t);
            ref.row_slot.push_back(s);
            ++out_row;
        }
    }
    return ref;
}

std::vector<double> relation_distribution(const ReferenceMatrix& ref, std::span<const double> x,
                                          double tau) {
    std::vector<double> z = scaled_logits(ref, x, tau);
    const double m = *std::max_element(z.begin(), z.end());
    double acc = 0.0;
    for (double& v : z) {
        v = std::exp(v - m);
        acc += v;
    }
    for (double& v : z) v /= acc;
    return z;
}

double mtrd_loss(const ReferenceMatrix& ref, const Tensor2D& x_fp_batch,
                 const Tensor2D& x_q_batch, double tau, RelationMetric metric) {
    if (x_fp_batch.rows != x_q_batch.rows || x_fp_batch.cols != x_q_batch.cols)
        throw std::invalid_argument("mtrd_loss: batches are not aligned");
    if (x_fp_batch.rows == 0) throw std::invalid_argument("mtrd_loss: empty batch");
    double acc = 0.0;
    for (std::size_t b = 0; b < x_fp_batch.rows; ++b)
        acc += pair_divergence(ref, x_fp_batch.row(b), x_q_batch.row(b), tau, metric);
    return acc / double(x_fp_batch.rows);
}

double total_loss(double align, double mtrd, double alpha) { return align + alpha * mtrd; }

std::vector<double> mtrd_gradient(const ReferenceMatrix& ref, std::span<const double> x_fp,
                                  std::span<const double> x_q, double tau,
                                  RelationMetric metric) {
    std::vector<double> lp = scaled_logits(ref, x_fp, tau);
    std::vector<double> lq = scaled_logits(ref, x_q, tau);
    log_softmax_inplace(lp);
    log_softmax_inplace(lq);
    const std::size_t r_count = lp.size();
    std::vector<double> dz(r_count);
    if (metric == RelationMetric::kl) {
        for (std::size_t i = 0; i < r_count; ++i) dz[i] = std::exp(lq[i]) - std::exp(lp[i]);
    } else {
        // Chain through the softmax Jacobian: dz = q .* (g - <g, q>) with
        // g_i = 2 (q_i - p_i) / R.
        std::vector<double> g(r_count);
        double gq = 0.0;
        for (std::size_t i = 0; i < r_count; ++i) {
            const double qi = std::exp(lq[i]);
            g[i] = 2.0 * (qi - std::exp(lp[i])) / double(r_count);
            gq += g[i] * qi;
        }
        for (std::size_t i = 0; i < r_count; ++i) dz[i] = std::exp(lq[i]) * (g[i] - gq);
    }
    std::vector<double> grad(x_q.size(), 0.0);
    for (std::size_t i = 0; i < r_count; ++i) {
        const double* row = ref.f_ref.data.data() + i * ref.f_ref.cols;
        const double w = dz[i] / tau;
        for (std::size_t c = 0; c < grad.size(); ++c) grad[c] += w * row[c];
    }
    return grad;
}

}  // namespace mpqdm2
