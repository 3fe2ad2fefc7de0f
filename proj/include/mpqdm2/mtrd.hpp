#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "mpqdm2/rng.hpp"
#include "mpqdm2/tensor.hpp"

namespace mpqdm2 {

enum class RelationMetric : std::uint8_t { kl = 0, mse = 1 };

// One bounded FIFO queue of full-precision feature vectors per timestep.
// Single-writer: pushes and reference builds happen on the training thread;
// everything downstream of a built ReferenceMatrix is pure.
class TemporalMemory {
public:
    TemporalMemory(int timesteps, std::size_t dim, std::size_t capacity);

    int timesteps() const { return timesteps_; }
    std::size_t dim() const { return dim_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t queue_size(int t) const;
    bool warm() const;  // every queue holds at least one vector

    // i-th oldest stored vector of timestep t (i = 0 is next to be evicted).
    std::span<const double> stored(int t, std::size_t i) const;

    // Samples n distinct rows of x_fp uniformly (partial Fisher-Yates over the
    // row indices, consuming exactly n draws) and appends them in ascending
    // row order, evicting the oldest entries beyond capacity. n == x_fp.rows
    // therefore pushes the whole batch in input order.
    void push(int t, const Tensor2D& x_fp, std::size_t n, Rng& rng);

    // One line per timestep: queue length and mean/std of the stored floats.
    std::string debug_summary() const;

private:
    int timesteps_ = 0;
    std::size_t dim_ = 0;
    std::size_t capacity_ = 0;
    std::vector<std::deque<std::vector<double>>> queues_;
};

// Frozen snapshot of k features sampled per timestep, rows timestep-major.
struct ReferenceMatrix {
    Tensor2D f_ref;  // (T*k) x d
    std::size_t k = 0;
    std::vector<int> row_timestep;      // provenance: source timestep per row
    std::vector<std::size_t> row_slot;  // provenance: queue slot per row
};

// k rows per queue: without replacement (ascending slots) when the queue
// holds at least k vectors, with replacement otherwise. Any empty queue is a
// cold-memory error naming the timestep.
ReferenceMatrix build_reference(const TemporalMemory& mem, std::size_t k, Rng& rng);

// softmax(F_ref . x / tau) over the reference rows. Scaling x and tau by the
// same factor leaves the result unchanged (up to roundoff); scaling x alone
// does not.
std::vector<double> relation_distribution(const ReferenceMatrix& ref,
                                          std::span<const double> x, double tau);

// Mean over aligned batch rows of the divergence between the full-precision
// and quantized relation distributions: KL(r_fp || r_q), or their mean
// squared difference for the mse ablation metric.
double mtrd_loss(const ReferenceMatrix& ref, const Tensor2D& x_fp_batch,
                 const Tensor2D& x_q_batch, double tau,
                 RelationMetric metric = RelationMetric::kl);

double total_loss(double align, double mtrd, double alpha);

// Gradient of the per-pair divergence with respect to x_q. For KL this is
// F_ref^T (r_q - r_fp) / tau.
std::vector<double> mtrd_gradient(const ReferenceMatrix& ref, std::span<const double> x_fp,
                                  std::span<const double> x_q, double tau,
                                  RelationMetric metric = RelationMetric::kl);

}  // namespace mpqdm2
