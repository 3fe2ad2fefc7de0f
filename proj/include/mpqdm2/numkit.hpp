#pragma once

#include <span>
#include <vector>

#include "mpqdm2/tensor.hpp"

namespace mpqdm2 {

// a (m x k) times b (k x n). Throws std::invalid_argument on inner-dim mismatch.
Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);

// Thin SVD of an m x n matrix: a == u * diag(s) * v^T with p = min(m, n)
// columns in u (m x p) and v (n x p); s is non-negative and non-increasing.
struct SvdResult {
    Tensor2D u;
    std::vector<double> s;
    Tensor2D v;
};

// One-sided Jacobi, capped at 100 sweeps with a 1e-12 relative off-diagonal
// threshold. Throws NumericError carrying the residual off-diagonal norm if
// the cap is hit. Exact at this scale; no rank cutoff is applied.
SvdResult svd(const Tensor2D& a);

double vec_mean(std::span<const double> v);
// Population variance (divides by N).
double vec_variance(std::span<const double> v);

// Population kurtosis E[(x-mu)^4] / sigma^4. Requires >= 2 elements.
// Zero variance returns the degenerate sentinel 0.0 (any real distribution
// has kurtosis >= 1, so the sentinel sorts below every valid value).
double kurtosis(std::span<const double> v);

// Max-subtracted softmax of v / tau. Requires tau > 0; output sums to 1
// within 1e-12 for any finite input.
std::vector<double> softmax(std::span<const double> v, double tau);

// KL(p || q) = sum p_i log(p_i / q_i) with 0 * log 0 := 0. Throws
// NumericError when q_i == 0 while p_i > 0 (divergence undefined).
double kl_divergence(std::span<const double> p, std::span<const double> q);

}  // namespace mpqdm2
