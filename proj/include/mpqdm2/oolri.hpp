#pragma once

#include <cstddef>
#include <string>
#include <utility>

#include "mpqdm2/quantizer.hpp"
#include "mpqdm2/rng.hpp"
#include "mpqdm2/tensor.hpp"

namespace mpqdm2 {

struct AdapterInit {
    Tensor2D l1;  // m x r
    Tensor2D l2;  // r x n
    std::size_t rank = 0;
    double residual_norm_before = 0.0;
    double residual_norm_after = 0.0;
};

// E = W - Q(W), the element-wise error of the bare quantizer (no adapter).
Tensor2D quant_residual(const Tensor2D& w, const LayerQuantState& state);

// Truncated-SVD adapter: L1 columns are sqrt(s_i) u_i, L2 rows sqrt(s_i) v_i^T.
AdapterInit init_adapter(const Tensor2D& e, std::size_t r);

struct ObjectiveCheckReport {
    bool passed = false;
    std::size_t trials = 0;
    double max_convexity_violation = 0.0;
    double max_smoothness_error = 0.0;
    double max_fd_rel_error = 0.0;
    std::string detail;  // first violating triple, empty when passed
};

// Numerically checks, on random (X1, X2, lambda) triples, that
// f(X) = |E - X|_F^2 is convex, that |grad f(X1) - grad f(X2)| equals
// 2 |X1 - X2| exactly, and that the analytic gradient -2 (E - X) matches
// central finite differences.
ObjectiveCheckReport verify_objective_properties(const Tensor2D& e, Rng& rng,
                                                 std::size_t trials = 120);

// True (non-linearized) reconstruction loss |W - Q(W + L1 L2)|_F^2 evaluated
// at zero init and at the OOLRI init.
std::pair<double, double> init_loss_comparison(const Tensor2D& w, const LayerQuantState& state,
                                               std::size_t r);

}  // namespace mpqdm2
