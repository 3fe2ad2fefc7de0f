#include "mpqdm2/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "mpqdm2/errors.hpp"

namespace mpqdm2 {

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimension mismatch");
    Tensor2D out(a.rows, b.cols, 0.0);
    // ikj order keeps the inner loop contiguous in b and out.
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        double* orow = out.data.data() + i * out.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

namespace {

double col_dot(const Tensor2D& m, std::size_t p, std::size_t q) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) acc += m.at(i, p) * m.at(i, q);
    return acc;
}

void rotate_cols(Tensor2D& m, std::size_t p, std::size_t q, double c, double s) {
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double xp = m.at(i, p);
        const double xq = m.at(i, q);
        m.at(i, p) = c * xp - s * xq;
        m.at(i, q) = s * xp + c * xq;
    }
}

// Orthonormalize column j of u against columns [0, j) and all previously
// completed columns, seeding from standard basis vectors. Used to fill
// columns whose singular value vanished.
void complete_column(Tensor2D& u, std::size_t j) {
    const std::size_t m = u.rows;
    for (std::size_t seed = 0; seed < m; ++seed) {
        std::vector<double> v(m, 0.0);
        v[seed] = 1.0;
        for (std::size_t c = 0; c < u.cols; ++c) {
            if (c == j) continue;
            double dot = 0.0;
            for (std::size_t i = 0; i < m; ++i) dot += u.at(i, c) * v[i];
            for (std::size_t i = 0; i < m; ++i) v[i] -= dot * u.at(i, c);
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm > 1e-3) {
            for (std::size_t i = 0; i < m; ++i) u.at(i, j) = v[i] / norm;
            return;
        }
    }
    throw NumericError("svd: failed to complete orthonormal basis");
}

SvdResult svd_tall(const Tensor2D& a) {
    const std::size_t m = a.rows;
    const std::size_t n = a.cols;
    Tensor2D b = a;
    Tensor2D v = Tensor2D::identity(n);

    constexpr int kMaxSweeps = 100;
    constexpr double kRelTol = 1e-12;
    double worst = 0.0;
    bool converged = (n <= 1);
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        worst = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double app = col_dot(b, p, p);
                const double aqq = col_dot(b, q, q);
                const double apq = col_dot(b, p, q);
                const double scale = std::sqrt(app * aqq);
                if (scale == 0.0) continue;
                const double rel = std::fabs(apq) / scale;
                worst = std::max(worst, rel);
                if (rel <= kRelTol) continue;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate_cols(b, p, q, c, s);
                rotate_cols(v, p, q, c, s);
            }
        }
        if (worst <= kRelTol) converged = true;
    }
    if (!converged)
        throw NumericError("svd: jacobi sweeps did not converge, residual " +
                           std::to_string(worst));

    std::vector<double> sv(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) sv[j] = std::sqrt(col_dot(b, j, j));

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sv[x] > sv[y]; });

    SvdResult out;
    out.s.resize(n);
    out.u = Tensor2D(m, n);
    out.v = Tensor2D(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        out.s[j] = sv[src];
        for (std::size_t i = 0; i < n; ++i) out.v.at(i, j) = v.at(i, src);
        if (sv[src] > 0.0) {
            for (std::size_t i = 0; i < m; ++i) out.u.at(i, j) = b.at(i, src) / sv[src];
        }
    }
    for (std::size_t j = 0; j < n; ++j)
        if (out.s[j] == 0.0) complete_column(out.u, j);
    return out;
}

}  // namespace

SvdResult svd(const Tensor2D& a) {
    if (a.rows == 0 || a.cols == 0) throw std::invalid_argument("svd: empty matrix");
    require_finite(a, "svd input");
    if (a.rows >= a.cols) return svd_tall(a);
    SvdResult t = svd_tall(transpose(a));
    return SvdResult{std::move(t.v), std::move(t.s), std::move(t.u)};
}

double vec_mean(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("vec_mean: empty input");
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

double vec_variance(std::span<const double> v) {
    const double mu = vec_mean(v);
    double acc = 0.0;
    for (double x : v) acc += (x - mu) * (x - mu);
    return acc / static_cast<double>(v.size());
}

double kurtosis(std::span<const double> v) {
    if (v.size() < 2) throw std::invalid_argument("kurtosis: need at least 2 elements");
    const double mu = vec_mean(v);
    double m2 = 0.0;
    double m4 = 0.0;
    for (double x : v) {
        const double d = x - mu;
        const double d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= static_cast<double>(v.size());
    m4 /= static_cast<double>(v.size());
    if (m2 == 0.0) return 0.0;
    return m4 / (m2 * m2);
}

std::vector<double> softmax(std::span<const double> v, double tau) {
    if (v.empty()) throw std::invalid_argument("softmax: empty input");
    if (!(tau > 0.0)) throw std::invalid_argument("softmax: tau must be > 0");
    const double vmax = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double z = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp((v[i] - vmax) / tau);
        z += out[i];
    }
    for (double& x : out) x /= z;
    return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        if (q[i] == 0.0)
            throw NumericError("kl_divergence: q has zero mass where p does not");
        acc += p[i] * std::log(p[i] / q[i]);
    }
    return acc;
}

}  // namespace mpqdm2
