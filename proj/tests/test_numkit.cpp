#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "mpqdm2/errors.hpp"
#include "mpqdm2/numkit.hpp"
#include "mpqdm2/rng.hpp"
#include "mpqdm2/tensor.hpp"

using namespace mpqdm2;

namespace {

Tensor2D random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    Tensor2D t(r, c);
    for (double& x : t.data) x = scale * rng.normal();
    return t;
}

// Oracle: plain ijk triple loop, accumulation order independent of matmul's.
Tensor2D matmul_oracle(const Tensor2D& a, const Tensor2D& b) {
    Tensor2D out(a.rows, b.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) acc += a.at(i, k) * b.at(k, j);
            out.at(i, j) = acc;
        }
    return out;
}

// Oracle: eigenvalues of a symmetric matrix by classic two-sided Jacobi.
// Independent of the production one-sided SVD path.
std::vector<double> sym_eigenvalues_oracle(Tensor2D a) {
    const std::size_t n = a.rows;
    double scale = 0.0;
    for (double x : a.data) scale = std::max(scale, std::fabs(x));
    if (scale == 0.0) return std::vector<double>(n, 0.0);
    for (int sweep = 0; sweep < 300; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q)
                off = std::max(off, std::fabs(a.at(p, q)));
        if (off <= 1e-14 * scale) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::fabs(apq) <= 1e-300) continue;
                const double phi = 0.5 * std::atan2(2.0 * apq, a.at(q, q) - a.at(p, p));
                const double c = std::cos(phi);
                const double s = std::sin(phi);
                for (std::size_t i = 0; i < n; ++i) {
                    const double xp = a.at(i, p);
                    const double xq = a.at(i, q);
                    a.at(i, p) = c * xp - s * xq;
                    a.at(i, q) = s * xp + c * xq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double xp = a.at(p, i);
                    const double xq = a.at(q, i);
                    a.at(p, i) = c * xp - s * xq;
                    a.at(q, i) = s * xp + c * xq;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = std::max(0.0, a.at(i, i));
    std::sort(eig.begin(), eig.end(), std::greater<>());
    return eig;
}

void check_svd_contract(const Tensor2D& a) {
    const SvdResult r = svd(a);
    const std::size_t p = std::min(a.rows, a.cols);
    REQUIRE(r.u.rows == a.rows);
    REQUIRE(r.u.cols == p);
    REQUIRE(r.v.rows == a.cols);
    REQUIRE(r.v.cols == p);
    REQUIRE(r.s.size() == p);
    for (std::size_t i = 0; i + 1 < p; ++i) CHECK(r.s[i] >= r.s[i + 1]);
    for (double s : r.s) CHECK(s >= 0.0);

    Tensor2D us(a.rows, p);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < p; ++j) us.at(i, j) = r.u.at(i, j) * r.s[j];
    const Tensor2D recon = matmul(us, transpose(r.v));
    const double tol = 1e-9 * std::max(1.0, frobenius_norm(a));
    CHECK(frobenius_distance(recon, a) <= tol);

    const Tensor2D utu = matmul(transpose(r.u), r.u);
    const Tensor2D vtv = matmul(transpose(r.v), r.v);
    const Tensor2D eye = Tensor2D::identity(p);
    CHECK(frobenius_distance(utu, eye) <= 1e-9);
    CHECK(frobenius_distance(vtv, eye) <= 1e-9);
}

}  // namespace

TEST_CASE("tensor t2d1 round trip preserves bytes") {
    Rng rng(42);
    Tensor2D t = random_tensor(7, 3, rng);
    std::stringstream ss;
    write_t2d(ss, t);
    const std::string payload = ss.str();
    CHECK(payload.size() == 4 + 4 + 4 + 7 * 3 * 8);
    CHECK(payload.substr(0, 4) == "T2D1");
    Tensor2D back = read_t2d(ss);
    REQUIRE(back.rows == t.rows);
    REQUIRE(back.cols == t.cols);
    CHECK(back.data == t.data);
}

TEST_CASE("tensor reader rejects corrupt input") {
    std::stringstream bad("X2D1....");
    CHECK_THROWS_AS(read_t2d(bad), FormatError);

    Tensor2D t(2, 2, 1.0);
    std::stringstream ss;
    write_t2d(ss, t);
    std::string bytes = ss.str();
    bytes.resize(bytes.size() - 5);
    std::stringstream truncated(bytes);
    CHECK_THROWS_AS(read_t2d(truncated), FormatError);
}

TEST_CASE("require_finite flags NaN and infinity") {
    Tensor2D t(2, 2, 0.0);
    CHECK_NOTHROW(require_finite(t, "t"));
    t.at(1, 1) = std::nan("");
    CHECK_THROWS_AS(require_finite(t, "t"), NumericError);
    t.at(1, 1) = HUGE_VAL;
    CHECK_THROWS_AS(require_finite(t, "t"), NumericError);
}

TEST_CASE("rng streams are deterministic and split-independent") {
    Rng a(123);
    Rng b(123);
    for (int i = 0; i < 64; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng parent(7);
    const std::uint64_t before = Rng(7).split(3).next_u64();
    Rng child = parent.split(3);
    (void)parent.next_u64();  // advancing the parent must not affect the child
    CHECK(child.next_u64() == before);

    Rng c1 = Rng(7).split(1);
    Rng c2 = Rng(7).split(2);
    int same = 0;
    for (int i = 0; i < 64; ++i)
        if (c1.next_u64() == c2.next_u64()) ++same;
    CHECK(same == 0);
}

TEST_CASE("rng draws live in their advertised ranges") {
    Rng rng(99);
    for (int i = 0; i < 1000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(rng.below(17) < 17);
    }
    double mean = 0.0;
    double var = 0.0;
    const int n = 20000;
    std::vector<double> draws(n);
    for (int i = 0; i < n; ++i) draws[i] = rng.normal();
    for (double x : draws) mean += x;
    mean /= n;
    for (double x : draws) var += (x - mean) * (x - mean);
    var /= n;
    CHECK(std::fabs(mean) < 0.03);
    CHECK(std::fabs(var - 1.0) < 0.05);
}

TEST_CASE("matmul matches hand example and identity") {
    Tensor2D a(2, 3);
    a.data = {1, 2, 3, 4, 5, 6};
    Tensor2D b(3, 2);
    b.data = {7, 8, 9, 10, 11, 12};
    const Tensor2D c = matmul(a, b);
    CHECK(c.at(0, 0) == 58.0);
    CHECK(c.at(0, 1) == 64.0);
    CHECK(c.at(1, 0) == 139.0);
    CHECK(c.at(1, 1) == 154.0);

    const Tensor2D eye = Tensor2D::identity(3);
    const Tensor2D same = matmul(eye, b);
    CHECK(same.data == b.data);

    CHECK_THROWS_AS(matmul(a, a), std::invalid_argument);
}

TEST_CASE("matmul agrees with triple-loop oracle on random matrices") {
    Rng rng(2024);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t m = 1 + rng.below(8);
        const std::size_t k = 1 + rng.below(8);
        const std::size_t n = 1 + rng.below(8);
        Tensor2D a = random_tensor(m, k, rng);
        Tensor2D b = random_tensor(k, n, rng);
        const Tensor2D got = matmul(a, b);
        const Tensor2D want = matmul_oracle(a, b);
        CHECK(frobenius_distance(got, want) <= 1e-12 * std::max(1.0, frobenius_norm(want)));
    }
}

TEST_CASE("svd of a diagonal matrix returns sorted absolute diagonal") {
    Tensor2D a(3, 3, 0.0);
    a.at(0, 0) = 1.0;
    a.at(1, 1) = -3.0;
    a.at(2, 2) = 2.0;
    const SvdResult r = svd(a);
    CHECK(r.s[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(r.s[1] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(r.s[2] == doctest::Approx(1.0).epsilon(1e-12));
    check_svd_contract(a);
}

TEST_CASE("svd handles zero, identity, and single-column matrices") {
    check_svd_contract(Tensor2D(3, 2, 0.0));
    check_svd_contract(Tensor2D::identity(4));
    Tensor2D col(5, 1);
    col.data = {3, 0, 4, 0, 0};
    const SvdResult r = svd(col);
    CHECK(r.s[0] == doctest::Approx(5.0).epsilon(1e-12));
    check_svd_contract(col);
}

TEST_CASE("svd reconstruction and orthonormality on random shapes") {
    Rng rng(31337);
    for (std::size_t rows : {6u, 4u, 5u, 12u}) {
        for (std::size_t cols : {4u, 6u, 5u, 3u}) {
            Tensor2D a = random_tensor(rows, cols, rng, 2.0);
            check_svd_contract(a);
        }
    }
}

TEST_CASE("svd singular values match gram eigenvalue oracle") {
    Rng rng(555);
    for (int trial = 0; trial < 8; ++trial) {
        const std::size_t m = 3 + rng.below(10);
        const std::size_t n = 2 + rng.below(6);
        Tensor2D a = random_tensor(m, n, rng);
        const SvdResult r = svd(a);
        // gram matrix over the smaller side so eigenvalue count equals min(m, n)
        const Tensor2D gram = (m >= n) ? matmul(transpose(a), a) : matmul(a, transpose(a));
        const std::vector<double> eig = sym_eigenvalues_oracle(gram);
        REQUIRE(eig.size() == r.s.size());
        const double scale = std::max(1.0, frobenius_norm(a));
        for (std::size_t i = 0; i < eig.size(); ++i)
            CHECK(std::fabs(r.s[i] - std::sqrt(eig[i])) <= 1e-7 * scale);
    }
}

TEST_CASE("svd handles rank-deficient input") {
    Rng rng(77);
    Tensor2D base = random_tensor(6, 2, rng);
    Tensor2D mix(2, 4);
    for (double& x : mix.data) x = rng.normal();
    const Tensor2D a = matmul(base, mix);  // rank <= 2 in a 6x4 matrix
    const SvdResult r = svd(a);
    CHECK(r.s[2] <= 1e-9 * std::max(1.0, r.s[0]));
    CHECK(r.s[3] <= 1e-9 * std::max(1.0, r.s[0]));
    check_svd_contract(a);
}

TEST_CASE("svd is deterministic") {
    Rng rng(4242);
    Tensor2D a = random_tensor(8, 5, rng);
    const SvdResult r1 = svd(a);
    const SvdResult r2 = svd(a);
    CHECK(r1.s == r2.s);
    CHECK(r1.u.data == r2.u.data);
    CHECK(r1.v.data == r2.v.data);
}

TEST_CASE("kurtosis matches closed forms") {
    const std::vector<double> pm1 = {1.0, -1.0, 1.0, -1.0};
    CHECK(kurtosis(pm1) == doctest::Approx(1.0).epsilon(1e-12));

    // mean 2, m2 = 16, m4 = 832 -> 832/256
    const std::vector<double> spike = {0.0, 0.0, 0.0, 0.0, 10.0};
    CHECK(kurtosis(spike) == doctest::Approx(3.25).epsilon(1e-12));

    const std::vector<double> flat = {5.0, 5.0, 5.0};
    CHECK(kurtosis(flat) == 0.0);

    const std::vector<double> tiny = {1.0};
    CHECK_THROWS_AS(kurtosis(tiny), std::invalid_argument);
}

TEST_CASE("kurtosis of a large normal sample is near 3") {
    Rng rng(808);
    std::vector<double> v(100000);
    for (double& x : v) x = rng.normal();
    CHECK(kurtosis(v) == doctest::Approx(3.0).epsilon(0.04));
}

TEST_CASE("kurtosis is invariant under affine maps") {
    Rng rng(909);
    std::vector<double> v(512);
    for (double& x : v) x = rng.normal() + 0.3 * rng.uniform();
    const double base = kurtosis(v);
    for (double a : {2.0, -0.7, 13.5}) {
        std::vector<double> w(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) w[i] = a * v[i] + 4.2;
        CHECK(std::fabs(kurtosis(w) - base) <= 1e-9 * std::max(1.0, std::fabs(base)));
    }
}

TEST_CASE("softmax matches closed forms and stays normalized") {
    const std::vector<double> v = {0.0, std::log(3.0)};
    const std::vector<double> p = softmax(v, 1.0);
    CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-12));

    const std::vector<double> c = {4.0, 4.0, 4.0};
    for (double x : softmax(c, 0.5)) CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    // large logits must not overflow thanks to max subtraction
    const std::vector<double> big = {1000.0, 999.0};
    const std::vector<double> q = softmax(big, 1.0);
    CHECK(all_finite(q));
    const double want = 1.0 / (1.0 + std::exp(-1.0));
    CHECK(q[0] == doctest::Approx(want).epsilon(1e-12));

    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> r(1 + rng.below(40));
        for (double& x : r) x = 50.0 * rng.normal();
        const double tau = std::exp(rng.uniform(-3.0, 3.0));
        const std::vector<double> s = softmax(r, tau);
        double sum = 0.0;
        for (double x : s) {
            CHECK(x >= 0.0);
            sum += x;
        }
        CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }
    CHECK_THROWS_AS(softmax(v, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(softmax(v, -1.0), std::invalid_argument);
}

TEST_CASE("softmax is shift invariant") {
    Rng rng(12);
    std::vector<double> v(16);
    for (double& x : v) x = rng.normal() * 10.0;
    const std::vector<double> base = softmax(v, 0.3);
    for (double shift : {1.0, -250.0, 3e3}) {
        std::vector<double> w(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) w[i] = v[i] + shift;
        const std::vector<double> s = softmax(w, 0.3);
        for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::fabs(s[i] - base[i]) <= 1e-12);
    }
}

TEST_CASE("kl divergence closed forms, positivity, and error paths") {
    const std::vector<double> p = {1.0, 0.0};
    const std::vector<double> u = {0.5, 0.5};
    CHECK(kl_divergence(p, u) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(kl_divergence(u, u) == 0.0);

    // 0 * log 0 convention: q may vanish where p does
    const std::vector<double> q0 = {1.0, 0.0};
    CHECK(kl_divergence(p, q0) == 0.0);
    CHECK_THROWS_AS(kl_divergence(u, q0), NumericError);

    Rng rng(13);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> a(8), b(8);
        for (double& x : a) x = rng.uniform(0.01, 1.0);
        for (double& x : b) x = rng.uniform(0.01, 1.0);
        const double za = std::accumulate(a.begin(), a.end(), 0.0);
        const double zb = std::accumulate(b.begin(), b.end(), 0.0);
        for (double& x : a) x /= za;
        for (double& x : b) x /= zb;
        double oracle = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) oracle += a[i] * std::log(a[i] / b[i]);
        const double got = kl_divergence(a, b);
        CHECK(got == doctest::Approx(oracle).epsilon(1e-12));
        CHECK(got >= -1e-12);
    }
}
