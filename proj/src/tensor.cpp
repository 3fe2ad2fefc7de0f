#include "mpqdm2/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "mpqdm2/errors.hpp"

namespace mpqdm2 {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");
static_assert(sizeof(double) == 8, "serialization assumes IEEE-754 binary64");

Tensor2D Tensor2D::identity(std::size_t n) {
    Tensor2D t(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

bool all_finite(const Tensor2D& t) { return all_finite(std::span<const double>(t.data)); }

void require_finite(const Tensor2D& t, const std::string& what) {
    if (!all_finite(t)) throw NumericError("non-finite values in " + what);
}

Tensor2D transpose(const Tensor2D& t) {
    Tensor2D out(t.cols, t.rows);
    for (std::size_t r = 0; r < t.rows; ++r)
        for (std::size_t c = 0; c < t.cols; ++c) out.at(c, r) = t.at(r, c);
    return out;
}

double frobenius_norm(const Tensor2D& t) {
    double acc = 0.0;
    for (double x : t.data) acc += x * x;
    return std::sqrt(acc);
}

double frobenius_distance(const Tensor2D& a, const Tensor2D& b) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw std::invalid_argument("frobenius_distance: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

static constexpr char kTensorMagic[4] = {'T', '2', 'D', '1'};

static void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

static std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw FormatError("tensor stream truncated in header");
    return v;
}

void write_t2d(std::ostream& os, const Tensor2D& t) {
    if (t.rows > 0xffffffffull || t.cols > 0xffffffffull)
        throw FormatError("tensor too large for T2D1 container");
    os.write(kTensorMagic, 4);
    write_u32(os, static_cast<std::uint32_t>(t.rows));
    write_u32(os, static_cast<std::uint32_t>(t.cols));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!os) throw FormatError("tensor stream write failed");
}

Tensor2D read_t2d(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kTensorMagic, 4) != 0)
        throw FormatError("bad tensor magic, expected T2D1");
    const std::uint32_t rows = read_u32(is);
    const std::uint32_t cols = read_u32(is);
    Tensor2D t(rows, cols);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!is) throw FormatError("tensor stream truncated in payload");
    return t;
}

void save_t2d(const std::string& path, const Tensor2D& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for writing: " + path);
    write_t2d(os, t);
}

Tensor2D load_t2d(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open for reading: " + path);
    return read_t2d(is);
}

}  // namespace mpqdm2
