#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace mpqdm2 {

// Dense row-major matrix of doubles. The only tensor type in the project;
// vectors are represented as 1xN or passed as spans.
struct Tensor2D {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Tensor2D() = default;
    Tensor2D(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const {
        return {data.data() + r * cols, cols};
    }

    std::size_t size() const { return rows * cols; }
    bool empty() const { return data.empty(); }

    static Tensor2D identity(std::size_t n);
};

bool all_finite(const Tensor2D& t);
bool all_finite(std::span<const double> v);

// Throws NumericError naming `what` if any entry is non-finite.
void require_finite(const Tensor2D& t, const std::string& what);

Tensor2D transpose(const Tensor2D& t);
double frobenius_norm(const Tensor2D& t);
double frobenius_distance(const Tensor2D& a, const Tensor2D& b);

// Binary container: magic "T2D1", u32 rows, u32 cols, then rows*cols
// little-endian f64 values. Readers validate the magic and payload size.
void write_t2d(std::ostream& os, const Tensor2D& t);
Tensor2D read_t2d(std::istream& is);
void save_t2d(const std::string& path, const Tensor2D& t);
Tensor2D load_t2d(const std::string& path);

}  // namespace mpqdm2
