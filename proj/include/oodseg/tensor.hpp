#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace oodseg {

/// Dense row-major tensor of doubles (last dimension fastest). Batched
/// volumes use dims (B, C, Z, Y, X), which makes X the contiguous axis and
/// matches the x-fastest voxel order of the on-disk volume format.
struct Tensor {
    std::vector<std::int64_t> dims;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> d);

    static Tensor zeros(std::vector<std::int64_t> dims);
    static Tensor full(std::vector<std::int64_t> dims, double value);

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t dim(int i) const { return dims[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(dims.size()); }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    void fill(double v);
    bool same_shape(const Tensor& other) const { return dims == other.dims; }
    bool all_finite() const;

    /// Squared L2 norm of all entries.
    double sq_norm() const;
};

/// y += a * x, elementwise; shapes must match.
void axpy(double a, const Tensor& x, Tensor& y);

std::string shape_string(const Tensor& t);

} // namespace oodseg
