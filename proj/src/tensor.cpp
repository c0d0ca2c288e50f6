#include "oodseg/tensor.hpp"

#include <cmath>
#include <string>

#include "oodseg/common.hpp"

namespace oodseg {

Tensor::Tensor(std::vector<std::int64_t> d) : dims(std::move(d)) {
    std::int64_t n = 1;
    for (std::int64_t x : dims) {
        if (x < 0) fail(Status::invalid_argument, "negative tensor dimension");
        n *= x;
    }
    data.assign(static_cast<std::size_t>(n), 0.0);
}

Tensor Tensor::zeros(std::vector<std::int64_t> dims) {
    return Tensor(std::move(dims));
}

Tensor Tensor::full(std::vector<std::int64_t> dims, double value) {
    Tensor t(std::move(dims));
    t.fill(value);
    return t;
}

void Tensor::fill(double v) {
    for (double& x : data) x = v;
}

bool Tensor::all_finite() const {
    for (double x : data)
        if (!std::isfinite(x)) return false;
    return true;
}

double Tensor::sq_norm() const {
    double s = 0.0;
    for (double x : data) s += x * x;
    return s;
}

void axpy(double a, const Tensor& x, Tensor& y) {
    if (!x.same_shape(y)) fail(Status::internal, "axpy: shape mismatch");
    const double* xp = x.ptr();
    double* yp = y.ptr();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) yp[i] += a * xp[i];
}

std::string shape_string(const Tensor& t) {
    std::string s = "(";
    for (std::size_t i = 0; i < t.dims.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.dims[i]);
    }
    return s + ")";
}

} // namespace oodseg
