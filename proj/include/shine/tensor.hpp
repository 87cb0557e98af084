#pragma once

// Dense row-major double tensor plus the three matmul kernels the autodiff
// tape is built on. Double precision throughout: the gradient checks and
// bit-exact checkpoint resume are specified at double precision.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "shine/rng.hpp"

namespace shine {

struct Tensor {
    std::vector<std::int64_t> dims;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> shape) : dims(std::move(shape)) {
        v.assign(static_cast<std::size_t>(numel_of(dims)), 0.0);
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& d) {
        std::int64_t n = 1;
        for (auto x : d) {
            if (x < 0) throw std::invalid_argument("Tensor: negative dim");
            n *= x;
        }
        return n;
    }

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::int64_t> shape, double value) {
        Tensor t(std::move(shape));
        for (auto& x : t.v) x = value;
        return t;
    }

    static Tensor randn(std::vector<std::int64_t> shape, Rng& rng, double stddev) {
        Tensor t(std::move(shape));
        for (auto& x : t.v) x = rng.gauss(0.0, stddev);
        return t;
    }

    static Tensor from_values(std::vector<std::int64_t> shape, std::vector<double> values) {
        if (numel_of(shape) != static_cast<std::int64_t>(values.size()))
            throw std::invalid_argument("Tensor::from_values: shape/value mismatch");
        Tensor t;
        t.dims = std::move(shape);
        t.v = std::move(values);
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
    bool empty() const { return v.empty(); }
    int rank() const { return static_cast<int>(dims.size()); }

    std::int64_t rows() const { return dims.empty() ? 0 : dims[0]; }
    std::int64_t cols() const {
        std::int64_t c = 1;
        for (std::size_t i = 1; i < dims.size(); ++i) c *= dims[i];
        return c;
    }

    double& at(std::int64_t r, std::int64_t c) { return v[static_cast<std::size_t>(r * cols() + c)]; }
    double at(std::int64_t r, std::int64_t c) const { return v[static_cast<std::size_t>(r * cols() + c)]; }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < dims.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(dims[i]);
        }
        return s + ")";
    }

    void fill(double value) { for (auto& x : v) x = value; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

// C[m,n] += A[m,k] * B[k,n]
inline void matmul_acc_nn(const double* a, const double* b, double* c,
                          std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void matmul_acc_nt(const double* a, const double* b, double* c,
                          std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void matmul_acc_tn(const double* a, const double* b, double* c,
                          std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dims[1] != b.dims[0])
        throw std::invalid_argument("matmul: shape mismatch " + a.shape_str() + " x " + b.shape_str());
    Tensor c({a.dims[0], b.dims[1]});
    matmul_acc_nn(a.v.data(), b.v.data(), c.v.data(), a.dims[0], a.dims[1], b.dims[1]);
    return c;
}

inline double dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) throw std::invalid_argument("dot: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) acc += a.v[i] * b.v[i];
    return acc;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) throw std::invalid_argument("max_abs_diff: size mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::fabs(a.v[i] - b.v[i]));
    return m;
}

}  // namespace shine
