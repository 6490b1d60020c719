#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "dive/errors.hpp"

namespace dive {

using Scalar = double;
using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& s);

// Dense row-major tensor. All numeric state in the pipeline lives in these;
// checkpoints store them as float32.
struct Tensor {
    Shape shape;
    std::vector<Scalar> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(size_t(numel_of(shape)), 0.0) {}
    Tensor(Shape s, std::vector<Scalar> d) : shape(std::move(s)), data(std::move(d)) {}

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, Scalar v);
    static Tensor randn(Shape s, std::mt19937_64& rng, Scalar stddev = 1.0, Scalar mean = 0.0);

    int64_t numel() const { return int64_t(data.size()); }
    int64_t ndim() const { return int64_t(shape.size()); }
    int64_t size(int i) const { return shape[size_t(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Scalar& operator[](int64_t i) { return data[size_t(i)]; }
    Scalar operator[](int64_t i) const { return data[size_t(i)]; }

    Scalar& at(int64_t i, int64_t j) { return data[size_t(i * shape[1] + j)]; }
    Scalar at(int64_t i, int64_t j) const { return data[size_t(i * shape[1] + j)]; }
    Scalar& at(int64_t i, int64_t j, int64_t k) {
        return data[size_t((i * shape[1] + j) * shape[2] + k)];
    }
    Scalar at(int64_t i, int64_t j, int64_t k) const {
        return data[size_t((i * shape[1] + j) * shape[2] + k)];
    }
    Scalar& at(int64_t i, int64_t j, int64_t k, int64_t l) {
        return data[size_t(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }
    Scalar at(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return data[size_t(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }

    void fill(Scalar v);
    void zero() { fill(0.0); }
    void add_(const Tensor& o, Scalar scale = 1.0);
    void scale_(Scalar v);
    Tensor reshaped(Shape s) const;

    bool all_finite() const;
};

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, Scalar s);

Scalar dot(const Tensor& a, const Tensor& b);
Scalar max_abs(const Tensor& a);
Scalar max_abs_diff(const Tensor& a, const Tensor& b);
Scalar mean_squared(const Tensor& a);

void require_shape(const Tensor& t, const Shape& s, const std::string& what);

}  // namespace dive
