#include "dive/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dive {

int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) {
            throw DataError("tensor shape has negative extent");
        }
        n *= d;
    }
    return n;
}

Tensor Tensor::full(Shape s, Scalar v) {
    Tensor t(std::move(s));
    t.fill(v);
    return t;
}

Tensor Tensor::randn(Shape s, std::mt19937_64& rng, Scalar stddev, Scalar mean) {
    Tensor t(std::move(s));
    std::normal_distribution<Scalar> dist(mean, stddev);
    for (auto& v : t.data) {
        v = dist(rng);
    }
    return t;
}

void Tensor::fill(Scalar v) {
    std::fill(data.begin(), data.end(), v);
}

void Tensor::add_(const Tensor& o, Scalar scale) {
    if (!same_shape(o)) {
        throw DataError("tensor add: shape mismatch");
    }
    for (size_t i = 0; i < data.size(); ++i) {
        data[i] += scale * o.data[i];
    }
}

void Tensor::scale_(Scalar v) {
    for (auto& x : data) {
        x *= v;
    }
}

Tensor Tensor::reshaped(Shape s) const {
    if (numel_of(s) != numel()) {
        throw DataError("tensor reshape: element count mismatch");
    }
    Tensor t;
    t.shape = std::move(s);
    t.data = data;
    return t;
}

bool Tensor::all_finite() const {
    for (Scalar v : data) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

Tensor operator+(const Tensor& a, const Tensor& b) {
    Tensor r = a;
    r.add_(b);
    return r;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
    Tensor r = a;
    r.add_(b, -1.0);
    return r;
}

Tensor operator*(const Tensor& a, Scalar s) {
    Tensor r = a;
    r.scale_(s);
    return r;
}

Scalar dot(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw DataError("tensor dot: shape mismatch");
    }
    Scalar s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        s += a.data[i] * b.data[i];
    }
    return s;
}

Scalar max_abs(const Tensor& a) {
    Scalar m = 0.0;
    for (Scalar v : a.data) {
        m = std::max(m, std::abs(v));
    }
    return m;
}

Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw DataError("tensor diff: shape mismatch");
    }
    Scalar m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    }
    return m;
}

Scalar mean_squared(const Tensor& a) {
    if (a.numel() == 0) {
        return 0.0;
    }
    Scalar s = 0.0;
    for (Scalar v : a.data) {
        s += v * v;
    }
    return s / Scalar(a.numel());
}

void require_shape(const Tensor& t, const Shape& s, const std::string& what) {
    if (t.shape != s) {
        std::ostringstream os;
        os << what << ": expected shape (";
        for (size_t i = 0; i < s.size(); ++i) {
            os << (i ? "," : "") << s[i];
        }
        os << "), got (";
        for (size_t i = 0; i < t.shape.size(); ++i) {
            os << (i ? "," : "") << t.shape[i];
        }
        os << ")";
        throw DataError(os.str());
    }
}

}  // namespace dive
