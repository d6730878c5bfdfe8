#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ftlab/errors.hpp"
#include "ftlab/rng.hpp"

namespace ftlab {

template <typename Real>
class TapeCore;

/// Global toggle for NaN/Inf output validation. Off by default; the
/// verification suites switch it on.
inline bool& debug_checks() {
    static bool enabled = false;
    return enabled;
}

inline std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

template <typename Real>
struct TensorData {
    std::vector<std::size_t> shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // empty until first accumulation
    bool requires_grad = false;

    // set when an op on an active tape produced this tensor
    std::weak_ptr<TapeCore<Real>> producer;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), Real(0));
    }
};

/// Dense n-dimensional array of Real with optional gradient. Cheap to
/// copy: copies share the underlying storage (clone() for a deep copy).
template <typename Real>
class Tensor {
public:
    Tensor() : d_(std::make_shared<TensorData<Real>>()) {}

    static Tensor zeros(std::vector<std::size_t> shape) {
        Tensor t;
        t.d_->shape = std::move(shape);
        t.d_->data.assign(numel_of(t.d_->shape), Real(0));
        return t;
    }

    static Tensor full(std::vector<std::size_t> shape, Real value) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.d_->data) v = value;
        return t;
    }

    static Tensor scalar(Real value) { return full({1}, value); }

    static Tensor from(std::vector<std::size_t> shape, std::vector<Real> values) {
        if (numel_of(shape) != values.size()) {
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_to_string(shape));
        }
        Tensor t;
        t.d_->shape = std::move(shape);
        t.d_->data = std::move(values);
        return t;
    }

    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, Real stddev) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.d_->data) v = static_cast<Real>(rng.next_gaussian()) * stddev;
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.d_->shape = d_->shape;
        t.d_->data = d_->data;
        t.d_->requires_grad = d_->requires_grad;
        return t;
    }

    const std::vector<std::size_t>& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t numel() const { return d_->data.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape.at(i); }

    /// Rows/cols of a 2-D tensor (1-D counts as a single row).
    std::size_t rows() const { return rank() == 2 ? d_->shape[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? d_->shape[1] : numel(); }

    Real* data() { return d_->data.data(); }
    const Real* data() const { return d_->data.data(); }
    std::vector<Real>& values() { return d_->data; }
    const std::vector<Real>& values() const { return d_->data; }

    Real at(std::size_t i) const { return d_->data.at(i); }
    Real at(std::size_t r, std::size_t c) const { return d_->data.at(r * cols() + c); }
    Real& at(std::size_t i) { return d_->data.at(i); }
    Real& at(std::size_t r, std::size_t c) { return d_->data.at(r * cols() + c); }

    Real item() const {
        if (numel() != 1) {
            throw DimensionError("item() requires a scalar tensor, got shape " +
                                 shape_to_string(d_->shape));
        }
        return d_->data[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool flag) {
        d_->requires_grad = flag;
        return *this;
    }

    bool has_grad() const { return !d_->grad.empty(); }
    const std::vector<Real>& grad() const {
        if (d_->grad.empty()) throw Error("tensor has no gradient");
        return d_->grad;
    }
    void zero_grad() { d_->grad.clear(); }

    void check_finite(const char* what) const {
        if (!debug_checks()) return;
        for (Real v : d_->data) {
            if (!std::isfinite(static_cast<double>(v))) {
                throw FiniteError(std::string("non-finite value in ") + what);
            }
        }
    }

    TensorData<Real>* raw() const { return d_.get(); }
    const std::shared_ptr<TensorData<Real>>& handle() const { return d_; }

private:
    static std::size_t numel_of(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) {
            if (d == 0) throw DimensionError("zero dimension in shape " + shape_to_string(shape));
            n *= d;
        }
        return shape.empty() ? 0 : n;
    }

    std::shared_ptr<TensorData<Real>> d_;
};

template <typename Real>
bool same_shape(const Tensor<Real>& a, const Tensor<Real>& b) {
    return a.shape() == b.shape();
}

template <typename Real>
bool bitwise_equal(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (!same_shape(a, b)) return false;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        if (std::memcmp(&a.data()[i], &b.data()[i], sizeof(Real)) != 0) return false;
    }
    return true;
}

template <typename Real>
Real max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (!same_shape(a, b)) throw DimensionError("max_abs_diff shape mismatch");
    Real m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    }
    return m;
}

}  // namespace ftlab
