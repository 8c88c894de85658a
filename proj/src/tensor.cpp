#include "ssmc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ssmc {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) throw ShapeError("negative extent in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
        throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match buffer of " +
                         std::to_string(data_.size()) + " elements");
    }
}

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : t.data_) x = dist(rng);
    return t;
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& x : t.data_) x = dist(rng);
    return t;
}

int64_t Tensor::dim(int axis) const {
    if (axis < 0 || axis >= rank()) throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    return shape_[static_cast<size_t>(axis)];
}

int64_t Tensor::stride(int axis) const {
    int64_t s = 1;
    for (int a = rank() - 1; a > axis; --a) s *= shape_[static_cast<size_t>(a)];
    return s;
}

namespace {
int64_t flat_offset(const Tensor& t, std::initializer_list<int64_t> idx) {
    if (static_cast<int>(idx.size()) != t.rank()) {
        throw ShapeError("at: fed " + std::to_string(idx.size()) + " indices for " + shape_str(t.shape()));
    }
    int64_t off = 0;
    int axis = 0;
    for (int64_t i : idx) {
        off += i * t.stride(axis);
        ++axis;
    }
    return off;
}
}  // namespace

double& Tensor::at(std::initializer_list<int64_t> idx) { return data_[static_cast<size_t>(flat_offset(*this, idx))]; }

double Tensor::at(std::initializer_list<int64_t> idx) const {
    return data_[static_cast<size_t>(flat_offset(*this, idx))];
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape_) + " is not scalar");
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double x : data_) m = std::max(m, std::abs(x));
    return m;
}

Tensor Tensor::reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(new_shape));
    }
    return Tensor(std::move(new_shape), data_);
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

Tensor t_add(const Tensor& a, const Tensor& b) {
    check_same_shape("t_add", a, b);
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b[i];
    return out;
}

Tensor t_sub(const Tensor& a, const Tensor& b) {
    check_same_shape("t_sub", a, b);
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
    return out;
}

Tensor t_mul(const Tensor& a, const Tensor& b) {
    check_same_shape("t_mul", a, b);
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
    return out;
}

Tensor t_scale(const Tensor& a, double c) {
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
    return out;
}

void t_add_inplace(Tensor& a, const Tensor& b) {
    check_same_shape("t_add_inplace", a, b);
    for (int64_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

void t_axpy_inplace(Tensor& a, double c, const Tensor& b) {
    check_same_shape("t_axpy_inplace", a, b);
    for (int64_t i = 0; i < a.numel(); ++i) a[i] += c * b[i];
}

double t_dot(const Tensor& a, const Tensor& b) {
    check_same_shape("t_dot", a, b);
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

double t_norm(const Tensor& a) { return std::sqrt(t_dot(a, a)); }

double t_max_abs_diff(const Tensor& a, const Tensor& b) {
    check_same_shape("t_max_abs_diff", a, b);
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace ssmc
