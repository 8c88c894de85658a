#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssmc {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

// Thrown by ops that receive incompatible shapes; message names the op and
// the offending shapes.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when a computation produces non-finite values (exit code 3 at the CLI).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense n-dimensional array of doubles with value semantics. Copies are deep;
// anything saved for backward is therefore a snapshot, so in-place patching
// during a forward pass cannot corrupt gradients.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double v);
    static Tensor scalar(double v) { return Tensor({}, {v}); }
    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
    static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int axis) const;
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool defined() const { return !shape_.empty() || !data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Row-major multi-index access.
    double& at(std::initializer_list<int64_t> idx);
    double at(std::initializer_list<int64_t> idx) const;

    double item() const;

    int64_t stride(int axis) const;

    bool all_finite() const;
    double max_abs() const;

    Tensor reshaped(Shape new_shape) const;

private:
    Shape shape_;
    std::vector<double> data_;
};

int64_t shape_numel(const Shape& s);
bool same_shape(const Tensor& a, const Tensor& b);
void check_same_shape(const char* op, const Tensor& a, const Tensor& b);

// Non-taped arithmetic used by backward kernels, optimizers and analysis code.
Tensor t_add(const Tensor& a, const Tensor& b);
Tensor t_sub(const Tensor& a, const Tensor& b);
Tensor t_mul(const Tensor& a, const Tensor& b);
Tensor t_scale(const Tensor& a, double c);
void t_add_inplace(Tensor& a, const Tensor& b);
void t_axpy_inplace(Tensor& a, double c, const Tensor& b);  // a += c*b
double t_dot(const Tensor& a, const Tensor& b);
double t_norm(const Tensor& a);
double t_max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace ssmc
