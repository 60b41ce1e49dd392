#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace iconlab {

using Shape = std::vector<std::int64_t>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
/// Storage is over-aligned so vectorised kernels split rows the same way on
/// every call; results then do not depend on where the buffer landed.
using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles. Rank 0 is a scalar; rank 1 and 2 are
/// viewed as matrices through mat() (a rank-1 tensor of n entries is 1 x n).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }
    static Tensor matrix(std::int64_t rows, std::int64_t cols, double fill = 0.0) {
        return Tensor(Shape{rows, cols}, fill);
    }
    static Tensor column(std::vector<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    std::int64_t rank() const noexcept { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t rows() const noexcept;
    std::int64_t cols() const noexcept;

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    Storage& storage() noexcept { return data_; }
    const Storage& storage() const noexcept { return data_; }
    std::vector<double> to_vector() const { return {data_.begin(), data_.end()}; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::int64_t r, std::int64_t c) {
        return data_[static_cast<std::size_t>(r * cols() + c)];
    }
    double operator()(std::int64_t r, std::int64_t c) const {
        return data_[static_cast<std::size_t>(r * cols() + c)];
    }

    /// Value of a one-element tensor.
    double item() const;

    MatMap mat() { return MatMap(data_.data(), rows(), cols()); }
    ConstMatMap mat() const { return ConstMatMap(data_.data(), rows(), cols()); }

    bool all_finite() const noexcept;
    void fill(double v);

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    Storage data_;
};

}  // namespace iconlab
