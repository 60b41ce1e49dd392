#include "iconlab/tensor.hpp"

#include "iconlab/error.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace iconlab {

namespace {

// Graph tensors of a few hundred KB are created and freed every step. With
// glibc defaults each one is a fresh mmap and pays its page faults again, so
// keep them on the heap and stop trimming it.
[[maybe_unused]] const bool allocator_tuned = [] {
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TOP_PAD, 64 * 1024 * 1024);
#endif
    return true;
}();

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) {
        if (e < 0) {
            throw ConfigError("negative tensor extent in " + shape_string(shape));
        }
        n *= e;
    }
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
        throw ConfigError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                          shape_string(shape_));
    }
}

Tensor Tensor::column(std::vector<double> values) {
    const auto n = static_cast<std::int64_t>(values.size());
    return Tensor(Shape{n, 1}, std::move(values));
}

std::int64_t Tensor::rows() const noexcept {
    if (shape_.size() >= 2) {
        return shape_[0];
    }
    return 1;
}

std::int64_t Tensor::cols() const noexcept {
    if (shape_.size() >= 2) {
        return static_cast<std::int64_t>(data_.size()) / std::max<std::int64_t>(shape_[0], 1);
    }
    return static_cast<std::int64_t>(data_.size());
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ContractError("item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

}  // namespace iconlab
