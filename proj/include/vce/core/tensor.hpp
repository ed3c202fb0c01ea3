#pragma once

#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vce {

using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

// Dense row-major owning tensor. Images are stored N x C x H x W; with a
// single channel this is byte-compatible with the N x H x W x 1 file layout.
template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw std::invalid_argument("tensor data size does not match shape " +
                                        shape_str(shape_));
    }

    const Shape& shape() const { return shape_; }
    int dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // Number of elements per leading-dimension entry.
    std::size_t row_size() const { return shape_.empty() ? 1 : data_.size() / shape_[0]; }

    void reshape(Shape shape) {
        if (shape_numel(shape) != data_.size())
            throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " +
                                        shape_str(shape));
        shape_ = std::move(shape);
    }
    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

// Extract rows [begin, begin + count) along the leading dimension.
template <class T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t begin, std::size_t count) {
    Shape shape = t.shape();
    shape[0] = static_cast<int>(count);
    const std::size_t row = t.row_size();
    std::vector<T> data(t.data() + begin * row, t.data() + (begin + count) * row);
    return Tensor<T>(std::move(shape), std::move(data));
}

// Gather rows by index along the leading dimension.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& t, std::span<const std::size_t> rows) {
    Shape shape = t.shape();
    shape[0] = static_cast<int>(rows.size());
    const std::size_t row = t.row_size();
    std::vector<T> data(rows.size() * row);
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(t.data() + rows[i] * row, t.data() + (rows[i] + 1) * row, data.data() + i * row);
    return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace vce
