#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cafe {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                           [](std::int64_t a, int b) { return a * b; });
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dense row-major array. Value semantics; copies are deep.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel(shape_)), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != numel(shape_))
            throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
    }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    /// Number of elements per leading-axis entry (per sample for batched data).
    std::int64_t row_size() const { return shape_.empty() || shape_[0] == 0 ? 0 : size() / shape_[0]; }
    std::span<T> row(int i) { return std::span<T>(data_).subspan(static_cast<std::size_t>(i * row_size()), static_cast<std::size_t>(row_size())); }
    std::span<const T> row(int i) const {
        return std::span<const T>(data_).subspan(static_cast<std::size_t>(i * row_size()), static_cast<std::size_t>(row_size()));
    }

    Tensor reshaped(Shape shape) const {
        if (numel(shape) != size())
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        return Tensor(std::move(shape), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    /// Rows [begin, end) along the leading axis.
    Tensor slice_rows(int begin, int end) const {
        Shape s = shape_;
        s[0] = end - begin;
        auto first = data_.begin() + static_cast<std::ptrdiff_t>(begin * row_size());
        return Tensor(std::move(s), std::vector<T>(first, first + static_cast<std::ptrdiff_t>((end - begin) * row_size())));
    }

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

/// Concatenate along the leading axis.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) return {};
    Shape s = parts.front().shape();
    int rows = 0;
    for (const auto& p : parts) {
        Shape tail(p.shape().begin() + 1, p.shape().end());
        Shape ref(s.begin() + 1, s.end());
        if (tail != ref) throw ShapeError("concat_rows: inconsistent trailing shape");
        rows += p.dim(0);
    }
    s[0] = rows;
    std::vector<T> data;
    data.reserve(static_cast<std::size_t>(numel(s)));
    for (const auto& p : parts) data.insert(data.end(), p.storage().begin(), p.storage().end());
    return Tensor<T>(std::move(s), std::move(data));
}

}  // namespace cafe
