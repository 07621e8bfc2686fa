#pragma once

#include <Eigen/Core>

#include <cassert>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <vector>

namespace nervdiff {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
    Index n = 1;
    for (Index d : s) n *= d;
    return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

// Dense n-d array with value semantics. Data is a flat row-major buffer;
// Eigen maps provide the 1-d and 2-d math views.
template <typename Scalar>
class Tensor {
public:
    using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MatMap = Eigen::Map<RowMat>;
    using ConstMatMap = Eigen::Map<const RowMat>;
    using ArrMap = Eigen::Map<Storage>;
    using ConstArrMap = Eigen::Map<const Storage>;

    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Storage::Zero(shape_numel(shape_))) {}
    Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)), data_(Storage::Constant(shape_numel(shape_), fill)) {}

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, Scalar v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(Scalar v) { return Tensor({1}, v); }
    static Tensor from_data(Shape shape, const std::vector<Scalar>& values) {
        Tensor t(std::move(shape));
        assert(static_cast<Index>(values.size()) == t.size());
        std::copy(values.begin(), values.end(), t.data());
        return t;
    }

    const Shape& shape() const { return shape_; }
    Index rank() const { return static_cast<Index>(shape_.size()); }
    Index dim(Index i) const { return shape_[static_cast<size_t>(i)]; }
    Index size() const { return data_.size(); }
    bool empty() const { return data_.size() == 0; }

    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }

    Scalar& operator[](Index i) { return data_[i]; }
    Scalar operator[](Index i) const { return data_[i]; }

    // Row-major linear offset for a multi-index.
    Index offset(std::initializer_list<Index> idx) const {
        assert(static_cast<Index>(idx.size()) == rank());
        Index off = 0;
        size_t k = 0;
        for (Index i : idx) off = off * shape_[k++] + i;
        return off;
    }
    Scalar& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
    Scalar at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

    ArrMap array() { return ArrMap(data_.data(), data_.size()); }
    ConstArrMap array() const { return ConstArrMap(data_.data(), data_.size()); }

    // 2-d view; the product of rows*cols must equal size().
    MatMap mat(Index rows, Index cols) {
        assert(rows * cols == size());
        return MatMap(data_.data(), rows, cols);
    }
    ConstMatMap mat(Index rows, Index cols) const {
        assert(rows * cols == size());
        return ConstMatMap(data_.data(), rows, cols);
    }
    // View as [dim(0), size/dim(0)]; the natural matrix view of a 2-d tensor.
    MatMap mat2() { return mat(shape_[0], size() / shape_[0]); }
    ConstMatMap mat2() const { return mat(shape_[0], size() / shape_[0]); }

    Tensor reshaped(Shape shape) const {
        assert(shape_numel(shape) == size());
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    void set_zero() { data_.setZero(); }

    bool all_finite() const {
        for (Index i = 0; i < data_.size(); ++i)
            if (!std::isfinite(static_cast<double>(data_[i]))) return false;
        return true;
    }

    template <typename Other>
    Tensor<Other> cast() const {
        Tensor<Other> t(shape_);
        for (Index i = 0; i < size(); ++i) t[i] = static_cast<Other>(data_[i]);
        return t;
    }

private:
    Shape shape_;
    Storage data_;

    template <typename S>
    friend class Tensor;
};

template <typename Scalar>
Scalar max_abs(const Tensor<Scalar>& t) {
    return t.size() ? t.array().abs().maxCoeff() : Scalar(0);
}

template <typename Scalar>
Scalar mean_sq_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    assert(a.size() == b.size());
    return (a.array() - b.array()).square().mean();
}

// PSNR with pixels in [-1, 1]; the peak-to-peak range of 2 maps to 1.
template <typename Scalar>
double psnr_db(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    double mse = static_cast<double>(mean_sq_diff(a, b)) / 4.0;
    if (mse <= 0) return 99.0;
    return -10.0 * std::log10(mse);
}

}  // namespace nervdiff
