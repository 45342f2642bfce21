#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "terlab/error.hpp"

namespace terlab {

// Dense row-major 2-D tensor of doubles. Row count of zero is legal (empty
// token sequences); data.size() == rows*cols always holds.
class Tensor2D {
public:
    Tensor2D() = default;

    Tensor2D(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("Tensor2D: data length " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(rows_) + "x" +
                             std::to_string(cols_));
        }
    }

    static Tensor2D full(std::size_t rows, std::size_t cols, double v) {
        Tensor2D t(rows, cols);
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor2D from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        Tensor2D t;
        t.rows_ = rows.size();
        t.cols_ = rows.size() ? rows.begin()->size() : 0;
        t.data_.reserve(t.rows_ * t.cols_);
        for (const auto& r : rows) {
            if (r.size() != t.cols_) throw ShapeError("Tensor2D::from_rows: ragged rows");
            t.data_.insert(t.data_.end(), r.begin(), r.end());
        }
        return t;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double* row(std::size_t r) { return data_.data() + r * cols_; }
    const double* row(std::size_t r) const { return data_.data() + r * cols_; }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    bool same_shape(const Tensor2D& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    const std::vector<double>& vec() const { return data_; }
    std::vector<double>& vec() { return data_; }

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor2D& a, const Tensor2D& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
    }
}

} // namespace terlab
