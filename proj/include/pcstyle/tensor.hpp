#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace pcstyle {

using Shape = std::vector<int>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array of doubles. Images are stored channel-first ([C, H, W]),
/// point features row-per-point ([N, D]).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
    static Tensor vector(std::vector<double> v) {
        const int n = static_cast<int>(v.size());
        return Tensor({n}, std::move(v));
    }

    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] int rank() const noexcept { return static_cast<int>(shape_.size()); }
    [[nodiscard]] int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    [[nodiscard]] std::span<double> data() noexcept { return data_; }
    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
    [[nodiscard]] double* ptr() noexcept { return data_.data(); }
    [[nodiscard]] const double* ptr() const noexcept { return data_.data(); }
    [[nodiscard]] const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(int i, int j) {
        assert(rank() == 2);
        return data_[static_cast<std::size_t>(i) * shape_[1] + j];
    }
    double at(int i, int j) const {
        assert(rank() == 2);
        return data_[static_cast<std::size_t>(i) * shape_[1] + j];
    }
    double& at(int c, int y, int x) {
        assert(rank() == 3);
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    double at(int c, int y, int x) const {
        assert(rank() == 3);
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }

    [[nodiscard]] double item() const { return data_.at(0); }
    [[nodiscard]] Tensor reshaped(Shape shape) const;
    [[nodiscard]] bool all_finite() const noexcept;

    void fill(double v);
    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(double s);

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

[[nodiscard]] double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace pcstyle
