#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace toposeg {

class Rng;

int64_t shape_numel(const std::vector<int>& shape);

/// Dense row-major tensor of doubles. A rank-0 tensor holds one scalar.
/// Tensors are plain values: copies are deep, and a tensor handed to the
/// graph is never mutated afterwards.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double v);
    static Tensor uniform(std::vector<int> shape, Rng& rng, double lo = 0.0, double hi = 1.0);
    static Tensor normal(std::vector<int> shape, Rng& rng, double stddev = 1.0);

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // accessors for the common ranks; no bounds checks beyond debug builds
    double& at2(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    double at2(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    double& at3(int i, int j, int k) {
        return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    double at3(int i, int j, int k) const {
        return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    double& at4(int b, int c, int y, int x) {
        return data_[((static_cast<size_t>(b) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    double at4(int b, int c, int y, int x) const {
        return data_[((static_cast<size_t>(b) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;
    double max_abs() const;
    std::string shape_str() const;

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

} // namespace toposeg
