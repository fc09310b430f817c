#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "blmrob/errors.hpp"

namespace blmrob::ad {

// Dense row-major array of doubles, rank 0..3. Rank 0 is a scalar
// (empty shape, one element).
class Array {
public:
    std::vector<int> shape;
    std::vector<double> data;

    Array() = default;
    explicit Array(std::vector<int> shape_) : shape(std::move(shape_)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }
    Array(std::vector<int> shape_, std::vector<double> data_)
        : shape(std::move(shape_)), data(std::move(data_)) {
        if (static_cast<long long>(data.size()) != numel_of(shape))
            throw ShapeMismatch("Array: data length does not match shape");
    }

    static Array zeros(std::vector<int> shape_) { return Array(std::move(shape_)); }
    static Array full(std::vector<int> shape_, double v) {
        Array a(std::move(shape_));
        std::fill(a.data.begin(), a.data.end(), v);
        return a;
    }
    static Array scalar(double v) {
        Array a;
        a.data.assign(1, v);
        return a;
    }

    int rank() const { return static_cast<int>(shape.size()); }
    long long numel() const { return static_cast<long long>(data.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    double& operator()(int i) { return data[static_cast<size_t>(i)]; }
    double operator()(int i) const { return data[static_cast<size_t>(i)]; }
    double& operator()(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double operator()(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double& operator()(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double operator()(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }

    bool same_shape(const Array& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static long long numel_of(const std::vector<int>& shape) {
        long long n = 1;
        for (int d : shape) {
            if (d < 0) throw ShapeMismatch("Array: negative dimension");
            n *= d;
        }
        return n;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string r = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + ")";
}

}  // namespace blmrob::ad
