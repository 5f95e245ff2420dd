#ifndef PSRLAB_TENSOR_HPP_
#define PSRLAB_TENSOR_HPP_

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "psrlab/common.hpp"

namespace psrlab {

// Dense row-major tensor of 64-bit reals. The whole stack runs in f64.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
    Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel_of(shape)) throw DataError("tensor: data length does not match shape");
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<std::size_t> s, double v) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t dim(std::size_t i) const { return shape.at(i); }

    double& at2(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    double at2(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const;

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

}  // namespace psrlab

#endif  // PSRLAB_TENSOR_HPP_
