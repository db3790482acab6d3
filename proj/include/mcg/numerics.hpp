#pragma once

#include <functional>
#include <vector>

#include "mcg/tensor.hpp"

namespace mcg {

// Raised when a computation produces non-finite values.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Single-channel spatial field, row-major.
struct Map2D {
    int h = 0;
    int w = 0;
    std::vector<double> v;

    Map2D() = default;
    Map2D(int height, int width, double fill = 0.0);

    double& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
    double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
    std::size_t size() const { return v.size(); }
    bool same_shape(const Map2D& o) const { return h == o.h && w == o.w; }
};

double sum(const Map2D& m);
double max_value(const Map2D& m);
bool all_finite(const Map2D& m);
bool is_binary(const Map2D& m);
bool bitwise_equal(const Map2D& a, const Map2D& b);

struct GaussianSpec {
    int kernel_size = 3;  // odd, >= 1
    double sigma = 0.5;   // > 0

    void validate() const;
    // Normalized 1-D kernel of length kernel_size.
    std::vector<double> kernel1d() const;
};

// Row-wise softmax of logits*scale, stabilized by row-max subtraction.
// Every row of the result sums to 1 within roundoff.
Tensor softmax_rows(const Tensor& logits, double scale);

// Given a = softmax_rows(...) and upstream da, accumulates dlogits (already
// including the scale factor) into out.
void softmax_rows_backward(const Tensor& a, const Tensor& da, double scale, Tensor& out);

// Separable Gaussian blur with replicate (clamp-to-edge) padding.
Map2D gaussian_filter(const Map2D& m, const GaussianSpec& spec);

// Adjoint of gaussian_filter: accumulates into dm the gradient wrt the input
// given the gradient dout wrt the output.
void gaussian_filter_adjoint(const Map2D& dout, const GaussianSpec& spec, Map2D& dm);

// Binary dilation with a Chebyshev (square) structuring element of the given
// radius. Input entries must be exactly 0 or 1.
Map2D dilate(const Map2D& m, int radius);

// Exact Euclidean distance to the nearest 1-pixel. Errors on an all-zero mask.
Map2D distance_to_set(const Map2D& m);

// Central-difference gradient of f at x with step h in every coordinate.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace mcg
