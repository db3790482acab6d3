#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcg {

// Dense row-major tensor of doubles. Rank is dynamic; most of the code uses
// rank 2 (matrices) and rank 3 (h x w x c latents).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape);

    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> values);
    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t extent(std::size_t axis) const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Rank-specific accessors; bounds are the caller's responsibility.
    double& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at3(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at3(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    Tensor reshaped(std::vector<std::size_t> shape) const;

    std::string shape_str() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);

// Matrix products for rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);     // a(m,k) * b(k,n)
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a(k,m)^T * b(k,n)
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a(m,k) * b(n,k)^T

void accumulate(Tensor& dst, const Tensor& src);                  // dst += src
void accumulate_scaled(Tensor& dst, const Tensor& src, double s); // dst += s*src
void scale_inplace(Tensor& t, double s);

double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
double rel_l2_error(const Tensor& approx, const Tensor& reference);

// Deterministic random source. Uses a fixed 64-bit engine plus an explicit
// Box-Muller transform so streams are identical across platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    double uniform();   // [0, 1)
    double gaussian();  // standard normal
    // Uniform integer in [0, n), n > 0.
    std::uint64_t below(std::uint64_t n);

    Tensor gaussian_tensor(std::vector<std::size_t> shape);
    Tensor uniform_tensor(std::vector<std::size_t> shape, double lo, double hi);

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mcg
