#include "mcg/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace mcg {

namespace {

std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw std::invalid_argument("Tensor: zero extent");
        if (n > (std::size_t{1} << 40) / e) throw std::invalid_argument("Tensor: too large");
        n *= e;
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = value;
    return t;
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> values) {
    Tensor t;
    std::size_t n = checked_numel(shape);
    if (n != values.size()) throw std::invalid_argument("Tensor::from: size mismatch");
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) throw std::invalid_argument("Tensor::extent: bad axis");
    return shape_[axis];
}

bool Tensor::all_finite() const {
    for (double x : data_)
        if (!std::isfinite(x)) return false;
    return true;
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
    if (checked_numel(shape) != numel())
        throw std::invalid_argument("Tensor::reshaped: element count mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ")";
    return os.str();
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    if (a.numel() == 0) return true;
    return std::memcmp(a.data(), b.data(), a.numel() * sizeof(double)) == 0;
}

namespace {

void require_matmul(const Tensor& a, const Tensor& b, std::size_t ka, std::size_t kb) {
    if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: rank-2 required");
    if (ka != kb) throw std::invalid_argument("matmul: inner extent mismatch");
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matmul(a, b, a.extent(1), b.extent(0));
    std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a.data() + i * k;
        double* oi = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) oi[j] += av * bp[j];
        }
    }
    return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_matmul(a, b, a.extent(0), b.extent(0));
    std::size_t k = a.extent(0), m = a.extent(1), n = b.extent(1);
    Tensor out({m, n});
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a.data() + p * m;
        const double* bp = b.data() + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            double av = ap[i];
            if (av == 0.0) continue;
            double* oi = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) oi[j] += av * bp[j];
        }
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matmul(a, b, a.extent(1), b.extent(1));
    std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a.data() + i * k;
        double* oi = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b.data() + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            oi[j] += s;
        }
    }
    return out;
}

void accumulate(Tensor& dst, const Tensor& src) {
    if (!dst.same_shape(src)) throw std::invalid_argument("accumulate: shape mismatch");
    double* d = dst.data();
    const double* s = src.data();
    for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

void accumulate_scaled(Tensor& dst, const Tensor& src, double s) {
    if (!dst.same_shape(src)) throw std::invalid_argument("accumulate_scaled: shape mismatch");
    double* d = dst.data();
    const double* x = src.data();
    for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += s * x[i];
}

void scale_inplace(Tensor& t, double s) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] *= s;
}

double dot(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("dot: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(const Tensor& t) { return std::sqrt(dot(t, t)); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

double rel_l2_error(const Tensor& approx, const Tensor& reference) {
    if (!approx.same_shape(reference)) throw std::invalid_argument("rel_l2_error: shape mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < approx.numel(); ++i) {
        double d = approx[i] - reference[i];
        num += d * d;
        den += reference[i] * reference[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

// splitmix64; the seed stream is stable by construction.
Rng::Rng(std::uint64_t seed) : state_(seed) {}

std::uint64_t Rng::next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::gaussian() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    return next_u64() % n;
}

Tensor Rng::gaussian_tensor(std::vector<std::size_t> shape) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = gaussian();
    return t;
}

Tensor Rng::uniform_tensor(std::vector<std::size_t> shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * uniform();
    return t;
}

}  // namespace mcg
