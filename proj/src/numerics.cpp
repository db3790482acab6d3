#include "mcg/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace mcg {

Map2D::Map2D(int height, int width, double fill) {
    if (height <= 0 || width <= 0) throw std::invalid_argument("Map2D: extents must be positive");
    h = height;
    w = width;
    v.assign(static_cast<std::size_t>(h) * w, fill);
}

double sum(const Map2D& m) {
    double s = 0.0;
    for (double x : m.v) s += x;
    return s;
}

double max_value(const Map2D& m) {
    double s = -std::numeric_limits<double>::infinity();
    for (double x : m.v) s = std::max(s, x);
    return s;
}

bool all_finite(const Map2D& m) {
    for (double x : m.v)
        if (!std::isfinite(x)) return false;
    return true;
}

bool is_binary(const Map2D& m) {
    for (double x : m.v)
        if (x != 0.0 && x != 1.0) return false;
    return true;
}

bool bitwise_equal(const Map2D& a, const Map2D& b) {
    if (!a.same_shape(b)) return false;
    if (a.v.empty()) return true;
    return std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0;
}

void GaussianSpec::validate() const {
    if (kernel_size < 1 || kernel_size % 2 == 0)
        throw std::invalid_argument("GaussianSpec: kernel_size must be odd and positive");
    if (!(sigma > 0.0)) throw std::invalid_argument("GaussianSpec: sigma must be positive");
}

std::vector<double> GaussianSpec::kernel1d() const {
    validate();
    int c = kernel_size / 2;
    std::vector<double> k(kernel_size);
    double total = 0.0;
    for (int i = 0; i < kernel_size; ++i) {
        double d = i - c;
        k[i] = std::exp(-(d * d) / (2.0 * sigma * sigma));
        total += k[i];
    }
    for (double& x : k) x /= total;
    return k;
}

Tensor softmax_rows(const Tensor& logits, double scale) {
    if (logits.rank() != 2) throw std::invalid_argument("softmax_rows: rank-2 required");
    if (!logits.all_finite()) throw NumericError("softmax_rows: non-finite input");
    std::size_t m = logits.extent(0), n = logits.extent(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = logits.data() + i * n;
        double hi = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) hi = std::max(hi, row[j] * scale);
        double z = 0.0;
        double* orow = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] * scale - hi);
            z += orow[j];
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] /= z;
    }
    return out;
}

void softmax_rows_backward(const Tensor& a, const Tensor& da, double scale, Tensor& out) {
    if (!a.same_shape(da) || !a.same_shape(out))
        throw std::invalid_argument("softmax_rows_backward: shape mismatch");
    std::size_t m = a.extent(0), n = a.extent(1);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data() + i * n;
        const double* drow = da.data() + i * n;
        double* orow = out.data() + i * n;
        double inner = 0.0;
        for (std::size_t j = 0; j < n; ++j) inner += arow[j] * drow[j];
        for (std::size_t j = 0; j < n; ++j) orow[j] += scale * arow[j] * (drow[j] - inner);
    }
}

namespace {

inline int clamp_index(int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

Map2D pass_h(const Map2D& m, const std::vector<double>& k) {
    int c = static_cast<int>(k.size()) / 2;
    Map2D out(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            double s = 0.0;
            for (int j = 0; j < static_cast<int>(k.size()); ++j)
                s += k[j] * m.at(y, clamp_index(x + j - c, m.w));
            out.at(y, x) = s;
        }
    return out;
}

Map2D pass_v(const Map2D& m, const std::vector<double>& k) {
    int c = static_cast<int>(k.size()) / 2;
    Map2D out(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            double s = 0.0;
            for (int j = 0; j < static_cast<int>(k.size()); ++j)
                s += k[j] * m.at(clamp_index(y + j - c, m.h), x);
            out.at(y, x) = s;
        }
    return out;
}

Map2D pass_h_adjoint(const Map2D& d, const std::vector<double>& k) {
    int c = static_cast<int>(k.size()) / 2;
    Map2D out(d.h, d.w);
    for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x)
            for (int j = 0; j < static_cast<int>(k.size()); ++j)
                out.at(y, clamp_index(x + j - c, d.w)) += k[j] * d.at(y, x);
    return out;
}

Map2D pass_v_adjoint(const Map2D& d, const std::vector<double>& k) {
    int c = static_cast<int>(k.size()) / 2;
    Map2D out(d.h, d.w);
    for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x)
            for (int j = 0; j < static_cast<int>(k.size()); ++j)
                out.at(clamp_index(y + j - c, d.h), x) += k[j] * d.at(y, x);
    return out;
}

}  // namespace

Map2D gaussian_filter(const Map2D& m, const GaussianSpec& spec) {
    if (!all_finite(m)) throw NumericError("gaussian_filter: non-finite input");
    std::vector<double> k = spec.kernel1d();
    return pass_v(pass_h(m, k), k);
}

void gaussian_filter_adjoint(const Map2D& dout, const GaussianSpec& spec, Map2D& dm) {
    if (!dout.same_shape(dm)) throw std::invalid_argument("gaussian_filter_adjoint: shape mismatch");
    std::vector<double> k = spec.kernel1d();
    Map2D g = pass_h_adjoint(pass_v_adjoint(dout, k), k);
    for (std::size_t i = 0; i < dm.v.size(); ++i) dm.v[i] += g.v[i];
}

Map2D dilate(const Map2D& m, int radius) {
    if (radius < 1) throw std::invalid_argument("dilate: radius must be >= 1");
    if (!is_binary(m)) throw std::invalid_argument("dilate: input must be binary");
    Map2D tmp(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            double s = 0.0;
            for (int dx = -radius; dx <= radius && s == 0.0; ++dx) {
                int xx = x + dx;
                if (xx >= 0 && xx < m.w && m.at(y, xx) == 1.0) s = 1.0;
            }
            tmp.at(y, x) = s;
        }
    Map2D out(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            double s = 0.0;
            for (int dy = -radius; dy <= radius && s == 0.0; ++dy) {
                int yy = y + dy;
                if (yy >= 0 && yy < m.h && tmp.at(yy, x) == 1.0) s = 1.0;
            }
            out.at(y, x) = s;
        }
    return out;
}

namespace {

// 1-D squared distance transform (lower envelope of parabolas).
void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
    const double inf = std::numeric_limits<double>::infinity();
    int n = static_cast<int>(f.size());
    std::vector<int> v(n, 0);
    std::vector<double> z(n + 1, 0.0);
    int k = 0;
    v[0] = 0;
    z[0] = -inf;
    z[1] = inf;
    for (int q = 1; q < n; ++q) {
        if (f[q] == inf) continue;
        while (true) {
            int p = v[k];
            double s;
            if (f[p] == inf) {
                s = -inf;
            } else {
                s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * q - 2.0 * p);
            }
            if (s <= z[k]) {
                --k;
                if (k < 0) {
                    k = 0;
                    v[0] = q;
                    z[0] = -inf;
                    z[1] = inf;
                    break;
                }
            } else {
                ++k;
                v[k] = q;
                z[k] = s;
                z[k + 1] = inf;
                break;
            }
        }
    }
    int k2 = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k2 + 1] < q) ++k2;
        int p = v[k2];
        d[q] = f[p] == inf ? inf : double(q - p) * (q - p) + f[p];
    }
}

}  // namespace

Map2D distance_to_set(const Map2D& m) {
    if (!is_binary(m)) throw std::invalid_argument("distance_to_set: input must be binary");
    bool any = false;
    for (double x : m.v)
        if (x == 1.0) any = true;
    if (!any) throw std::invalid_argument("distance_to_set: empty set");

    const double inf = std::numeric_limits<double>::infinity();
    Map2D sq(m.h, m.w);
    // Columns first.
    {
        std::vector<double> f(m.h), d(m.h);
        for (int x = 0; x < m.w; ++x) {
            for (int y = 0; y < m.h; ++y) f[y] = m.at(y, x) == 1.0 ? 0.0 : inf;
            edt_1d(f, d);
            for (int y = 0; y < m.h; ++y) sq.at(y, x) = d[y];
        }
    }
    // Then rows.
    {
        std::vector<double> f(m.w), d(m.w);
        for (int y = 0; y < m.h; ++y) {
            for (int x = 0; x < m.w; ++x) f[x] = sq.at(y, x);
            edt_1d(f, d);
            for (int x = 0; x < m.w; ++x) sq.at(y, x) = d[x];
        }
    }
    Map2D out(m.h, m.w);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = std::sqrt(sq.v[i]);
    return out;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
    Tensor grad = Tensor::zeros_like(x);
    Tensor probe = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        double x0 = x[i];
        probe[i] = x0 + h;
        double fp = f(probe);
        probe[i] = x0 - h;
        double fm = f(probe);
        probe[i] = x0;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

}  // namespace mcg
