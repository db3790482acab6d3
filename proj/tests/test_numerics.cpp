#include "doctest.h"

#include <cmath>
#include <vector>

#include "mcg/numerics.hpp"
#include "mcg/tensor.hpp"

using namespace mcg;

namespace {

// Reference implementations, deliberately naive. The library versions are
// checked against these on random inputs.

Map2D brute_distance(const Map2D& m) {
    Map2D out(m.h, m.w);
    for (int y = 0; y < m.h; ++y) {
        for (int x = 0; x < m.w; ++x) {
            double best = std::numeric_limits<double>::infinity();
            for (int sy = 0; sy < m.h; ++sy)
                for (int sx = 0; sx < m.w; ++sx)
                    if (m.at(sy, sx) > 0.5) {
                        double d = std::hypot(double(y - sy), double(x - sx));
                        best = std::min(best, d);
                    }
            out.at(y, x) = best;
        }
    }
    return out;
}

Map2D brute_dilate(const Map2D& m, int radius) {
    Map2D out(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            double v = 0.0;
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < m.h && xx >= 0 && xx < m.w && m.at(yy, xx) > 0.5) v = 1.0;
                }
            out.at(y, x) = v;
        }
    return out;
}

Map2D random_mask(Rng& rng, int h, int w, double fill) {
    Map2D m(h, w);
    for (double& v : m.v) v = rng.uniform() < fill ? 1.0 : 0.0;
    return m;
}

}  // namespace

TEST_CASE("softmax rows: hand values") {
    Tensor logits = Tensor::from({2, 2}, {0.0, 0.0, std::log(2.0), 0.0});
    Tensor p = softmax_rows(logits, 1.0);
    CHECK(p.at2(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.at2(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.at2(1, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(p.at2(1, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax rows: scale multiplies logits") {
    Tensor logits = Tensor::from({1, 2}, {std::log(2.0) / 0.25, 0.0});
    Tensor p = softmax_rows(logits, 0.25);
    CHECK(p.at2(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax rows: extreme logits stay normalized") {
    Rng rng(11);
    Tensor logits({8, 5});
    for (std::size_t i = 0; i < logits.numel(); ++i) logits[i] = 1e3 * rng.gaussian();
    Tensor p = softmax_rows(logits, 1.0);
    REQUIRE(p.all_finite());
    for (int i = 0; i < 8; ++i) {
        double s = 0.0;
        for (int j = 0; j < 5; ++j) {
            CHECK(p.at2(i, j) >= 0.0);
            s += p.at2(i, j);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
    Tensor spike = Tensor::from({1, 2}, {1000.0, 0.0});
    Tensor q = softmax_rows(spike, 1.0);
    CHECK(q.at2(0, 0) == doctest::Approx(1.0));
    CHECK(q.at2(0, 1) < 1e-12);
}

TEST_CASE("softmax rows: backward matches finite differences") {
    Rng rng(12);
    Tensor logits({3, 4});
    Tensor w({3, 4});
    for (std::size_t i = 0; i < logits.numel(); ++i) logits[i] = rng.gaussian();
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.gaussian();
    double scale = 0.7;

    auto f = [&](const Tensor& x) { return dot(softmax_rows(x, scale), w); };
    Tensor fd = finite_diff_grad(f, logits, 1e-6);

    Tensor a = softmax_rows(logits, scale);
    Tensor grad({3, 4});
    softmax_rows_backward(a, w, scale, grad);
    CHECK(rel_l2_error(grad, fd) < 1e-7);
}

TEST_CASE("gaussian kernel: normalized and symmetric") {
    GaussianSpec g;
    std::vector<double> k = g.kernel1d();
    REQUIRE(k.size() == 3);
    double e2 = std::exp(-2.0);
    double z = 1.0 + 2.0 * e2;
    CHECK(k[1] == doctest::Approx(1.0 / z).epsilon(1e-12));
    CHECK(k[0] == doctest::Approx(e2 / z).epsilon(1e-12));
    CHECK(k[0] == doctest::Approx(k[2]).epsilon(1e-15));
    CHECK(k[0] + k[1] + k[2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS((GaussianSpec{4, 0.5}.kernel1d()), std::invalid_argument);
    CHECK_THROWS_AS((GaussianSpec{3, 0.0}.kernel1d()), std::invalid_argument);
}

TEST_CASE("gaussian filter: constants are fixed points") {
    Map2D m(6, 7);
    for (double& v : m.v) v = 0.37;
    Map2D out = gaussian_filter(m, GaussianSpec{});
    for (double v : out.v) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("gaussian filter: centered impulse response") {
    Map2D m(5, 5);
    m.at(2, 2) = 1.0;
    Map2D out = gaussian_filter(m, GaussianSpec{3, 0.5});
    double e2 = std::exp(-2.0), e4 = std::exp(-4.0);
    double z = 1.0 + 4.0 * e2 + 4.0 * e4;
    CHECK(out.at(2, 2) == doctest::Approx(1.0 / z).epsilon(1e-12));
    CHECK(out.at(1, 2) == doctest::Approx(e2 / z).epsilon(1e-12));
    CHECK(out.at(2, 3) == doctest::Approx(e2 / z).epsilon(1e-12));
    CHECK(out.at(1, 1) == doctest::Approx(e4 / z).epsilon(1e-12));
    CHECK(sum(out) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out.at(0, 0) == doctest::Approx(e4 / z).epsilon(1e-12));
    CHECK(out.at(4, 4) == doctest::Approx(e4 / z).epsilon(1e-12));
}

TEST_CASE("gaussian filter: linear in its input") {
    Rng rng(13);
    Map2D a(9, 8), b(9, 8);
    for (double& v : a.v) v = rng.gaussian();
    for (double& v : b.v) v = rng.gaussian();
    GaussianSpec g{5, 1.1};
    Map2D fa = gaussian_filter(a, g);
    Map2D fb = gaussian_filter(b, g);
    Map2D mix(9, 8);
    for (std::size_t i = 0; i < mix.v.size(); ++i) mix.v[i] = 2.0 * a.v[i] - 0.5 * b.v[i];
    Map2D fmix = gaussian_filter(mix, g);
    for (std::size_t i = 0; i < mix.v.size(); ++i)
        CHECK(fmix.v[i] == doctest::Approx(2.0 * fa.v[i] - 0.5 * fb.v[i]).epsilon(1e-12));
}

TEST_CASE("gaussian filter: adjoint satisfies the inner product identity") {
    Rng rng(14);
    GaussianSpec g{3, 0.5};
    for (int trial = 0; trial < 5; ++trial) {
        Map2D x(7, 6), y(7, 6);
        for (double& v : x.v) v = rng.gaussian();
        for (double& v : y.v) v = rng.gaussian();
        Map2D gx = gaussian_filter(x, g);
        Map2D gty(7, 6);
        gaussian_filter_adjoint(y, g, gty);
        double lhs = 0.0, rhs = 0.0;
        for (std::size_t i = 0; i < x.v.size(); ++i) {
            lhs += gx.v[i] * y.v[i];
            rhs += x.v[i] * gty.v[i];
        }
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
    }
}

TEST_CASE("dilate: single pixel grows into a block") {
    Map2D m(8, 8);
    m.at(4, 4) = 1.0;
    Map2D out = dilate(m, 1);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            bool inside = std::abs(y - 4) <= 1 && std::abs(x - 4) <= 1;
            CHECK(out.at(y, x) == (inside ? 1.0 : 0.0));
        }
}

TEST_CASE("dilate: matches the brute-force reference") {
    Rng rng(15);
    for (int trial = 0; trial < 30; ++trial) {
        int h = 3 + int(rng.below(18));
        int w = 3 + int(rng.below(18));
        int r = 1 + int(rng.below(3));
        Map2D m = random_mask(rng, h, w, 0.15);
        CHECK(bitwise_equal(dilate(m, r), brute_dilate(m, r)));
    }
}

TEST_CASE("dilate: grows monotonically with radius and validates input") {
    Rng rng(16);
    Map2D m = random_mask(rng, 10, 10, 0.1);
    Map2D d1 = dilate(m, 1);
    Map2D d2 = dilate(m, 2);
    for (std::size_t i = 0; i < m.v.size(); ++i) CHECK(d2.v[i] >= d1.v[i]);
    CHECK_THROWS_AS(dilate(m, 0), std::invalid_argument);
    Map2D soft(3, 3);
    soft.at(1, 1) = 0.4;
    CHECK_THROWS_AS(dilate(soft, 1), std::invalid_argument);
}

TEST_CASE("distance transform: hand values") {
    Map2D strip(1, 10);
    strip.at(0, 5) = 1.0;
    Map2D d = distance_to_set(strip);
    CHECK(d.at(0, 5) == 0.0);
    CHECK(d.at(0, 0) == 5.0);
    CHECK(d.at(0, 9) == 4.0);

    Map2D sq(5, 5);
    sq.at(1, 1) = 1.0;
    Map2D e = distance_to_set(sq);
    CHECK(e.at(1, 1) == 0.0);
    CHECK(e.at(4, 4) == doctest::Approx(std::sqrt(18.0)).epsilon(1e-12));
}

TEST_CASE("distance transform: matches the brute-force reference exactly") {
    Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        int h = 2 + int(rng.below(20));
        int w = 2 + int(rng.below(20));
        Map2D m = random_mask(rng, h, w, 0.08);
        bool any = false;
        for (double v : m.v) any = any || v > 0.5;
        if (!any) m.at(int(rng.below(std::uint64_t(h))), int(rng.below(std::uint64_t(w)))) = 1.0;
        Map2D fast = distance_to_set(m);
        Map2D slow = brute_distance(m);
        for (std::size_t i = 0; i < m.v.size(); ++i)
            CHECK(fast.v[i] * fast.v[i] == doctest::Approx(slow.v[i] * slow.v[i]).epsilon(1e-12));
    }
}

TEST_CASE("distance transform: rejects an empty set") {
    Map2D empty(4, 4);
    CHECK_THROWS_AS(distance_to_set(empty), std::invalid_argument);
}

TEST_CASE("finite difference gradient: quadratic and bilinear probes") {
    Tensor x = Tensor::from({3}, {1.0, -2.0, 0.5});
    auto sumsq = [](const Tensor& t) {
        double s = 0.0;
        for (std::size_t i = 0; i < t.numel(); ++i) s += t[i] * t[i];
        return s;
    };
    Tensor g = finite_diff_grad(sumsq, x, 1e-5);
    CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-8));
    CHECK(g[1] == doctest::Approx(-4.0).epsilon(1e-8));
    CHECK(g[2] == doctest::Approx(1.0).epsilon(1e-8));

    auto constant = [](const Tensor&) { return 3.5; };
    Tensor gc = finite_diff_grad(constant, x, 1e-5);
    for (std::size_t i = 0; i < gc.numel(); ++i) CHECK(gc[i] == 0.0);

    Tensor y = Tensor::from({2}, {3.0, 7.0});
    auto bilinear = [](const Tensor& t) { return t[0] * t[1]; };
    Tensor gb = finite_diff_grad(bilinear, y, 1e-5);
    CHECK(gb[0] == doctest::Approx(7.0).epsilon(1e-9));
    CHECK(gb[1] == doctest::Approx(3.0).epsilon(1e-9));

    CHECK_THROWS_AS(finite_diff_grad(sumsq, x, 0.0), std::invalid_argument);
}

TEST_CASE("rng: seeded streams reproduce and differ across seeds") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 64; ++i) CHECK(a.next_u64() == b.next_u64());
    bool same = true;
    Rng a2(42);
    for (int i = 0; i < 64; ++i) a2.next_u64();
    for (int i = 0; i < 8; ++i) same = same && (a2.next_u64() == c.next_u64());
    CHECK_FALSE(same);

    Rng u(7);
    for (int i = 0; i < 1000; ++i) {
        double v = u.uniform();
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
    }
    Tensor g = Rng(9).gaussian_tensor({4, 5});
    CHECK(g.rank() == 2);
    CHECK(g.numel() == 20);
    CHECK(g.all_finite());
    CHECK(bitwise_equal(g, Rng(9).gaussian_tensor({4, 5})));
}

TEST_CASE("matmul: hand-checked products and transpose variants") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
    Tensor c = matmul(a, b);
    CHECK(c.at2(0, 0) == 58.0);
    CHECK(c.at2(0, 1) == 64.0);
    CHECK(c.at2(1, 0) == 139.0);
    CHECK(c.at2(1, 1) == 154.0);

    Tensor at = Tensor::from({3, 2}, {1, 4, 2, 5, 3, 6});
    CHECK(max_abs_diff(matmul_tn(at, b), c) == 0.0);
    Tensor bt = Tensor::from({2, 3}, {7, 9, 11, 8, 10, 12});
    CHECK(max_abs_diff(matmul_nt(a, bt), c) == 0.0);
}
