#include "doctest.h"

#include <cmath>
#include <vector>

#include "mcg/attention.hpp"
#include "mcg/tensor.hpp"

using namespace mcg;

namespace {

AttentionStack random_stack(Rng& rng, int h, int w, int tokens, int blocks, int heads) {
    AttentionStack s;
    s.h = h;
    s.w = w;
    s.tokens = tokens;
    s.blocks.resize(std::size_t(blocks));
    for (auto& heads_vec : s.blocks) {
        heads_vec.reserve(std::size_t(heads));
        for (int hd = 0; hd < heads; ++hd) {
            Tensor logits({std::size_t(h) * std::size_t(w), std::size_t(tokens)});
            for (std::size_t i = 0; i < logits.numel(); ++i) logits[i] = rng.gaussian();
            heads_vec.push_back(softmax_rows(logits, 1.0));
        }
    }
    return s;
}

}  // namespace

TEST_CASE("token map extraction: single head is a reshaped column") {
    AttentionStack s;
    s.h = 2;
    s.w = 3;
    s.tokens = 2;
    Tensor a({6, 2});
    for (int p = 0; p < 6; ++p) {
        a.at2(p, 0) = 0.1 * p;
        a.at2(p, 1) = 1.0 - 0.1 * p;
    }
    s.blocks = {{a}};
    Map2D m = extract_token_map(s, 0);
    REQUIRE(m.h == 2);
    REQUIRE(m.w == 3);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 3; ++x) CHECK(m.at(y, x) == doctest::Approx(0.1 * (y * 3 + x)));
    Map2D m1 = extract_token_map(s, 1);
    CHECK(m1.at(1, 2) == doctest::Approx(0.5));
}

TEST_CASE("token map extraction: averages across blocks and heads") {
    AttentionStack s;
    s.h = 1;
    s.w = 2;
    s.tokens = 1;
    Tensor p = Tensor::from({2, 1}, {0.2, 0.4});
    Tensor q = Tensor::from({2, 1}, {0.8, 0.0});
    s.blocks = {{p, q}, {q, q}};
    Map2D m = extract_token_map(s, 0);
    CHECK(m.at(0, 0) == doctest::Approx((0.2 + 3 * 0.8) / 4.0).epsilon(1e-12));
    CHECK(m.at(0, 1) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("token map extraction: uniform attention gives 1/s everywhere") {
    Rng rng(21);
    int tokens = 5;
    AttentionStack s = random_stack(rng, 3, 4, tokens, 2, 2);
    for (auto& heads : s.blocks)
        for (Tensor& a : heads)
            for (std::size_t i = 0; i < a.numel(); ++i) a[i] = 1.0 / tokens;
    for (int t = 0; t < tokens; ++t) {
        Map2D m = extract_token_map(s, t);
        for (double v : m.v) CHECK(v == doctest::Approx(1.0 / tokens).epsilon(1e-12));
    }
    CHECK_THROWS_AS(extract_token_map(s, tokens), std::invalid_argument);
    CHECK_THROWS_AS(extract_token_map(s, -1), std::invalid_argument);
}

TEST_CASE("token map extraction: adjoint satisfies the inner product identity") {
    Rng rng(22);
    AttentionStack s = random_stack(rng, 4, 3, 4, 2, 2);
    int token = 2;
    Map2D y(4, 3);
    for (double& v : y.v) v = rng.gaussian();

    Map2D fx = extract_token_map(s, token);
    AttentionStack d = s.zeros_like();
    extract_token_map_adjoint(y, token, d);

    double lhs = 0.0;
    for (std::size_t i = 0; i < y.v.size(); ++i) lhs += fx.v[i] * y.v[i];
    double rhs = 0.0;
    for (std::size_t b = 0; b < s.blocks.size(); ++b)
        for (std::size_t h = 0; h < s.blocks[b].size(); ++h) rhs += dot(s.blocks[b][h], d.blocks[b][h]);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("concept aggregation: mean then smoothing") {
    Map2D a(5, 5), b(5, 5);
    a.at(2, 2) = 1.0;
    Map2D agg1 = aggregate_concept_map({a, b}, GaussianSpec{3, 0.5});
    Map2D half(5, 5);
    half.at(2, 2) = 0.5;
    Map2D expect = gaussian_filter(half, GaussianSpec{3, 0.5});
    for (std::size_t i = 0; i < agg1.v.size(); ++i)
        CHECK(agg1.v[i] == doctest::Approx(expect.v[i]).epsilon(1e-12));

    Map2D c(2, 2);
    for (double& v : c.v) v = 0.25;
    Map2D aggc = aggregate_concept_map({c}, GaussianSpec{});
    for (double v : aggc.v) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

    CHECK_THROWS_AS(aggregate_concept_map({}, GaussianSpec{}), std::invalid_argument);
    CHECK_THROWS_AS(mean_map({}), std::invalid_argument);
}

TEST_CASE("mean map: plain average of token maps") {
    Map2D a(2, 2), b(2, 2);
    a.v = {1.0, 0.0, 0.0, 2.0};
    b.v = {0.0, 1.0, 0.0, 4.0};
    Map2D m = mean_map({a, b});
    CHECK(m.v[0] == doctest::Approx(0.5));
    CHECK(m.v[1] == doctest::Approx(0.5));
    CHECK(m.v[2] == doctest::Approx(0.0));
    CHECK(m.v[3] == doctest::Approx(3.0));
}
