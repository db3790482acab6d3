#include "doctest.h"

#include <cmath>
#include <string>
#include <vector>

#include "mcg/denoiser.hpp"
#include "mcg/numerics.hpp"
#include "mcg/tensor.hpp"

using namespace mcg;

namespace {

ModelDims tiny_dims() {
    ModelDims d;
    d.latent_channels = 3;
    d.text_dim = 6;
    d.attn_dim = 4;
    d.value_dim = 4;
    d.blocks = 2;
    d.heads = 2;
    d.max_tokens = 16;
    return d;
}

DenoiserParams tiny_params(std::uint64_t seed, double scale = 0.6) {
    Rng rng(seed);
    return DenoiserParams::init(tiny_dims(), 8, rng, scale);
}

Tensor get_named(const DenoiserParams& p, const std::string& want) {
    Tensor out;
    bool found = false;
    p.for_each_named([&](const std::string& name, const Tensor& t) {
        if (name == want) {
            out = t;
            found = true;
        }
    });
    REQUIRE(found);
    return out;
}

void set_named(DenoiserParams& p, const std::string& want, const Tensor& value) {
    bool found = false;
    p.for_each_named([&](const std::string& name, Tensor& t) {
        if (name == want) {
            t = value;
            found = true;
        }
    });
    REQUIRE(found);
}

ConceptAdapter random_adapter(AdapterKind kind, const DenoiserParams& base, std::uint64_t seed) {
    ConceptAdapter a = ConceptAdapter::zero(kind, base, "tok", 3, 0.7, 2);
    Rng rng(seed);
    for (auto& [name, t] : a.payload)
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.3 * rng.gaussian();
    return a;
}

}  // namespace

TEST_CASE("params: seeded init reproduces bitwise") {
    DenoiserParams a = tiny_params(5);
    DenoiserParams b = tiny_params(5);
    DenoiserParams c = tiny_params(6);
    bool all_eq = true, any_diff = false;
    a.for_each_named([&](const std::string& name, const Tensor& t) {
        all_eq = all_eq && bitwise_equal(t, get_named(b, name));
        any_diff = any_diff || !bitwise_equal(t, get_named(c, name));
    });
    CHECK(all_eq);
    CHECK(any_diff);
}

TEST_CASE("forward: zero weights give uniform attention and a bias-only output") {
    DenoiserParams p = tiny_params(7, 0.0);
    p.b_head = Tensor::from({3}, {0.25, -0.5, 1.5});
    Rng rng(8);
    Tensor z = rng.gaussian_tensor({2, 3, 3});
    std::vector<int> tokens{1, 2, 4};
    ForwardResult fr = full_forward(z, 10, tokens, p, nullptr, nullptr);

    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 3; ++x)
            for (int c = 0; c < 3; ++c)
                CHECK(fr.eps.at3(y, x, c) == doctest::Approx(p.b_head[std::size_t(c)]).epsilon(1e-15));

    for (const auto& heads : fr.attn.blocks)
        for (const Tensor& a : heads)
            for (std::size_t i = 0; i < a.numel(); ++i)
                CHECK(a[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("forward: output depends on the step index") {
    DenoiserParams p = tiny_params(9);
    Rng rng(10);
    Tensor z = rng.gaussian_tensor({2, 2, 3});
    std::vector<int> tokens{1, 2};
    ForwardResult a = full_forward(z, 0, tokens, p, nullptr, nullptr);
    ForwardResult b = full_forward(z, 500, tokens, p, nullptr, nullptr);
    CHECK(max_abs_diff(a.eps, b.eps) > 1e-8);
    ForwardResult a2 = full_forward(z, 0, tokens, p, nullptr, nullptr);
    CHECK(bitwise_equal(a.eps, a2.eps));
}

TEST_CASE("forward: zero-payload adapters are exact no-ops") {
    DenoiserParams p = tiny_params(11);
    Rng rng(12);
    Tensor z = rng.gaussian_tensor({3, 2, 3});
    std::vector<int> tokens{1, 3, 2};
    ForwardResult ref = full_forward(z, 25, tokens, p, nullptr, nullptr);
    for (AdapterKind kind : {AdapterKind::EmbeddingOffset, AdapterKind::LowRank, AdapterKind::FullDelta}) {
        ConceptAdapter a = ConceptAdapter::zero(kind, p, "tok", 3);
        ForwardResult got = full_forward(z, 25, tokens, p, &a, nullptr);
        CHECK(bitwise_equal(got.eps, ref.eps));
        for (std::size_t b = 0; b < ref.attn.blocks.size(); ++b)
            for (std::size_t h = 0; h < ref.attn.blocks[b].size(); ++h)
                CHECK(bitwise_equal(got.attn.blocks[b][h], ref.attn.blocks[b][h]));
    }
}

TEST_CASE("text encoding: trigger offset leaves other token rows untouched") {
    DenoiserParams p = tiny_params(13);
    ConceptAdapter a = random_adapter(AdapterKind::EmbeddingOffset, p, 14);
    std::vector<int> tokens{1, 3, 2, 3};
    Tensor plain = encode_prompt(tokens, p, nullptr);
    Tensor offs = encode_prompt(tokens, p, &a);
    std::size_t d = std::size_t(p.dims.text_dim);
    for (std::size_t j = 0; j < d; ++j) {
        CHECK(offs.at2(0, j) == plain.at2(0, j));
        CHECK(offs.at2(2, j) == plain.at2(2, j));
    }
    CHECK(max_abs_diff(plain, offs) > 1e-9);
    for (std::size_t j = 0; j < d; ++j) CHECK(offs.at2(1, j) == offs.at2(3, j));

    CHECK_THROWS_AS(encode_prompt({}, p, nullptr), std::invalid_argument);
    CHECK_THROWS_AS(encode_prompt({99}, p, nullptr), std::invalid_argument);
    CHECK_THROWS_AS(encode_prompt(std::vector<int>(17, 1), p, nullptr), std::invalid_argument);
}

TEST_CASE("forward: permuting pixels permutes the output identically") {
    DenoiserParams p = tiny_params(15);
    Rng rng(16);
    int h = 2, w = 3, l = 3;
    Tensor z = rng.gaussian_tensor({std::size_t(h), std::size_t(w), std::size_t(l)});
    std::vector<int> perm{4, 2, 5, 0, 3, 1};
    Tensor zp({std::size_t(h), std::size_t(w), std::size_t(l)});
    for (int pix = 0; pix < h * w; ++pix)
        for (int c = 0; c < l; ++c)
            zp[std::size_t(pix) * l + c] = z[std::size_t(perm[std::size_t(pix)]) * l + c];

    std::vector<int> tokens{1, 2};
    ForwardResult fa = full_forward(z, 40, tokens, p, nullptr, nullptr);
    ForwardResult fb = full_forward(zp, 40, tokens, p, nullptr, nullptr);
    for (int pix = 0; pix < h * w; ++pix) {
        for (int c = 0; c < l; ++c) {
            double want = fa.eps[std::size_t(perm[std::size_t(pix)]) * l + c];
            CHECK(fb.eps[std::size_t(pix) * l + c] == want);
        }
        for (std::size_t b = 0; b < fa.attn.blocks.size(); ++b)
            for (std::size_t hd = 0; hd < fa.attn.blocks[b].size(); ++hd)
                for (int tok = 0; tok < 2; ++tok)
                    CHECK(fb.attn.blocks[b][hd].at2(std::size_t(pix), std::size_t(tok)) ==
                          fa.attn.blocks[b][hd].at2(std::size_t(perm[std::size_t(pix)]), std::size_t(tok)));
    }
}

TEST_CASE("backward: latent gradient matches finite differences") {
    DenoiserParams p = tiny_params(17);
    Rng rng(18);
    Tensor z = rng.gaussian_tensor({2, 2, 3});
    Tensor seed = rng.gaussian_tensor({2, 2, 3});
    std::vector<int> tokens{1, 2, 3};

    ForwardCache cache;
    full_forward(z, 33, tokens, p, nullptr, &cache);
    BackwardRequest req;
    req.d_eps = &seed;
    req.want_z = true;
    BackwardResult back = denoise_backward(p, cache, req);

    auto f = [&](const Tensor& x) {
        return dot(seed, full_forward(x, 33, tokens, p, nullptr, nullptr).eps);
    };
    Tensor fd = finite_diff_grad(f, z, 1e-6);
    CHECK(rel_l2_error(back.dz, fd) < 1e-7);
}

TEST_CASE("backward: attention seeds propagate to the latent") {
    DenoiserParams p = tiny_params(19);
    Rng rng(20);
    Tensor z = rng.gaussian_tensor({2, 2, 3});
    std::vector<int> tokens{1, 2};

    ForwardCache cache;
    ForwardResult fr = full_forward(z, 12, tokens, p, nullptr, &cache);
    AttentionStack seed = fr.attn.zeros_like();
    for (auto& heads : seed.blocks)
        for (Tensor& t : heads)
            for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.gaussian();

    BackwardRequest req;
    req.d_attn = &seed;
    req.want_z = true;
    BackwardResult back = denoise_backward(p, cache, req);

    auto f = [&](const Tensor& x) {
        ForwardResult r = full_forward(x, 12, tokens, p, nullptr, nullptr);
        double s = 0.0;
        for (std::size_t b = 0; b < r.attn.blocks.size(); ++b)
            for (std::size_t h = 0; h < r.attn.blocks[b].size(); ++h)
                s += dot(seed.blocks[b][h], r.attn.blocks[b][h]);
        return s;
    };
    Tensor fd = finite_diff_grad(f, z, 1e-6);
    CHECK(rel_l2_error(back.dz, fd) < 1e-7);
}

TEST_CASE("backward: parameter gradients match finite differences") {
    DenoiserParams p = tiny_params(21);
    Rng rng(22);
    Tensor z = rng.gaussian_tensor({2, 2, 3});
    Tensor seed = rng.gaussian_tensor({2, 2, 3});
    std::vector<int> tokens{1, 4, 2};

    ForwardCache cache;
    full_forward(z, 77, tokens, p, nullptr, &cache);
    BackwardRequest req;
    req.d_eps = &seed;
    req.want_z = false;
    req.want_params = true;
    BackwardResult back = denoise_backward(p, cache, req);

    for (const std::string& name : {"head.w", "head.b", "b0.h0.wq", "b1.h1.wv", "mix.w", "embed",
                                    "b0.in.w", "b1.out.w"}) {
        Tensor base_val = get_named(p, name);
        auto f = [&](const Tensor& x) {
            DenoiserParams q = p;
            set_named(q, name, x);
            return dot(seed, full_forward(z, 77, tokens, q, nullptr, nullptr).eps);
        };
        Tensor fd = finite_diff_grad(f, base_val, 1e-6);
        Tensor got = get_named(back.dparams, name);
        INFO("parameter ", name);
        if (l2_norm(fd) == 0.0)
            CHECK(l2_norm(got) < 1e-12);
        else
            CHECK(rel_l2_error(got, fd) < 1e-6);
    }
}

TEST_CASE("backward: adapter payload gradients match finite differences") {
    DenoiserParams p = tiny_params(23);
    Rng rng(24);
    Tensor z = rng.gaussian_tensor({2, 2, 3});
    Tensor seed = rng.gaussian_tensor({2, 2, 3});
    std::vector<int> tokens{1, 3, 2};

    for (AdapterKind kind : {AdapterKind::EmbeddingOffset, AdapterKind::LowRank, AdapterKind::FullDelta}) {
        ConceptAdapter a = random_adapter(kind, p, 100 + std::uint64_t(kind));
        ForwardCache cache;
        full_forward(z, 15, tokens, p, &a, &cache);
        BackwardRequest req;
        req.d_eps = &seed;
        req.want_z = false;
        req.want_params = true;
        BackwardResult back = denoise_backward(p, cache, req);

        for (const auto& [name, value] : a.payload) {
            auto f = [&](const Tensor& x) {
                ConceptAdapter b = a;
                b.payload[name] = x;
                return dot(seed, full_forward(z, 15, tokens, p, &b, nullptr).eps);
            };
            Tensor fd = finite_diff_grad(f, value, 1e-6);
            REQUIRE(back.d_adapter.count(name) == 1);
            Tensor got = back.d_adapter.at(name);
            INFO("kind ", adapter_kind_name(kind), " payload ", name);
            if (l2_norm(fd) < 1e-12)
                CHECK(l2_norm(got) < 1e-10);
            else
                CHECK(rel_l2_error(got, fd) < 1e-6);
        }
    }
}

TEST_CASE("time embedding: deterministic, finite, step-dependent") {
    Tensor a = time_embedding(0, 6);
    Tensor b = time_embedding(500, 6);
    REQUIRE(a.numel() == 6);
    CHECK(a.all_finite());
    CHECK(b.all_finite());
    CHECK(max_abs_diff(a, b) > 1e-6);
    CHECK(bitwise_equal(a, time_embedding(0, 6)));
    for (std::size_t i = 0; i < a.numel(); ++i) {
        CHECK(a[i] <= 1.0);
        CHECK(a[i] >= -1.0);
    }
}

TEST_CASE("oracle attention: uniform at the origin, saturating along an anchor") {
    Tensor anchors = Tensor::from({2, 3}, {1, 0, 0, 0, 1, 0});
    Tensor z0 = Tensor::full({2, 2, 3}, 0.0);
    std::vector<Map2D> maps = oracle_attention(z0, anchors);
    REQUIRE(maps.size() == 2);
    for (const Map2D& m : maps)
        for (double v : m.v) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));

    Tensor zbig = Tensor::full({1, 1, 3}, 0.0);
    zbig[0] = 50.0;
    std::vector<Map2D> sat = oracle_attention(zbig, anchors);
    CHECK(sat[0].at(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(sat[1].at(0, 0) < 1e-9);
}

TEST_CASE("oracle attention: backward matches finite differences") {
    Rng rng(25);
    Tensor anchors({3, 3});
    for (std::size_t i = 0; i < anchors.numel(); ++i) anchors[i] = rng.gaussian();
    Tensor z = rng.gaussian_tensor({3, 2, 3});
    std::vector<Map2D> d_maps;
    for (int k = 0; k < 3; ++k) {
        Map2D d(3, 2);
        for (double& v : d.v) v = rng.gaussian();
        d_maps.push_back(d);
    }

    std::vector<Map2D> maps = oracle_attention(z, anchors);
    Tensor dz = Tensor::full(z.shape(), 0.0);
    oracle_attention_backward(z, anchors, maps, d_maps, dz);

    auto f = [&](const Tensor& x) {
        std::vector<Map2D> m = oracle_attention(x, anchors);
        double s = 0.0;
        for (std::size_t k = 0; k < m.size(); ++k)
            for (std::size_t i = 0; i < m[k].v.size(); ++i) s += m[k].v[i] * d_maps[k].v[i];
        return s;
    };
    Tensor fd = finite_diff_grad(f, z, 1e-6);
    CHECK(rel_l2_error(dz, fd) < 1e-7);
}
