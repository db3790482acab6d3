#include "doctest.h"

#include <cmath>
#include <vector>

#include "mcg/denoiser.hpp"
#include "mcg/guidance.hpp"
#include "mcg/numerics.hpp"
#include "mcg/tensor.hpp"

using namespace mcg;

namespace {

Map2D map_from(int h, int w, std::vector<double> v) {
    Map2D m(h, w);
    m.v = std::move(v);
    return m;
}

std::vector<std::vector<Map2D>> random_token_maps(Rng& rng, int sets, int per_set, int h, int w) {
    std::vector<std::vector<Map2D>> out(std::size_t(sets));
    for (auto& set : out)
        for (int i = 0; i < per_set; ++i) {
            Map2D m(h, w);
            for (double& v : m.v) v = rng.uniform() * 0.9 + 0.05;
            set.push_back(std::move(m));
        }
    return out;
}

std::size_t total_numel(const std::vector<std::vector<Map2D>>& maps) {
    std::size_t n = 0;
    for (const auto& set : maps)
        for (const Map2D& m : set) n += m.v.size();
    return n;
}

Tensor pack(const std::vector<std::vector<Map2D>>& maps) {
    Tensor out({total_numel(maps)});
    std::size_t k = 0;
    for (const auto& set : maps)
        for (const Map2D& m : set)
            for (double v : m.v) out[k++] = v;
    return out;
}

std::vector<std::vector<Map2D>> unpack(const Tensor& flat,
                                       const std::vector<std::vector<Map2D>>& like) {
    std::vector<std::vector<Map2D>> out = like;
    std::size_t k = 0;
    for (auto& set : out)
        for (Map2D& m : set)
            for (double& v : m.v) v = flat[k++];
    return out;
}

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

}  // namespace

TEST_CASE("soft overlap: hand values, symmetry, bounds") {
    Map2D a = map_from(1, 2, {1.0, 0.0});
    Map2D b = map_from(1, 2, {0.5, 0.5});
    CHECK(soft_overlap(a, b, 1e-12) == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(soft_overlap(b, a, 1e-12) == doctest::Approx(soft_overlap(a, b, 1e-12)).epsilon(1e-12));

    Map2D c = map_from(2, 2, {0.3, 0.7, 0.1, 0.9});
    CHECK(soft_overlap(c, c, 1e-12) == doctest::Approx(0.5).epsilon(1e-9));

    Map2D d1 = map_from(1, 2, {1.0, 0.0});
    Map2D d2 = map_from(1, 2, {0.0, 1.0});
    CHECK(soft_overlap(d1, d2, 1e-12) == doctest::Approx(0.0));

    Map2D zero(3, 3);
    CHECK(std::isfinite(soft_overlap(zero, zero, 1e-12)));
    CHECK(soft_overlap(zero, zero, 1e-12) == doctest::Approx(0.0));
}

TEST_CASE("soft overlap per pixel: hand value") {
    Map2D a = map_from(1, 2, {1.0, 0.0});
    Map2D b = map_from(1, 2, {0.5, 0.5});
    CHECK(soft_overlap_per_pixel(a, b, 1e-10) == doctest::Approx(1.0 / 6.0).epsilon(1e-6));
}

TEST_CASE("intra loss: identical, disjoint, and singleton trigger sets") {
    GuidanceConfig cfg;
    Map2D p = map_from(1, 2, {0.8, 0.0});
    Map2D q = map_from(1, 2, {0.0, 0.8});

    CHECK(intra_loss({{p, p}}, cfg) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(intra_loss({{p, q}}, cfg) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(intra_loss({{p}, {q}}, cfg) == doctest::Approx(0.0));
    CHECK(intra_loss({{p, p}, {q}}, cfg) == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("inter loss: pairwise overlap means and degenerate flags") {
    GuidanceConfig cfg;
    Map2D p = map_from(1, 2, {0.8, 0.0});
    Map2D q = map_from(1, 2, {0.0, 0.8});

    bool degen = false;
    CHECK(inter_loss({p, p}, cfg, &degen) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK_FALSE(degen);
    CHECK(inter_loss({p, q}, cfg) == doctest::Approx(0.0));
    CHECK(inter_loss({p, p, q}, cfg) == doctest::Approx(1.0 / 6.0).epsilon(1e-9));

    CHECK(inter_loss({p}, cfg, &degen) == doctest::Approx(0.0));
    CHECK(degen);
}

TEST_CASE("combined objectives: weighted sums") {
    CHECK(mcg_loss(0.5, 0.5, 0.8) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(compgen_loss(0.2, 0.5, 0.5, 0.5, 0.4) == doctest::Approx(0.65).epsilon(1e-12));
}

TEST_CASE("focus loss: weakest subject drives the value") {
    Map2D strong(3, 3), weak(3, 3);
    strong.at(1, 1) = 0.9;
    weak.at(0, 0) = 0.4;
    CHECK(ae_loss({strong, weak}, GaussianSpec{}, false) == doctest::Approx(0.6).epsilon(1e-9));
    CHECK(ae_loss({strong}, GaussianSpec{}, false) == doctest::Approx(0.1).epsilon(1e-9));
    Map2D zero(3, 3);
    CHECK(ae_loss({zero}, GaussianSpec{}, false) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(ae_loss({}, GaussianSpec{}, false), std::invalid_argument);

    double smoothed = ae_loss({strong}, GaussianSpec{3, 0.5}, true);
    CHECK(smoothed > 0.1);
    CHECK(smoothed < 1.0);
}

TEST_CASE("guidance step size: linear decay over the guided range") {
    GuidanceConfig cfg;
    cfg.lambda_start = 20.0;
    cfg.lambda_end = 10.0;
    cfg.guided_steps = 25;
    CHECK(lambda_at(0, cfg) == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(lambda_at(24, cfg) == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(lambda_at(12, cfg) == doctest::Approx(15.0).epsilon(1e-12));
    CHECK_THROWS_AS(lambda_at(25, cfg), std::invalid_argument);
    CHECK_THROWS_AS(lambda_at(-1, cfg), std::invalid_argument);

    GuidanceConfig one = cfg;
    one.guided_steps = 1;
    CHECK(lambda_at(0, one) == doctest::Approx(20.0));
}

TEST_CASE("guidance config: bad ranges rejected") {
    GuidanceConfig cfg;
    cfg.guided_steps = cfg.total_steps + 1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = GuidanceConfig{};
    cfg.lambda_end = cfg.lambda_start + 1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = GuidanceConfig{};
    cfg.lambda_end = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    CHECK_NOTHROW(GuidanceConfig{}.validate());
}

TEST_CASE("latent update: descent step and guards") {
    Tensor z = Tensor::from({2}, {1.0, 1.0});
    Tensor g = Tensor::from({2}, {0.5, -0.5});
    Tensor out = update_latent(z, g, 2.0);
    CHECK(out[0] == doctest::Approx(0.0));
    CHECK(out[1] == doctest::Approx(2.0));

    CHECK(bitwise_equal(update_latent(z, g, 0.0), z));

    Tensor bad = Tensor::from({2}, {std::nan(""), 0.0});
    CHECK_THROWS_AS(update_latent(z, bad, 1.0), NumericError);
    Tensor wrong = Tensor::from({3}, {0, 0, 0});
    CHECK_THROWS_AS(update_latent(z, wrong, 1.0), std::invalid_argument);
}

TEST_CASE("map objective: analytic map gradients match finite differences") {
    Rng rng(31);
    GuidanceConfig cfg;
    std::vector<std::vector<Map2D>> maps = random_token_maps(rng, 2, 2, 5, 4);

    for (GuidanceObjective obj : {GuidanceObjective::Composition, GuidanceObjective::Layout}) {
        std::vector<std::vector<Map2D>> d_maps;
        LossBreakdown got = map_loss(obj, maps, cfg, &d_maps);
        CHECK(std::isfinite(got.total));

        auto f = [&](const Tensor& x) {
            return map_loss(obj, unpack(x, maps), cfg, nullptr).total;
        };
        Tensor fd = finite_diff_grad(f, pack(maps), 1e-6);
        Tensor an = pack(d_maps);
        INFO("objective ", obj == GuidanceObjective::Composition ? "composition" : "layout");
        CHECK(rel_l2_error(an, fd) < 1e-6);
    }
}

TEST_CASE("map objective: composition breakdown is inter plus scaled intra") {
    Rng rng(32);
    GuidanceConfig cfg;
    std::vector<std::vector<Map2D>> maps = random_token_maps(rng, 2, 2, 4, 4);
    LossBreakdown b = map_loss(GuidanceObjective::Composition, maps, cfg, nullptr);
    CHECK(b.total == doctest::Approx(b.inter + cfg.alpha * b.intra).epsilon(1e-12));
    CHECK_FALSE(b.inter_degenerate);

    LossBreakdown single = map_loss(GuidanceObjective::Composition, {maps[0]}, cfg, nullptr);
    CHECK(single.inter_degenerate);

    LossBreakdown lay = map_loss(GuidanceObjective::Layout, maps, cfg, nullptr);
    CHECK(lay.total ==
          doctest::Approx(lay.ae + cfg.alpha1 * lay.intra + cfg.alpha2 * lay.inter).epsilon(1e-12));
}

TEST_CASE("latent gradient: matches finite differences through the model") {
    Rng rng(33);
    ModelDims dims = tiny_dims();
    DenoiserParams base = DenoiserParams::init(dims, 8, rng, 0.6);
    Tensor z = rng.gaussian_tensor({4, 4, 3});
    GuidanceConfig cfg;

    std::vector<GuidedBranch> branches;
    branches.push_back(GuidedBranch{{1, 2, 3}, {1, 2}, nullptr});
    branches.push_back(GuidedBranch{{4, 5}, {0}, nullptr});

    for (GuidanceObjective obj : {GuidanceObjective::Composition, GuidanceObjective::Layout}) {
        LatentGradResult lg = grad_wrt_latent(z, 120, base, branches, cfg, obj);
        CHECK(lg.grad_norm == doctest::Approx(l2_norm(lg.grad)).epsilon(1e-12));

        auto f = [&](const Tensor& x) {
            std::vector<std::vector<Map2D>> maps;
            for (const GuidedBranch& br : branches) {
                ForwardResult fr = full_forward(x, 120, br.tokens, base, br.adapter, nullptr);
                std::vector<Map2D> set;
                for (int pos : br.triggers) set.push_back(extract_token_map(fr.attn, pos));
                maps.push_back(std::move(set));
            }
            return map_loss(obj, maps, cfg, nullptr).total;
        };
        CHECK(lg.losses.total == doctest::Approx(f(z)).epsilon(1e-12));
        Tensor fd = finite_diff_grad(f, z, 1e-6);
        CHECK(rel_l2_error(lg.grad, fd) < 1e-5);
    }

    CHECK_THROWS_AS(grad_wrt_latent(z, 120, base, {}, cfg, GuidanceObjective::Composition),
                    std::invalid_argument);
    std::vector<GuidedBranch> no_trig{GuidedBranch{{1, 2}, {}, nullptr}};
    CHECK_THROWS_AS(grad_wrt_latent(z, 120, base, no_trig, cfg, GuidanceObjective::Composition),
                    std::invalid_argument);
}

TEST_CASE("oracle gradient: matches finite differences exactly enough") {
    Rng rng(34);
    GuidanceConfig cfg;
    Tensor z = rng.gaussian_tensor({5, 5, 3});
    std::vector<OracleBranch> branches;
    for (int b = 0; b < 2; ++b) {
        OracleBranch ob;
        ob.anchors = rng.gaussian_tensor({3, 3});
        ob.triggers = {b, 2};
        branches.push_back(std::move(ob));
    }

    for (GuidanceObjective obj : {GuidanceObjective::Composition, GuidanceObjective::Layout}) {
        LatentGradResult lg = oracle_grad_wrt_latent(z, branches, cfg, obj);
        CHECK(lg.losses.total == doctest::Approx(oracle_objective(z, branches, cfg, obj)).epsilon(1e-12));
        auto f = [&](const Tensor& x) { return oracle_objective(x, branches, cfg, obj); };
        Tensor fd = finite_diff_grad(f, z, 1e-6);
        CHECK(rel_l2_error(lg.grad, fd) < 1e-7);
    }
}

TEST_CASE("oracle gradient: small steps reduce the objective") {
    GuidanceConfig cfg;
    int wins = 0;
    for (int s = 0; s < 10; ++s) {
        Rng rng(500 + std::uint64_t(s));
        Tensor z = rng.gaussian_tensor({6, 6, 3});
        std::vector<OracleBranch> branches;
        for (int b = 0; b < 2; ++b) {
            OracleBranch ob;
            ob.anchors = rng.gaussian_tensor({2, 3});
            ob.triggers = {b};
            branches.push_back(std::move(ob));
        }
        double before = oracle_objective(z, branches, cfg, GuidanceObjective::Composition);
        LatentGradResult lg = oracle_grad_wrt_latent(z, branches, cfg, GuidanceObjective::Composition);
        Tensor z2 = update_latent(z, lg.grad, 1e-3);
        double after = oracle_objective(z2, branches, cfg, GuidanceObjective::Composition);
        if (after < before) ++wins;
    }
    CHECK(wins >= 9);
}
