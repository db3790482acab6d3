#include "mcg/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <stdexcept>

namespace mcg {

const char* blob_shape_name(BlobShape shape) {
    switch (shape) {
        case BlobShape::Disc: return "disc";
        case BlobShape::Square: return "square";
        case BlobShape::Triangle: return "triangle";
    }
    throw std::invalid_argument("shape: unknown value");
}

BlobShape blob_shape_from_name(const std::string& name) {
    if (name == "disc") return BlobShape::Disc;
    if (name == "square") return BlobShape::Square;
    if (name == "triangle") return BlobShape::Triangle;
    throw std::invalid_argument("shape: unknown name '" + name + "'");
}

void ConceptSpec::validate() const {
    if (name.empty() || trigger.empty() || category.empty())
        throw std::invalid_argument("concept: name, trigger, and category are required");
    for (double c : color)
        if (!(c >= 0.0) || !(c <= 1.0)) throw std::invalid_argument("concept: color outside [0,1]");
    if (!(size_min >= 0.0) || size_max < size_min)
        throw std::invalid_argument("concept: bad size range");
}

namespace {

constexpr double kBackground = 0.5;
constexpr int kSupersample = 4;

struct TriangleGeom {
    double v[3][2];
};

TriangleGeom triangle_vertices(double cx, double cy, double size) {
    TriangleGeom g;
    for (int k = 0; k < 3; ++k) {
        double theta = -1.5707963267948966 + 2.0943951023931953 * k;
        g.v[k][0] = cx + size * std::cos(theta);
        g.v[k][1] = cy + size * std::sin(theta);
    }
    return g;
}

bool point_in_triangle(const TriangleGeom& g, double x, double y) {
    double s[3];
    for (int k = 0; k < 3; ++k) {
        double ax = g.v[k][0], ay = g.v[k][1];
        double bx = g.v[(k + 1) % 3][0], by = g.v[(k + 1) % 3][1];
        s[k] = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
    }
    bool nonneg = s[0] >= 0.0 && s[1] >= 0.0 && s[2] >= 0.0;
    bool nonpos = s[0] <= 0.0 && s[1] <= 0.0 && s[2] <= 0.0;
    return nonneg || nonpos;
}

double pixel_coverage(BlobShape shape, double cx, double cy, double size, int py, int px) {
    if (size <= 0.0) return 0.0;
    TriangleGeom tri;
    if (shape == BlobShape::Triangle) tri = triangle_vertices(cx, cy, size);
    int hit = 0;
    for (int sy = 0; sy < kSupersample; ++sy) {
        double y = py + (sy + 0.5) / kSupersample;
        for (int sx = 0; sx < kSupersample; ++sx) {
            double x = px + (sx + 0.5) / kSupersample;
            bool inside = false;
            switch (shape) {
                case BlobShape::Disc: {
                    double dx = x - cx, dy = y - cy;
                    inside = dx * dx + dy * dy <= size * size;
                    break;
                }
                case BlobShape::Square:
                    inside = std::max(std::abs(x - cx), std::abs(y - cy)) <= size;
                    break;
                case BlobShape::Triangle:
                    inside = point_in_triangle(tri, x, y);
                    break;
            }
            if (inside) ++hit;
        }
    }
    return static_cast<double>(hit) / (kSupersample * kSupersample);
}

Tensor background_image(int h, int w) {
    return Tensor::full({static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3}, kBackground);
}

}  // namespace

void render_blob(Tensor& image, Map2D* mask, BlobShape shape, const std::array<double, 3>& color,
                 double cx, double cy, double size) {
    if (image.rank() != 3 || image.extent(2) != 3)
        throw std::invalid_argument("render: image must be (h, w, 3)");
    int h = static_cast<int>(image.extent(0));
    int w = static_cast<int>(image.extent(1));
    if (mask != nullptr && (mask->h != h || mask->w != w))
        throw std::invalid_argument("render: mask shape mismatch");
    int y0 = std::max(0, static_cast<int>(std::floor(cy - size)) - 1);
    int y1 = std::min(h, static_cast<int>(std::ceil(cy + size)) + 1);
    int x0 = std::max(0, static_cast<int>(std::floor(cx - size)) - 1);
    int x1 = std::min(w, static_cast<int>(std::ceil(cx + size)) + 1);
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            double cov = pixel_coverage(shape, cx, cy, size, y, x);
            if (cov > 0.0) {
                for (int c = 0; c < 3; ++c) {
                    double cur = image.at3(y, x, c);
                    image.at3(y, x, c) = cur + cov * (color[static_cast<std::size_t>(c)] - cur);
                }
            }
            if (mask != nullptr && cov >= 0.5) mask->at(y, x) = 1.0;
        }
    }
}

RenderResult render_concept(const ConceptSpec& spec, int height, int width, double cx, double cy,
                            Rng& rng) {
    spec.validate();
    if (height < 1 || width < 1) throw std::invalid_argument("render: bad frame size");
    double size = spec.size_min + rng.uniform() * (spec.size_max - spec.size_min);
    if (cx < 0.0 || cx > width || cy < 0.0 || cy > height || cx - size < 0.0 ||
        cx + size > width || cy - size < 0.0 || cy + size > height)
        throw std::invalid_argument("render: blob out of frame");
    RenderResult out;
    out.image = background_image(height, width);
    out.mask = Map2D(height, width);
    out.size = size;
    render_blob(out.image, &out.mask, spec.shape, spec.color, cx, cy, size);
    return out;
}

Tensor image_to_latent(const Tensor& image) {
    Tensor z(image.shape());
    for (std::size_t i = 0; i < image.numel(); ++i) z[i] = 2.0 * image[i] - 1.0;
    return z;
}

Tensor latent_to_image(const Tensor& z) {
    Tensor img(z.shape());
    for (std::size_t i = 0; i < z.numel(); ++i)
        img[i] = std::clamp((z[i] + 1.0) / 2.0, 0.0, 1.0);
    return img;
}

std::vector<GroundedSample> build_scene_dataset(const ConceptSpec& blueprint, int height, int width,
                                                int count, const Vocabulary& vocab, Rng& rng) {
    blueprint.validate();
    if (count < 1) throw std::invalid_argument("dataset: count must be >= 1");
    double margin = blueprint.size_max;
    if (2.0 * margin >= width || 2.0 * margin >= height)
        throw std::invalid_argument("dataset: frame too small for the size range");

    std::vector<int> caption{vocab.id_of("photo"), vocab.id_of("of"), vocab.id_of("a"),
                             vocab.id_of(blueprint.trigger)};
    std::vector<GroundedSample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        double cx = margin + rng.uniform() * (width - 2.0 * margin);
        double cy = margin + rng.uniform() * (height - 2.0 * margin);
        RenderResult r = render_concept(blueprint, height, width, cx, cy, rng);
        GroundedSample s;
        s.x0 = image_to_latent(r.image);
        s.tokens = caption;
        s.masks.assign(caption.size(), Map2D(height, width, 1.0));
        s.masks.back() = r.mask;
        out.push_back(std::move(s));
    }
    return out;
}

double presence_score(const Tensor& image, const ConceptSpec& spec) {
    spec.validate();
    if (image.rank() != 3 || image.extent(2) != 3)
        throw std::invalid_argument("presence: image must be (h, w, 3)");
    if (!image.all_finite()) throw std::invalid_argument("presence: non-finite image");
    int h = static_cast<int>(image.extent(0));
    int w = static_cast<int>(image.extent(1));

    std::vector<double> sizes{spec.size_min, 0.5 * (spec.size_min + spec.size_max), spec.size_max};
    sizes.erase(std::unique(sizes.begin(), sizes.end(),
                            [](double a, double b) { return std::abs(a - b) < 1e-12; }),
                sizes.end());

    double best = 0.0;
    for (double size : sizes) {
        if (size <= 0.0) continue;
        int half = static_cast<int>(std::ceil(size)) + 1;
        int patch = 2 * half;
        if (patch > h || patch > w) continue;
        for (double fy : {0.0, 0.5}) {
            for (double fx : {0.0, 0.5}) {
                Tensor tmpl = background_image(patch, patch);
                render_blob(tmpl, nullptr, spec.shape, spec.color, half + fx, half + fy, size);
                double tmean = 0.0;
                for (std::size_t i = 0; i < tmpl.numel(); ++i) tmean += tmpl[i];
                tmean /= static_cast<double>(tmpl.numel());
                double tnorm = 0.0;
                for (std::size_t i = 0; i < tmpl.numel(); ++i) {
                    double d = tmpl[i] - tmean;
                    tnorm += d * d;
                }
                tnorm = std::sqrt(tnorm);
                if (tnorm < 1e-9) continue;

                for (int y0 = 0; y0 + patch <= h; ++y0) {
                    for (int x0 = 0; x0 + patch <= w; ++x0) {
                        double wmean = 0.0;
                        for (int y = 0; y < patch; ++y)
                            for (int x = 0; x < patch; ++x)
                                for (int c = 0; c < 3; ++c) wmean += image.at3(y0 + y, x0 + x, c);
                        wmean /= static_cast<double>(tmpl.numel());
                        double dot = 0.0, wnorm = 0.0;
                        for (int y = 0; y < patch; ++y) {
                            for (int x = 0; x < patch; ++x) {
                                for (int c = 0; c < 3; ++c) {
                                    double a = image.at3(y0 + y, x0 + x, c) - wmean;
                                    double b = tmpl.at3(y, x, c) - tmean;
                                    dot += a * b;
                                    wnorm += a * a;
                                }
                            }
                        }
                        wnorm = std::sqrt(wnorm);
                        if (wnorm < 1e-9) continue;
                        best = std::max(best, dot / (wnorm * tnorm));
                    }
                }
            }
        }
    }
    return std::max(0.0, best);
}

RunEvaluation evaluate_run(const std::vector<Tensor>& images, const std::vector<ConceptSpec>& specs,
                           double tau, const std::vector<double>& final_inter,
                           const std::vector<double>& wall_seconds) {
    if (images.empty() || specs.empty()) throw std::invalid_argument("evaluate: nothing to score");
    if (!final_inter.empty() && final_inter.size() != images.size())
        throw std::invalid_argument("evaluate: final_inter size mismatch");
    if (!wall_seconds.empty() && wall_seconds.size() != images.size())
        throw std::invalid_argument("evaluate: wall_seconds size mismatch");

    RunEvaluation ev;
    ev.mean_presence.assign(specs.size(), 0.0);
    int co = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        SceneMetrics m;
        m.presence.reserve(specs.size());
        bool all_above = true;
        for (std::size_t k = 0; k < specs.size(); ++k) {
            double p = presence_score(images[i], specs[k]);
            m.presence.push_back(p);
            ev.mean_presence[k] += p;
            if (p < tau) all_above = false;
        }
        m.co_occurrence = all_above;
        if (all_above) ++co;
        if (!final_inter.empty()) {
            m.final_inter = final_inter[i];
            ev.mean_final_inter += final_inter[i];
        }
        if (!wall_seconds.empty()) m.wall_seconds = wall_seconds[i];
        ev.per_run.push_back(std::move(m));
    }
    double n = static_cast<double>(images.size());
    for (double& p : ev.mean_presence) p /= n;
    ev.co_occurrence_rate = static_cast<double>(co) / n;
    if (!final_inter.empty()) ev.mean_final_inter /= n;
    return ev;
}

void WorldSpec::validate() const {
    if (height < 8 || width < 8) throw std::invalid_argument("world: frame too small");
    if (dims.latent_channels != 3)
        throw std::invalid_argument("world: latent channels must be 3 (RGB frames)");
    if (!(weight_scale > 0.0)) throw std::invalid_argument("world: weight_scale must be positive");
    if (base_scenes < 1) throw std::invalid_argument("world: base_scenes must be >= 1");
    if (blank_caption_fraction < 0.0 || single_blob_fraction < 0.0 ||
        blank_caption_fraction + single_blob_fraction > 1.0)
        throw std::invalid_argument("world: caption fractions out of range");
    if (!(base_size_min >= 1.0) || base_size_max < base_size_min)
        throw std::invalid_argument("world: bad base size range");
    if (2.0 * base_size_max >= std::min(height, width) / 2.0)
        throw std::invalid_argument("world: blobs too large for the frame");
    base_train.validate();
    if (categories.empty()) throw std::invalid_argument("world: no categories");
    if (concepts.empty()) throw std::invalid_argument("world: no concepts");
    std::set<std::string> words;
    for (const std::string& c : categories)
        if (!words.insert(c).second) throw std::invalid_argument("world: duplicate category");
    for (const ConceptSpec& c : concepts) {
        c.validate();
        if (!words.insert(c.trigger).second)
            throw std::invalid_argument("world: trigger collides with another word");
        if (std::find(categories.begin(), categories.end(), c.category) == categories.end())
            throw std::invalid_argument("world: concept category not in category list");
    }
}

WorldSpec default_world_spec() {
    WorldSpec spec;
    // Gentle beta tail: the deterministic sampler amplifies model error by
    // sqrt(alpha_bar_final / alpha_bar_0), which stays ~3x at this setting.
    spec.beta_end = 4e-3;
    spec.base_train.lr = 1e-3;
    spec.base_train.steps = 12000;
    spec.base_train.batch = 8;
    spec.base_train.gamma1 = 20.0;
    ConceptSpec ruby;
    ruby.name = "ruby";
    ruby.shape = BlobShape::Disc;
    ruby.color = {0.9, 0.1, 0.1};
    ruby.size_min = 2.0;
    ruby.size_max = 3.0;
    ruby.trigger = "ruby";
    ruby.category = "disc";
    ConceptSpec jade;
    jade.name = "jade";
    jade.shape = BlobShape::Square;
    jade.color = {0.1, 0.8, 0.2};
    jade.size_min = 2.0;
    jade.size_max = 3.0;
    jade.trigger = "jade";
    jade.category = "square";
    spec.concepts = {ruby, jade};
    return spec;
}

namespace {

std::array<double, 3> draw_contrast_color(Rng& rng) {
    for (int tries = 0; tries < 16; ++tries) {
        std::array<double, 3> c{rng.uniform(), rng.uniform(), rng.uniform()};
        double dev = 0.0;
        for (double v : c) dev = std::max(dev, std::abs(v - kBackground));
        if (dev >= 0.25) return c;
    }
    return {0.0, 0.0, 0.0};
}

struct WorldBlob {
    BlobShape shape;
    std::array<double, 3> color;
    double cx, cy, size;
};

WorldBlob draw_blob(const WorldSpec& spec, Rng& rng, std::size_t category, double cx_lo,
                    double cx_hi) {
    WorldBlob b;
    b.shape = blob_shape_from_name(spec.categories[category]);
    b.color = draw_contrast_color(rng);
    b.size = spec.base_size_min + rng.uniform() * (spec.base_size_max - spec.base_size_min);
    double m = spec.base_size_max;
    b.cx = cx_lo + rng.uniform() * (cx_hi - cx_lo);
    b.cy = m + rng.uniform() * (spec.height - 2.0 * m);
    return b;
}

}  // namespace

std::vector<GroundedSample> build_world_dataset(const WorldSpec& spec, const Vocabulary& vocab,
                                                std::uint64_t seed) {
    Rng rng(seed);
    double m = spec.base_size_max;
    double mid = spec.width / 2.0;
    std::size_t ncat = spec.categories.size();

    std::vector<GroundedSample> out;
    out.reserve(static_cast<std::size_t>(spec.base_scenes));
    for (int i = 0; i < spec.base_scenes; ++i) {
        double u = rng.uniform();
        GroundedSample s;
        if (u < spec.blank_caption_fraction + spec.single_blob_fraction &&
            u >= spec.blank_caption_fraction) {
            std::size_t cat = rng.below(ncat);
            WorldBlob b = draw_blob(spec, rng, cat, m, spec.width - m);
            Tensor img = background_image(spec.height, spec.width);
            Map2D mask(spec.height, spec.width);
            render_blob(img, &mask, b.shape, b.color, b.cx, b.cy, b.size);
            s.x0 = image_to_latent(img);
            s.tokens = {vocab.id_of("photo"), vocab.id_of("of"), vocab.id_of("the"),
                        vocab.id_of(spec.categories[cat])};
            s.masks.assign(s.tokens.size(), Map2D(spec.height, spec.width, 1.0));
            s.masks.back() = mask;
        } else {
            std::size_t cat1 = rng.below(ncat);
            std::size_t cat2 = ncat > 1 ? (cat1 + 1 + rng.below(ncat - 1)) % ncat : cat1;
            WorldBlob left = draw_blob(spec, rng, cat1, m, mid - 1.0);
            WorldBlob right = draw_blob(spec, rng, cat2, mid + 1.0, spec.width - m);
            bool swap = rng.below(2) == 1;
            const WorldBlob& first = swap ? right : left;
            const WorldBlob& second = swap ? left : right;
            std::size_t first_cat = swap ? cat2 : cat1;
            std::size_t second_cat = swap ? cat1 : cat2;

            Tensor img = background_image(spec.height, spec.width);
            Map2D mask1(spec.height, spec.width), mask2(spec.height, spec.width);
            render_blob(img, &mask1, first.shape, first.color, first.cx, first.cy, first.size);
            render_blob(img, &mask2, second.shape, second.color, second.cx, second.cy, second.size);
            s.x0 = image_to_latent(img);
            if (u < spec.blank_caption_fraction) {
                s.tokens = {0};
                s.masks.assign(1, Map2D(spec.height, spec.width, 1.0));
            } else {
                s.tokens = {vocab.id_of("photo"), vocab.id_of("of"),
                            vocab.id_of("the"),   vocab.id_of(spec.categories[first_cat]),
                            vocab.id_of("and"),   vocab.id_of("the"),
                            vocab.id_of(spec.categories[second_cat])};
                s.masks.assign(s.tokens.size(), Map2D(spec.height, spec.width, 1.0));
                s.masks[3] = mask1;
                s.masks[6] = mask2;
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

World build_world(const WorldSpec& spec, std::uint64_t seed) {
    spec.validate();
    World world;
    world.spec = spec;
    for (const char* w : {"photo", "of", "a", "the", "and"}) world.vocab.add(w);
    for (const std::string& c : spec.categories) world.vocab.add(c);
    for (const ConceptSpec& c : spec.concepts) world.vocab.add(c.trigger);

    std::vector<GroundedSample> dataset = build_world_dataset(spec, world.vocab, seed);

    world.schedule = NoiseSchedule::make(spec.train_grid, spec.beta_start, spec.beta_end,
                                         spec.inference_steps, spec.deterministic_sampler);
    Rng init_rng(seed ^ 0x5eedbadc0ffee123ULL);
    world.base =
        DenoiserParams::init(spec.dims, world.vocab.size(), init_rng, spec.weight_scale);
    world.base_stats = train_base(world.base, dataset, spec.base_train, world.schedule, seed + 1);
    return world;
}

TrainResult train_world_concept(const World& world, const ConceptSpec& blueprint, AdapterKind kind,
                                const TrainConfig& cfg, int dataset_size, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<GroundedSample> dataset = build_scene_dataset(
        blueprint, world.spec.height, world.spec.width, dataset_size, world.vocab, rng);
    return train_concept(world.base, dataset, kind, blueprint.trigger,
                         world.vocab.id_of(blueprint.trigger), cfg, world.schedule, seed + 1);
}

std::vector<int> uncond_prompt(const Vocabulary& vocab) {
    (void)vocab;
    return {0};
}

std::vector<int> global_prompt(const Vocabulary& vocab, const std::vector<ConceptSpec>& concepts) {
    if (concepts.empty()) throw std::invalid_argument("prompt: no concepts");
    std::vector<int> tokens{vocab.id_of("photo"), vocab.id_of("of"), vocab.id_of("the"),
                            vocab.id_of(concepts[0].category)};
    for (std::size_t i = 1; i < concepts.size(); ++i) {
        tokens.push_back(vocab.id_of("and"));
        tokens.push_back(vocab.id_of("the"));
        tokens.push_back(vocab.id_of(concepts[i].category));
    }
    return tokens;
}

SubPrompt concept_prompt(const Vocabulary& vocab, const std::vector<ConceptSpec>& concepts,
                         std::size_t index) {
    if (index >= concepts.size()) throw std::invalid_argument("prompt: concept index out of range");
    SubPrompt sp;
    sp.tokens = {vocab.id_of("photo"), vocab.id_of("of"), vocab.id_of("the"),
                 vocab.id_of(concepts[index].trigger)};
    sp.triggers.push_back(3);
    for (std::size_t j = 0; j < concepts.size(); ++j) {
        if (j == index) continue;
        sp.tokens.push_back(vocab.id_of("and"));
        sp.tokens.push_back(vocab.id_of("a"));
        sp.tokens.push_back(vocab.id_of(concepts[j].category));
    }
    sp.tokens.push_back(vocab.id_of(concepts[index].trigger));
    sp.triggers.push_back(static_cast<int>(sp.tokens.size()) - 1);
    return sp;
}

SubPrompt subject_prompt(const Vocabulary& vocab, const std::vector<ConceptSpec>& concepts,
                         std::size_t index) {
    if (index >= concepts.size()) throw std::invalid_argument("prompt: concept index out of range");
    SubPrompt sp;
    sp.tokens = {vocab.id_of("photo"), vocab.id_of("of"), vocab.id_of("the"),
                 vocab.id_of(concepts[index].category)};
    sp.triggers.push_back(3);
    for (std::size_t j = 0; j < concepts.size(); ++j) {
        if (j == index) continue;
        sp.tokens.push_back(vocab.id_of("and"));
        sp.tokens.push_back(vocab.id_of("a"));
        sp.tokens.push_back(vocab.id_of(concepts[j].category));
    }
    return sp;
}

void ScenarioConfig::validate() const {
    if (seeds < 1) throw std::invalid_argument("scenario: seeds must be >= 1");
    guidance.validate();
    if (!(w_global >= 0.0) || !(w_concept >= 0.0))
        throw std::invalid_argument("scenario: negative branch weight");
}

ScenarioOutcome run_scenario(const World& world, const std::vector<const ConceptAdapter*>& adapters,
                             const ScenarioConfig& cfg) {
    cfg.validate();
    const std::vector<ConceptSpec>& concepts = world.spec.concepts;
    if (adapters.size() != concepts.size())
        throw std::invalid_argument("scenario: need one adapter per concept");

    std::vector<SamplerBranch> branches;
    SamplerBranch global;
    global.tokens = global_prompt(world.vocab, concepts);
    global.weight = cfg.w_global;
    branches.push_back(std::move(global));
    for (std::size_t i = 0; i < concepts.size(); ++i) {
        SubPrompt sp = concept_prompt(world.vocab, concepts, i);
        SamplerBranch br;
        br.tokens = std::move(sp.tokens);
        br.triggers = std::move(sp.triggers);
        br.adapter = adapters[i];
        br.weight = cfg.w_concept;
        branches.push_back(std::move(br));
    }

    RunOptions opt;
    opt.height = world.spec.height;
    opt.width = world.spec.width;
    opt.guidance = cfg.guidance;
    opt.schedule = world.schedule;
    opt.refine_masks = cfg.refine_masks;
    opt.z_space_merge = cfg.z_space_merge;

    std::vector<int> uncond = uncond_prompt(world.vocab);
    ScenarioOutcome outcome;
    std::vector<double> final_inter, wall;
    for (int s = 0; s < cfg.seeds; ++s) {
        opt.seed = cfg.seed_base + static_cast<std::uint64_t>(s);
        auto t0 = std::chrono::steady_clock::now();
        RunResult rr = run_mc2(world.base, uncond, branches, opt);
        auto t1 = std::chrono::steady_clock::now();
        wall.push_back(std::chrono::duration<double>(t1 - t0).count());
        final_inter.push_back(rr.trace.steps.back().post.inter);
        outcome.images.push_back(latent_to_image(rr.image));
        outcome.traces.push_back(std::move(rr.trace));
    }
    outcome.eval =
        evaluate_run(outcome.images, concepts, world.spec.presence_tau, final_inter, wall);
    return outcome;
}

}  // namespace mcg
