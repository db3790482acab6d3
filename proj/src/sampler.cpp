#include "mcg/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>

namespace mcg {

namespace {

std::string step_tag(int step) { return "step " + std::to_string(step); }

}  // namespace

NoiseSchedule NoiseSchedule::make(int train_steps, double beta_start, double beta_end,
                                  int inference_steps, bool deterministic) {
    NoiseSchedule s;
    s.train_steps = train_steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.inference_steps = inference_steps;
    s.deterministic = deterministic;
    if (train_steps < 2) throw std::invalid_argument("schedule: train_steps must be >= 2");
    if (inference_steps < 2) throw std::invalid_argument("schedule: inference_steps must be >= 2");
    if (inference_steps > train_steps)
        throw std::invalid_argument("schedule: inference_steps exceeds train grid");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw std::invalid_argument("schedule: betas must satisfy 0 < beta_start <= beta_end < 1");

    s.alpha_bar.resize(static_cast<std::size_t>(train_steps));
    double prod = 1.0;
    for (int i = 0; i < train_steps; ++i) {
        double beta = beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                       static_cast<double>(train_steps - 1);
        prod *= 1.0 - beta;
        s.alpha_bar[static_cast<std::size_t>(i)] = prod;
    }
    s.tau.resize(static_cast<std::size_t>(inference_steps));
    for (int i = 0; i < inference_steps; ++i) {
        double pos = static_cast<double>(i) * static_cast<double>(train_steps - 1) /
                     static_cast<double>(inference_steps - 1);
        s.tau[static_cast<std::size_t>(i)] = static_cast<int>(std::llround(pos));
    }
    s.validate();
    return s;
}

void NoiseSchedule::validate() const {
    if (static_cast<int>(alpha_bar.size()) != train_steps)
        throw std::invalid_argument("schedule: alpha_bar size mismatch");
    if (static_cast<int>(tau.size()) != inference_steps)
        throw std::invalid_argument("schedule: tau size mismatch");
    for (std::size_t i = 0; i < alpha_bar.size(); ++i) {
        double a = alpha_bar[i];
        if (!(a > 0.0) || !(a < 1.0)) throw std::invalid_argument("schedule: alpha_bar out of (0,1)");
        if (i > 0 && a >= alpha_bar[i - 1])
            throw std::invalid_argument("schedule: alpha_bar must decrease");
    }
    for (std::size_t i = 0; i < tau.size(); ++i) {
        int t = tau[i];
        if (t < 0 || t >= train_steps) throw std::invalid_argument("schedule: tau out of range");
        if (i > 0 && t <= tau[i - 1])
            throw std::invalid_argument("schedule: tau must be strictly increasing");
    }
}

namespace {

Tensor ddpm_step_noise(const Tensor& z, const Tensor& eps_hat, int pos, const NoiseSchedule& s,
                       const Tensor* xi) {
    if (pos < 1 || pos >= s.inference_steps)
        throw std::invalid_argument("ddpm_step: position must be in [1, inference_steps)");
    if (!z.same_shape(eps_hat)) throw std::invalid_argument("ddpm_step: shape mismatch");
    if (!eps_hat.all_finite()) throw NumericError("ddpm_step: non-finite noise estimate");

    double abar_t = s.abar(pos);
    double abar_prev = s.abar(pos - 1);
    double sqrt_abar_t = std::sqrt(abar_t);
    double sqrt_one_minus_t = std::sqrt(1.0 - abar_t);
    double sqrt_abar_prev = std::sqrt(abar_prev);

    double sigma = 0.0;
    if (!s.deterministic) {
        double var = (1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - abar_t / abar_prev);
        sigma = std::sqrt(std::max(0.0, var));
    }
    double dir_coeff = std::sqrt(std::max(0.0, 1.0 - abar_prev - sigma * sigma));

    Tensor out(z.shape());
    const double* zp = z.data();
    const double* ep = eps_hat.data();
    double* op = out.data();
    const double* xp = xi != nullptr ? xi->data() : nullptr;
    for (std::size_t i = 0; i < z.numel(); ++i) {
        double x0 = (zp[i] - sqrt_one_minus_t * ep[i]) / sqrt_abar_t;
        double v = sqrt_abar_prev * x0 + dir_coeff * ep[i];
        if (xp != nullptr) v += sigma * xp[i];
        op[i] = v;
    }
    return out;
}

}  // namespace

Tensor ddpm_step(const Tensor& z, const Tensor& eps_hat, int pos, const NoiseSchedule& s, Rng& rng) {
    if (s.deterministic) return ddpm_step_noise(z, eps_hat, pos, s, nullptr);
    Tensor xi = rng.gaussian_tensor(z.shape());
    return ddpm_step_noise(z, eps_hat, pos, s, &xi);
}

Tensor predict_x0(const Tensor& z, const Tensor& eps_hat, const NoiseSchedule& s) {
    if (!z.same_shape(eps_hat)) throw std::invalid_argument("predict_x0: shape mismatch");
    if (!eps_hat.all_finite()) throw NumericError("predict_x0: non-finite noise estimate");
    double abar0 = s.abar(0);
    double sa = std::sqrt(abar0);
    double sb = std::sqrt(1.0 - abar0);
    Tensor out(z.shape());
    const double* zp = z.data();
    const double* ep = eps_hat.data();
    double* op = out.data();
    for (std::size_t i = 0; i < z.numel(); ++i) op[i] = (zp[i] - sb * ep[i]) / sa;
    return out;
}

Tensor semantic_merge(const Tensor& eps_u, const std::vector<Tensor>& eps, const std::vector<double>& w) {
    if (eps.size() != w.size()) throw std::invalid_argument("semantic_merge: weight count mismatch");
    for (const Tensor& e : eps)
        if (!e.same_shape(eps_u)) throw std::invalid_argument("semantic_merge: shape mismatch");
    double coeff_u = 1.0;
    for (double wi : w) coeff_u -= wi;

    Tensor out(eps_u.shape());
    std::size_t n = eps_u.numel();
    for (std::size_t p = 0; p < n; ++p) {
        double acc = 0.0;
        bool started = false;
        if (coeff_u != 0.0) {
            acc = coeff_u * eps_u.data()[p];
            started = true;
        }
        for (std::size_t i = 0; i < eps.size(); ++i) {
            if (w[i] == 0.0) continue;
            double term = w[i] * eps[i].data()[p];
            if (!started) {
                acc = term;
                started = true;
            } else {
                acc += term;
            }
        }
        out.data()[p] = acc;
    }
    return out;
}

Tensor masked_merge(const Tensor& eps_u, const std::vector<Tensor>& eps, const std::vector<Map2D>& masks,
                    const std::vector<double>& w) {
    if (eps.size() != w.size() || eps.size() != masks.size())
        throw std::invalid_argument("masked_merge: branch count mismatch");
    if (eps_u.rank() != 3) throw std::invalid_argument("masked_merge: latent must have rank 3");
    int h = eps_u.extent(0);
    int wd = eps_u.extent(1);
    int l = eps_u.extent(2);
    for (const Tensor& e : eps)
        if (!e.same_shape(eps_u)) throw std::invalid_argument("masked_merge: shape mismatch");
    for (const Map2D& m : masks)
        if (m.h != h || m.w != wd) throw std::invalid_argument("masked_merge: mask shape mismatch");

    Tensor out(eps_u.shape());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < wd; ++x) {
            double coeff_u = 1.0;
            for (std::size_t i = 0; i < w.size(); ++i) coeff_u -= w[i] * masks[i].at(y, x);
            for (int c = 0; c < l; ++c) {
                std::size_t p = (static_cast<std::size_t>(y) * static_cast<std::size_t>(wd) +
                                 static_cast<std::size_t>(x)) *
                                    static_cast<std::size_t>(l) +
                                static_cast<std::size_t>(c);
                double acc = 0.0;
                bool started = false;
                if (coeff_u != 0.0) {
                    acc = coeff_u * eps_u.data()[p];
                    started = true;
                }
                for (std::size_t i = 0; i < w.size(); ++i) {
                    double wm = w[i] * masks[i].at(y, x);
                    if (wm == 0.0) continue;
                    double term = wm * eps[i].data()[p];
                    if (!started) {
                        acc = term;
                        started = true;
                    } else {
                        acc += term;
                    }
                }
                out.data()[p] = acc;
            }
        }
    }
    return out;
}

void RunOptions::validate() const {
    if (height < 1 || width < 1) throw std::invalid_argument("run: latent size must be positive");
    guidance.validate();
    schedule.validate();
    if (schedule.inference_steps != guidance.total_steps)
        throw std::invalid_argument("run: schedule and guidance disagree on step count");
    if (snapshot_step < -1 || snapshot_step >= guidance.total_steps)
        throw std::invalid_argument("run: snapshot_step out of range");
    if (latent_snapshot_every < 0)
        throw std::invalid_argument("run: latent_snapshot_every must be nonnegative");
}

namespace {

void validate_branches(const DenoiserParams& base, const std::vector<int>& uncond_tokens,
                       const std::vector<SamplerBranch>& branches, bool adapters_required) {
    auto check_tokens = [&](const std::vector<int>& toks, const char* who) {
        if (toks.empty() || static_cast<int>(toks.size()) > base.dims.max_tokens)
            throw std::invalid_argument(std::string("run: bad prompt length for ") + who);
        for (int t : toks)
            if (t < 0 || t >= base.vocab_size())
                throw std::invalid_argument(std::string("run: token id out of range for ") + who);
    };
    check_tokens(uncond_tokens, "unconditional prompt");
    if (branches.size() < 2)
        throw std::invalid_argument("run: need a global branch plus at least one concept branch");
    if (!branches[0].triggers.empty() || branches[0].adapter != nullptr)
        throw std::invalid_argument("run: global branch must carry no triggers and no adapter");
    check_tokens(branches[0].tokens, "global branch");

    std::set<int> trigger_ids;
    for (std::size_t b = 1; b < branches.size(); ++b) {
        const SamplerBranch& br = branches[b];
        check_tokens(br.tokens, "concept branch");
        if (br.triggers.empty())
            throw std::invalid_argument("run: concept branch without trigger positions");
        for (int pos : br.triggers)
            if (pos < 0 || pos >= static_cast<int>(br.tokens.size()))
                throw std::invalid_argument("run: trigger position out of range");
        if (adapters_required) {
            if (br.adapter == nullptr)
                throw std::invalid_argument("run: concept branch without adapter");
            br.adapter->validate(base);
            for (int pos : br.triggers)
                if (br.tokens[static_cast<std::size_t>(pos)] != br.adapter->trigger_id)
                    throw std::invalid_argument("run: trigger position does not hold the adapter token");
            if (!trigger_ids.insert(br.adapter->trigger_id).second)
                throw std::invalid_argument("run: duplicate trigger token across branches");
        } else {
            if (br.adapter != nullptr)
                throw std::invalid_argument("run: layout mode takes no adapters");
            int id = br.tokens[static_cast<std::size_t>(br.triggers[0])];
            if (!trigger_ids.insert(id).second)
                throw std::invalid_argument("run: duplicate subject token across branches");
        }
    }
}

RunResult run_guided(const DenoiserParams& base, const std::vector<int>& uncond_tokens,
                     const std::vector<SamplerBranch>& branches, const RunOptions& opt,
                     GuidanceObjective obj) {
    opt.validate();
    base.validate();
    validate_branches(base, uncond_tokens, branches, obj == GuidanceObjective::Composition);

    std::size_t n_concept = branches.size() - 1;
    if (opt.refine_masks && n_concept != 2)
        throw std::invalid_argument("run: mask refinement is defined for exactly two concept branches");

    const GuidanceConfig& cfg = opt.guidance;
    std::vector<GuidedBranch> guided;
    guided.reserve(n_concept);
    for (std::size_t b = 1; b < branches.size(); ++b)
        guided.push_back(GuidedBranch{branches[b].tokens, branches[b].triggers, branches[b].adapter});

    std::vector<double> weights;
    weights.reserve(branches.size());
    for (const SamplerBranch& br : branches) weights.push_back(br.weight);

    Rng rng(opt.seed);
    std::vector<std::size_t> shape{static_cast<std::size_t>(opt.height),
                                   static_cast<std::size_t>(opt.width),
                                   static_cast<std::size_t>(base.dims.latent_channels)};
    Tensor z = rng.gaussian_tensor(shape);

    RunResult result;
    result.trace.steps.reserve(static_cast<std::size_t>(cfg.total_steps));
    result.trace.snapshot_step = opt.snapshot_step;

    for (int k = 0; k < cfg.total_steps; ++k) {
        int pos = cfg.total_steps - 1 - k;
        StepRecord rec;
        rec.step = k;
        rec.position = pos;
        rec.t_train = opt.schedule.tau[static_cast<std::size_t>(pos)];

        if (k < cfg.guided_steps) {
            rec.guided = true;
            rec.lambda = lambda_at(k, cfg);
            for (int g = 0; g < cfg.grad_steps_per_t; ++g) {
                LatentGradResult lg = grad_wrt_latent(z, rec.t_train, base, guided, cfg, obj);
                z = update_latent(z, lg.grad, rec.lambda);
                if (!z.all_finite())
                    throw NumericError("run: latent diverged during guidance at " + step_tag(k));
                rec.stage1.push_back(lg.losses);
                rec.grad_norms.push_back(lg.grad_norm);
            }
        }

        ForwardResult uncond = full_forward(z, rec.t_train, uncond_tokens, base, nullptr, nullptr);
        std::vector<ForwardResult> outs;
        outs.reserve(branches.size());
        for (const SamplerBranch& br : branches)
            outs.push_back(full_forward(z, rec.t_train, br.tokens, base, br.adapter, nullptr));

        rec.eps_norms.push_back(l2_norm(uncond.eps));
        for (const ForwardResult& fr : outs) rec.eps_norms.push_back(l2_norm(fr.eps));

        std::vector<std::vector<Map2D>> token_maps;
        token_maps.reserve(n_concept);
        for (std::size_t b = 1; b < branches.size(); ++b) {
            std::vector<Map2D> maps;
            for (int pos_t : branches[b].triggers)
                maps.push_back(extract_token_map(outs[b].attn, pos_t));
            token_maps.push_back(std::move(maps));
        }
        rec.post = map_loss(obj, token_maps, cfg, nullptr);
        rec.post_valid = true;

        if (opt.snapshot_step == k) {
            result.trace.snapshot_token_maps = token_maps;
            result.trace.snapshot_concept_maps.clear();
            for (const std::vector<Map2D>& maps : token_maps)
                result.trace.snapshot_concept_maps.push_back(
                    gaussian_filter(mean_map(maps), cfg.smoothing));
        }

        std::vector<Map2D> masks;
        if (opt.refine_masks) {
            Map2D a1 = gaussian_filter(mean_map(token_maps[0]), cfg.smoothing);
            Map2D a2 = gaussian_filter(mean_map(token_maps[1]), cfg.smoothing);
            MaskProposal prop = propose_masks(a1, a2, cfg.mask_proposal);
            rec.mask_refined = true;
            rec.mask_degenerate = prop.degenerate;
            Map2D ones(opt.height, opt.width);
            std::fill(ones.v.begin(), ones.v.end(), 1.0);
            masks.push_back(std::move(ones));
            masks.push_back(std::move(prop.m1));
            masks.push_back(std::move(prop.m2));
        }

        std::vector<Tensor> eps_branches;
        eps_branches.reserve(outs.size());
        for (ForwardResult& fr : outs) eps_branches.push_back(std::move(fr.eps));

        if (!opt.z_space_merge) {
            Tensor eps_hat = opt.refine_masks
                                 ? masked_merge(uncond.eps, eps_branches, masks, weights)
                                 : semantic_merge(uncond.eps, eps_branches, weights);
            if (pos > 0) {
                z = ddpm_step(z, eps_hat, pos, opt.schedule, rng);
            } else {
                z = predict_x0(z, eps_hat, opt.schedule);
            }
        } else {
            const Tensor* xi_ptr = nullptr;
            Tensor xi;
            if (pos > 0 && !opt.schedule.deterministic) {
                xi = rng.gaussian_tensor(shape);
                xi_ptr = &xi;
            }
            auto advance = [&](const Tensor& eps_hat) {
                if (pos > 0) return ddpm_step_noise(z, eps_hat, pos, opt.schedule, xi_ptr);
                return predict_x0(z, eps_hat, opt.schedule);
            };
            Tensor zu = advance(uncond.eps);
            std::vector<Tensor> zb;
            zb.reserve(eps_branches.size());
            for (const Tensor& e : eps_branches) zb.push_back(advance(e));
            z = opt.refine_masks ? masked_merge(zu, zb, masks, weights)
                                 : semantic_merge(zu, zb, weights);
        }
        if (!z.all_finite()) throw NumericError("run: latent diverged at " + step_tag(k));
        rec.z_norm = l2_norm(z);
        if (opt.latent_snapshot_every > 0 && k % opt.latent_snapshot_every == 0)
            result.trace.latent_snapshots.emplace_back(k, z);
        result.trace.steps.push_back(std::move(rec));
    }

    result.image = std::move(z);
    return result;
}

}  // namespace

RunResult run_mc2(const DenoiserParams& base, const std::vector<int>& uncond_tokens,
                  const std::vector<SamplerBranch>& branches, const RunOptions& opt) {
    return run_guided(base, uncond_tokens, branches, opt, GuidanceObjective::Composition);
}

RunResult run_compgen(const DenoiserParams& base, const std::vector<int>& uncond_tokens,
                      const std::vector<SamplerBranch>& branches, const RunOptions& opt) {
    return run_guided(base, uncond_tokens, branches, opt, GuidanceObjective::Layout);
}

Tensor sample_single(const DenoiserParams& base, const ConceptAdapter* adapter,
                     const std::vector<int>& tokens, const NoiseSchedule& schedule, int height,
                     int width, std::uint64_t seed) {
    schedule.validate();
    base.validate();
    if (adapter != nullptr) adapter->validate(base);
    Rng rng(seed);
    std::vector<std::size_t> shape{static_cast<std::size_t>(height), static_cast<std::size_t>(width),
                                   static_cast<std::size_t>(base.dims.latent_channels)};
    Tensor z = rng.gaussian_tensor(shape);
    for (int k = 0; k < schedule.inference_steps; ++k) {
        int pos = schedule.inference_steps - 1 - k;
        int t = schedule.tau[static_cast<std::size_t>(pos)];
        ForwardResult fr = full_forward(z, t, tokens, base, adapter, nullptr);
        if (pos > 0) {
            z = ddpm_step(z, fr.eps, pos, schedule, rng);
        } else {
            z = predict_x0(z, fr.eps, schedule);
        }
        if (!z.all_finite()) throw NumericError("sample: latent diverged at " + step_tag(k));
    }
    return z;
}

}  // namespace mcg
