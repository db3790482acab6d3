#include "mcg/grounding.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mcg {

void GroundedSample::validate(int vocab_size) const {
    if (x0.rank() != 3) throw std::invalid_argument("sample: latent must have rank 3");
    if (tokens.empty()) throw std::invalid_argument("sample: empty caption");
    if (masks.size() != tokens.size())
        throw std::invalid_argument("sample: need one mask per caption token");
    int h = static_cast<int>(x0.extent(0));
    int w = static_cast<int>(x0.extent(1));
    for (int id : tokens)
        if (id < 0 || id >= vocab_size) throw std::invalid_argument("sample: token id out of range");
    for (const Map2D& m : masks) {
        if (m.h != h || m.w != w) throw std::invalid_argument("sample: mask shape mismatch");
        if (!is_binary(m)) throw std::invalid_argument("sample: masks must be binary");
    }
    if (!x0.all_finite()) throw std::invalid_argument("sample: non-finite latent");
}

void TrainConfig::validate() const {
    if (steps < 0) throw std::invalid_argument("train: steps must be nonnegative");
    if (batch < 1) throw std::invalid_argument("train: batch must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
    if (gamma1 < 0.0 || gamma2 < 0.0)
        throw std::invalid_argument("train: loss weights must be nonnegative");
    if (!(eps_div > 0.0) || !(eps_log > 0.0))
        throw std::invalid_argument("train: epsilons must be positive");
}

namespace {

void check_pair(const std::vector<Map2D>& maps, const std::vector<Map2D>& masks) {
    if (maps.empty() || maps.size() != masks.size())
        throw std::invalid_argument("grounding: need one mask per map");
    for (std::size_t i = 0; i < maps.size(); ++i)
        if (maps[i].h != masks[i].h || maps[i].w != masks[i].w)
            throw std::invalid_argument("grounding: map/mask shape mismatch");
}

}  // namespace

double grounding_l1(const std::vector<Map2D>& maps, const std::vector<Map2D>& masks,
                    double eps_div) {
    check_pair(maps, masks);
    double acc = 0.0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        double inside = 0.0, total = 0.0;
        for (std::size_t p = 0; p < maps[i].v.size(); ++p) {
            inside += masks[i].v[p] * maps[i].v[p];
            total += maps[i].v[p];
        }
        acc += 1.0 - inside / (total + eps_div);
    }
    return acc / static_cast<double>(maps.size());
}

double grounding_l1_backward(const std::vector<Map2D>& maps, const std::vector<Map2D>& masks,
                             double eps_div, double dout, std::vector<Map2D>& d_maps) {
    check_pair(maps, masks);
    if (d_maps.size() != maps.size())
        throw std::invalid_argument("grounding: gradient buffer size mismatch");
    double acc = 0.0;
    double inv_s = 1.0 / static_cast<double>(maps.size());
    for (std::size_t i = 0; i < maps.size(); ++i) {
        double inside = 0.0, total = 0.0;
        for (std::size_t p = 0; p < maps[i].v.size(); ++p) {
            inside += masks[i].v[p] * maps[i].v[p];
            total += maps[i].v[p];
        }
        double den = total + eps_div;
        acc += 1.0 - inside / den;
        // d/dA_p of (1 - inside/den) = -(M_p*den - inside)/den^2
        double coeff = dout * inv_s;
        for (std::size_t p = 0; p < maps[i].v.size(); ++p) {
            double g = -(masks[i].v[p] * den - inside) / (den * den);
            d_maps[i].v[p] += coeff * g;
        }
    }
    return acc * inv_s;
}

double grounding_l2(const std::vector<Map2D>& maps, const std::vector<Map2D>& masks,
                    double eps_log) {
    check_pair(maps, masks);
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        for (std::size_t p = 0; p < maps[i].v.size(); ++p) {
            double a = std::clamp(maps[i].v[p], eps_log, 1.0 - eps_log);
            double m = masks[i].v[p];
            acc += -(m * std::log(a) + (1.0 - m) * std::log(1.0 - a));
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

double grounding_l2_backward(const std::vector<Map2D>& maps, const std::vector<Map2D>& masks,
                             double eps_log, double dout, std::vector<Map2D>& d_maps) {
    check_pair(maps, masks);
    if (d_maps.size() != maps.size())
        throw std::invalid_argument("grounding: gradient buffer size mismatch");
    std::size_t count = 0;
    for (const Map2D& m : maps) count += m.v.size();
    double acc = 0.0;
    double inv = 1.0 / static_cast<double>(count);
    for (std::size_t i = 0; i < maps.size(); ++i) {
        for (std::size_t p = 0; p < maps[i].v.size(); ++p) {
            double raw = maps[i].v[p];
            double a = std::clamp(raw, eps_log, 1.0 - eps_log);
            double m = masks[i].v[p];
            acc += -(m * std::log(a) + (1.0 - m) * std::log(1.0 - a));
            if (raw > eps_log && raw < 1.0 - eps_log)
                d_maps[i].v[p] += dout * inv * (-(m / a) + (1.0 - m) / (1.0 - a));
        }
    }
    return acc * inv;
}

AdamOptimizer::AdamOptimizer(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::step(const std::vector<std::pair<std::string, Tensor*>>& params,
                         const std::map<std::string, Tensor>& grads) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, param] : params) {
        const Tensor& g = grads.at(name);
        if (!g.same_shape(*param))
            throw std::invalid_argument("adam: gradient shape mismatch for " + name);
        auto mit = m_.find(name);
        if (mit == m_.end()) {
            m_.emplace(name, Tensor(param->shape()));
            v_.emplace(name, Tensor(param->shape()));
            mit = m_.find(name);
        }
        Tensor& m = mit->second;
        Tensor& v = v_.at(name);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            (*param)[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

namespace {

struct SampleEval {
    double mse = 0.0, l1 = 0.0, l2 = 0.0, loss = 0.0;
    BackwardResult back;
    bool has_back = false;
};

SampleEval eval_sample(const DenoiserParams& params, const ConceptAdapter* adapter,
                       const GroundedSample& sample, int t, const Tensor& noise,
                       const TrainConfig& cfg, const NoiseSchedule& schedule, bool want_base,
                       bool want_adapter) {
    double abar = schedule.alpha_bar[static_cast<std::size_t>(t)];
    double sa = std::sqrt(abar);
    double sb = std::sqrt(1.0 - abar);
    Tensor zt(sample.x0.shape());
    for (std::size_t i = 0; i < zt.numel(); ++i) zt[i] = sa * sample.x0[i] + sb * noise[i];

    bool want_grads = want_base || want_adapter;
    ForwardCache cache;
    ForwardResult fr = full_forward(zt, t, sample.tokens, params, adapter,
                                    want_grads ? &cache : nullptr);

    SampleEval ev;
    std::size_t n = fr.eps.numel();
    Tensor d_eps(fr.eps.shape());
    for (std::size_t i = 0; i < n; ++i) {
        double diff = fr.eps[i] - noise[i];
        ev.mse += diff * diff;
        d_eps[i] = 2.0 * diff / static_cast<double>(n);
    }
    ev.mse /= static_cast<double>(n);

    std::vector<Map2D> maps;
    maps.reserve(sample.tokens.size());
    for (std::size_t i = 0; i < sample.tokens.size(); ++i)
        maps.push_back(extract_token_map(fr.attn, static_cast<int>(i)));

    bool ground_grads = want_grads && (cfg.gamma1 > 0.0 || cfg.gamma2 > 0.0);
    AttentionStack d_attn;
    if (ground_grads) {
        std::vector<Map2D> d_maps;
        d_maps.reserve(maps.size());
        for (const Map2D& m : maps) d_maps.emplace_back(m.h, m.w);
        ev.l1 = grounding_l1_backward(maps, sample.masks, cfg.eps_div, cfg.gamma1, d_maps);
        ev.l2 = grounding_l2_backward(maps, sample.masks, cfg.eps_log, cfg.gamma2, d_maps);
        d_attn = fr.attn.zeros_like();
        for (std::size_t i = 0; i < d_maps.size(); ++i)
            extract_token_map_adjoint(d_maps[i], static_cast<int>(i), d_attn);
    } else {
        ev.l1 = grounding_l1(maps, sample.masks, cfg.eps_div);
        ev.l2 = grounding_l2(maps, sample.masks, cfg.eps_log);
    }
    ev.loss = ev.mse + cfg.gamma1 * ev.l1 + cfg.gamma2 * ev.l2;

    if (want_grads) {
        BackwardRequest req;
        req.d_eps = &d_eps;
        req.d_attn = ground_grads ? &d_attn : nullptr;
        req.want_z = false;
        req.want_params = want_base;
        ev.back = denoise_backward(params, cache, req);
        ev.has_back = true;
    }
    return ev;
}

void accumulate_grads(std::map<std::string, Tensor>& acc, const std::map<std::string, Tensor>& g) {
    for (const auto& [name, tensor] : g) {
        auto it = acc.find(name);
        if (it == acc.end()) {
            acc.emplace(name, tensor);
        } else {
            accumulate(it->second, tensor);
        }
    }
}

}  // namespace

TrainResult train_concept(const DenoiserParams& base, const std::vector<GroundedSample>& dataset,
                          AdapterKind kind, const std::string& trigger_word, int trigger_id,
                          const TrainConfig& cfg, const NoiseSchedule& schedule, std::uint64_t seed,
                          double adapter_scale, int adapter_rank) {
    cfg.validate();
    schedule.validate();
    base.validate();
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    for (const GroundedSample& s : dataset) s.validate(base.vocab_size());
    if (trigger_id < 0 || trigger_id >= base.vocab_size())
        throw std::invalid_argument("train: trigger token outside vocabulary");

    TrainResult result;
    result.adapter =
        ConceptAdapter::zero(kind, base, trigger_word, trigger_id, adapter_scale, adapter_rank);
    if (cfg.steps == 0) return result;

    std::vector<std::pair<std::string, Tensor*>> ptrs;
    for (auto& [name, tensor] : result.adapter.payload) ptrs.emplace_back(name, &tensor);

    AdamOptimizer adam(cfg.lr);
    Rng rng(seed);
    double inv_b = 1.0 / static_cast<double>(cfg.batch);

    for (int step = 0; step < cfg.steps; ++step) {
        std::map<std::string, Tensor> grads;
        double loss = 0.0, mse = 0.0, l1 = 0.0, l2 = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const GroundedSample& sample = dataset[rng.below(dataset.size())];
            int t = static_cast<int>(rng.below(static_cast<std::size_t>(schedule.train_steps)));
            Tensor noise = rng.gaussian_tensor(sample.x0.shape());
            SampleEval ev =
                eval_sample(base, &result.adapter, sample, t, noise, cfg, schedule, false, true);
            loss += ev.loss;
            mse += ev.mse;
            l1 += ev.l1;
            l2 += ev.l2;
            accumulate_grads(grads, ev.back.d_adapter);
        }
        loss *= inv_b;
        if (!std::isfinite(loss))
            throw NumericError("train: loss diverged at step " + std::to_string(step));
        for (auto& [name, g] : grads) scale_inplace(g, inv_b);
        adam.step(ptrs, grads);
        result.stats.loss_curve.push_back(loss);
        if (step == cfg.steps - 1) {
            result.stats.final_loss = loss;
            result.stats.final_mse = mse * inv_b;
            result.stats.final_l1 = l1 * inv_b;
            result.stats.final_l2 = l2 * inv_b;
        }
    }
    result.adapter.validate(base);
    return result;
}

TrainStats train_base(DenoiserParams& params, const std::vector<GroundedSample>& dataset,
                      const TrainConfig& cfg, const NoiseSchedule& schedule, std::uint64_t seed) {
    cfg.validate();
    schedule.validate();
    params.validate();
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    for (const GroundedSample& s : dataset) s.validate(params.vocab_size());

    TrainStats stats;
    std::vector<std::pair<std::string, Tensor*>> ptrs;
    params.for_each_named([&](const std::string& name, Tensor& t) { ptrs.emplace_back(name, &t); });

    AdamOptimizer adam(cfg.lr);
    Rng rng(seed);
    double inv_b = 1.0 / static_cast<double>(cfg.batch);

    for (int step = 0; step < cfg.steps; ++step) {
        std::map<std::string, Tensor> grads;
        double loss = 0.0, mse = 0.0, l1 = 0.0, l2 = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const GroundedSample& sample = dataset[rng.below(dataset.size())];
            int t = static_cast<int>(rng.below(static_cast<std::size_t>(schedule.train_steps)));
            Tensor noise = rng.gaussian_tensor(sample.x0.shape());
            SampleEval ev = eval_sample(params, nullptr, sample, t, noise, cfg, schedule, true, false);
            loss += ev.loss;
            mse += ev.mse;
            l1 += ev.l1;
            l2 += ev.l2;
            std::map<std::string, Tensor> named;
            ev.back.dparams.for_each_named(
                [&](const std::string& name, Tensor& t2) { named.emplace(name, std::move(t2)); });
            accumulate_grads(grads, named);
        }
        loss *= inv_b;
        if (!std::isfinite(loss))
            throw NumericError("train: loss diverged at step " + std::to_string(step));
        for (auto& [name, g] : grads) scale_inplace(g, inv_b);
        adam.step(ptrs, grads);
        stats.loss_curve.push_back(loss);
        if (step == cfg.steps - 1) {
            stats.final_loss = loss;
            stats.final_mse = mse * inv_b;
            stats.final_l1 = l1 * inv_b;
            stats.final_l2 = l2 * inv_b;
        }
    }
    return stats;
}

double eval_mse(const DenoiserParams& base, const ConceptAdapter* adapter,
                const std::vector<GroundedSample>& dataset, const NoiseSchedule& schedule,
                int draws, std::uint64_t seed) {
    if (dataset.empty() || draws < 1) throw std::invalid_argument("eval: nothing to evaluate");
    Rng rng(seed);
    double acc = 0.0;
    for (int d = 0; d < draws; ++d) {
        const GroundedSample& sample = dataset[rng.below(dataset.size())];
        int t = static_cast<int>(rng.below(static_cast<std::size_t>(schedule.train_steps)));
        Tensor noise = rng.gaussian_tensor(sample.x0.shape());
        double abar = schedule.alpha_bar[static_cast<std::size_t>(t)];
        double sa = std::sqrt(abar);
        double sb = std::sqrt(1.0 - abar);
        Tensor zt(sample.x0.shape());
        for (std::size_t i = 0; i < zt.numel(); ++i) zt[i] = sa * sample.x0[i] + sb * noise[i];
        ForwardResult fr = full_forward(zt, t, sample.tokens, base, adapter, nullptr);
        double mse = 0.0;
        for (std::size_t i = 0; i < fr.eps.numel(); ++i) {
            double diff = fr.eps[i] - noise[i];
            mse += diff * diff;
        }
        acc += mse / static_cast<double>(fr.eps.numel());
    }
    return acc / static_cast<double>(draws);
}

double trigger_mass_ratio(const DenoiserParams& base, const ConceptAdapter* adapter,
                          const std::vector<GroundedSample>& dataset,
                          const NoiseSchedule& schedule, int draws, std::uint64_t seed,
                          double eps_div) {
    if (dataset.empty() || draws < 1) throw std::invalid_argument("eval: nothing to evaluate");
    Rng rng(seed);
    double acc = 0.0;
    std::size_t count = 0;
    for (int d = 0; d < draws; ++d) {
        const GroundedSample& sample = dataset[rng.below(dataset.size())];
        int t = static_cast<int>(rng.below(static_cast<std::size_t>(schedule.train_steps)));
        Tensor noise = rng.gaussian_tensor(sample.x0.shape());
        double abar = schedule.alpha_bar[static_cast<std::size_t>(t)];
        double sa = std::sqrt(abar);
        double sb = std::sqrt(1.0 - abar);
        Tensor zt(sample.x0.shape());
        for (std::size_t i = 0; i < zt.numel(); ++i) zt[i] = sa * sample.x0[i] + sb * noise[i];
        ForwardResult fr = full_forward(zt, t, sample.tokens, base, adapter, nullptr);
        for (std::size_t i = 0; i < sample.tokens.size(); ++i) {
            bool grounded = false;
            for (double v : sample.masks[i].v)
                if (v == 0.0) {
                    grounded = true;
                    break;
                }
            if (!grounded) continue;
            Map2D a = extract_token_map(fr.attn, static_cast<int>(i));
            double inside = 0.0, total = 0.0;
            for (std::size_t p = 0; p < a.v.size(); ++p) {
                inside += sample.masks[i].v[p] * a.v[p];
                total += a.v[p];
            }
            acc += inside / (total + eps_div);
            ++count;
        }
    }
    if (count == 0) throw std::invalid_argument("eval: no grounded tokens in dataset");
    return acc / static_cast<double>(count);
}

}  // namespace mcg
