#include "mcg/guidance.hpp"

#include <cmath>

namespace mcg {

void GuidanceConfig::validate() const {
    if (alpha < 0.0 || alpha1 < 0.0 || alpha2 < 0.0)
        throw std::invalid_argument("GuidanceConfig: loss weights must be nonnegative");
    if (!(lambda_start >= lambda_end && lambda_end > 0.0))
        throw std::invalid_argument("GuidanceConfig: lambda schedule must satisfy start >= end > 0");
    if (guided_steps < 0 || guided_steps > total_steps)
        throw std::invalid_argument("GuidanceConfig: guided_steps must be in [0, total_steps]");
    if (total_steps < 2) throw std::invalid_argument("GuidanceConfig: total_steps must be >= 2");
    if (grad_steps_per_t < 1)
        throw std::invalid_argument("GuidanceConfig: grad_steps_per_t must be >= 1");
    if (!(eps_div > 0.0) || !(eps_log > 0.0))
        throw std::invalid_argument("GuidanceConfig: eps guards must be positive");
    smoothing.validate();
    mask_proposal.validate();
}

namespace {

void require_pair(const Map2D& a, const Map2D& b, const char* who) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(who) + ": shape mismatch");
}

inline double min_indicator(double a, double b) { return a < b ? 1.0 : (a == b ? 0.5 : 0.0); }

}  // namespace

double soft_overlap(const Map2D& a, const Map2D& b, double eps_div) {
    require_pair(a, b, "soft_overlap");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        num += std::min(a.v[i], b.v[i]);
        den += a.v[i] + b.v[i];
    }
    return num / (den + eps_div);
}

double soft_overlap_per_pixel(const Map2D& a, const Map2D& b, double eps_div) {
    require_pair(a, b, "soft_overlap_per_pixel");
    double s = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i)
        s += std::min(a.v[i], b.v[i]) / (a.v[i] + b.v[i] + eps_div);
    return s / static_cast<double>(a.v.size());
}

namespace {

double overlap_value(const Map2D& a, const Map2D& b, const GuidanceConfig& cfg) {
    return cfg.per_pixel_overlap ? soft_overlap_per_pixel(a, b, cfg.eps_div)
                                 : soft_overlap(a, b, cfg.eps_div);
}

// Accumulates dout * d(overlap)/d{a,b}. Pixel ties in the min split evenly.
void overlap_backward(const Map2D& a, const Map2D& b, const GuidanceConfig& cfg, double dout,
                      Map2D& da, Map2D& db) {
    if (cfg.per_pixel_overlap) {
        double inv_n = 1.0 / static_cast<double>(a.v.size());
        for (std::size_t i = 0; i < a.v.size(); ++i) {
            double den = a.v[i] + b.v[i] + cfg.eps_div;
            double mn = std::min(a.v[i], b.v[i]);
            double ia = min_indicator(a.v[i], b.v[i]);
            da.v[i] += dout * inv_n * (ia * den - mn) / (den * den);
            db.v[i] += dout * inv_n * ((1.0 - ia) * den - mn) / (den * den);
        }
        return;
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        num += std::min(a.v[i], b.v[i]);
        den += a.v[i] + b.v[i];
    }
    den += cfg.eps_div;
    double val = num / den;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        double ia = min_indicator(a.v[i], b.v[i]);
        da.v[i] += dout * (ia - val) / den;
        db.v[i] += dout * ((1.0 - ia) - val) / den;
    }
}

struct IntraResult {
    double value = 0.0;
    int included = 0;
};

IntraResult intra_forward(const std::vector<std::vector<Map2D>>& sets, const GuidanceConfig& cfg,
                          std::vector<std::vector<Map2D>>* grads, double dout) {
    IntraResult res;
    for (const auto& set : sets)
        if (set.empty()) throw std::invalid_argument("intra_loss: empty trigger set");
    for (const auto& set : sets)
        if (set.size() >= 2) ++res.included;
    if (res.included == 0) return res;

    // Two passes when gradients are requested: the averaged coefficient is
    // known only after counting included sets, which is done above.
    double acc = 0.0;
    for (std::size_t k = 0; k < sets.size(); ++k) {
        const auto& set = sets[k];
        std::size_t m = set.size();
        if (m < 2) continue;
        double coeff = 2.0 / (static_cast<double>(m) * (m - 1));
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = i + 1; j < m; ++j) {
                acc += coeff * (1.0 - overlap_value(set[i], set[j], cfg));
                if (grads) {
                    double g = -dout * coeff / res.included;
                    overlap_backward(set[i], set[j], cfg, g, (*grads)[k][i], (*grads)[k][j]);
                }
            }
    }
    res.value = acc / res.included;
    return res;
}

double inter_forward(const std::vector<Map2D>& maps, const GuidanceConfig& cfg, bool* degenerate,
                     std::vector<Map2D>* grads, double dout) {
    std::size_t n = maps.size();
    if (n < 2) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    if (degenerate) *degenerate = false;
    for (std::size_t i = 1; i < n; ++i) require_pair(maps[0], maps[i], "inter_loss");
    double coeff = 2.0 / (static_cast<double>(n) * (n - 1));
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            acc += coeff * overlap_value(maps[i], maps[j], cfg);
            if (grads) overlap_backward(maps[i], maps[j], cfg, dout * coeff, (*grads)[i], (*grads)[j]);
        }
    return acc;
}

struct AeResult {
    double value = 0.0;
    std::size_t arg_subject = 0;
    std::size_t arg_pixel = 0;
};

AeResult ae_forward(const std::vector<Map2D>& maps) {
    AeResult res;
    res.value = -1.0;
    for (std::size_t k = 0; k < maps.size(); ++k) {
        double best = maps[k].v[0];
        std::size_t arg = 0;
        for (std::size_t i = 1; i < maps[k].v.size(); ++i)
            if (maps[k].v[i] > best) {
                best = maps[k].v[i];
                arg = i;
            }
        double term = 1.0 - best;
        if (term > res.value) {
            res.value = term;
            res.arg_subject = k;
            res.arg_pixel = arg;
        }
    }
    return res;
}

}  // namespace

double intra_loss(const std::vector<std::vector<Map2D>>& trigger_map_sets,
                  const GuidanceConfig& cfg) {
    if (trigger_map_sets.empty()) throw std::invalid_argument("intra_loss: no sub-prompts");
    return intra_forward(trigger_map_sets, cfg, nullptr, 0.0).value;
}

double inter_loss(const std::vector<Map2D>& concept_maps, const GuidanceConfig& cfg,
                  bool* degenerate) {
    return inter_forward(concept_maps, cfg, degenerate, nullptr, 0.0);
}

double ae_loss(const std::vector<Map2D>& subject_maps, const GaussianSpec& g, bool smooth) {
    if (subject_maps.empty()) throw std::invalid_argument("ae_loss: no subject maps");
    if (!smooth) return ae_forward(subject_maps).value;
    std::vector<Map2D> smoothed;
    smoothed.reserve(subject_maps.size());
    for (const Map2D& m : subject_maps) smoothed.push_back(gaussian_filter(m, g));
    return ae_forward(smoothed).value;
}

double lambda_at(int k, const GuidanceConfig& cfg) {
    if (k < 0 || k >= cfg.guided_steps) throw std::invalid_argument("lambda_at: step outside guided range");
    if (cfg.guided_steps == 1) return cfg.lambda_start;
    return cfg.lambda_start +
           (cfg.lambda_end - cfg.lambda_start) * static_cast<double>(k) / (cfg.guided_steps - 1);
}

Tensor update_latent(const Tensor& z, const Tensor& grad, double lambda) {
    if (!z.same_shape(grad)) throw std::invalid_argument("update_latent: shape mismatch");
    if (!grad.all_finite()) throw NumericError("update_latent: non-finite gradient");
    if (lambda == 0.0) return z;
    Tensor out = z;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= lambda * grad[i];
    return out;
}

LossBreakdown map_loss(GuidanceObjective obj, const std::vector<std::vector<Map2D>>& token_maps,
                       const GuidanceConfig& cfg, std::vector<std::vector<Map2D>>* d_token_maps) {
    if (token_maps.empty()) throw std::invalid_argument("map_loss: no branches");
    for (const auto& set : token_maps)
        if (set.empty()) throw std::invalid_argument("map_loss: empty trigger set");
    if (d_token_maps) {
        d_token_maps->clear();
        for (const auto& set : token_maps) {
            std::vector<Map2D> zeros;
            zeros.reserve(set.size());
            for (const Map2D& m : set) zeros.emplace_back(m.h, m.w);
            d_token_maps->push_back(std::move(zeros));
        }
    }

    LossBreakdown out;
    std::size_t n = token_maps.size();

    // Per-concept aggregated maps.
    std::vector<Map2D> means, smoothed;
    means.reserve(n);
    smoothed.reserve(n);
    for (const auto& set : token_maps) {
        means.push_back(mean_map(set));
        smoothed.push_back(gaussian_filter(means.back(), cfg.smoothing));
    }

    double w_intra = obj == GuidanceObjective::Composition ? cfg.alpha : cfg.alpha1;
    double w_inter = obj == GuidanceObjective::Composition ? 1.0 : cfg.alpha2;
    if (!cfg.use_intra) w_intra = 0.0;
    if (!cfg.use_inter) w_inter = 0.0;

    std::vector<Map2D> d_smoothed;
    if (d_token_maps)
        for (const Map2D& m : smoothed) d_smoothed.emplace_back(m.h, m.w);

    out.intra = intra_forward(token_maps, cfg,
                              (d_token_maps && w_intra != 0.0) ? d_token_maps : nullptr, w_intra)
                    .value;
    out.inter = inter_forward(smoothed, cfg, &out.inter_degenerate,
                              (d_token_maps && w_inter != 0.0) ? &d_smoothed : nullptr, w_inter);

    if (obj == GuidanceObjective::Layout) {
        const std::vector<Map2D>& focus_maps = cfg.smooth_focus_maps ? smoothed : means;
        AeResult ae = ae_forward(focus_maps);
        out.ae = ae.value;
        if (d_token_maps) {
            if (cfg.smooth_focus_maps) {
                d_smoothed[ae.arg_subject].v[ae.arg_pixel] += -1.0;
            } else {
                // Route straight into the mean map of the weakest subject.
                std::size_t m = token_maps[ae.arg_subject].size();
                for (std::size_t i = 0; i < m; ++i)
                    (*d_token_maps)[ae.arg_subject][i].v[ae.arg_pixel] += -1.0 / m;
            }
        }
        out.total = compgen_loss(out.ae, cfg.use_intra ? out.intra : 0.0,
                                 cfg.use_inter ? out.inter : 0.0, cfg.alpha1, cfg.alpha2);
    } else {
        out.total = mcg_loss(cfg.use_inter ? out.inter : 0.0, cfg.use_intra ? out.intra : 0.0,
                             cfg.alpha);
    }

    if (d_token_maps) {
        // Push smoothed-map gradients back to the token maps.
        for (std::size_t k = 0; k < n; ++k) {
            bool any = false;
            for (double x : d_smoothed[k].v)
                if (x != 0.0) any = true;
            if (!any) continue;
            Map2D d_mean(d_smoothed[k].h, d_smoothed[k].w);
            gaussian_filter_adjoint(d_smoothed[k], cfg.smoothing, d_mean);
            double inv = 1.0 / token_maps[k].size();
            for (std::size_t i = 0; i < token_maps[k].size(); ++i)
                for (std::size_t px = 0; px < d_mean.v.size(); ++px)
                    (*d_token_maps)[k][i].v[px] += inv * d_mean.v[px];
        }
    }
    return out;
}

LatentGradResult grad_wrt_latent(const Tensor& z, int t, const DenoiserParams& base,
                                 const std::vector<GuidedBranch>& branches,
                                 const GuidanceConfig& cfg, GuidanceObjective obj) {
    if (branches.empty()) throw std::invalid_argument("grad_wrt_latent: no branches");
    std::vector<ForwardCache> caches(branches.size());
    std::vector<std::vector<Map2D>> token_maps(branches.size());
    std::vector<ForwardResult> results(branches.size());

    for (std::size_t b = 0; b < branches.size(); ++b) {
        if (branches[b].triggers.empty())
            throw std::invalid_argument("grad_wrt_latent: branch without trigger tokens");
        results[b] = full_forward(z, t, branches[b].tokens, base, branches[b].adapter, &caches[b]);
        for (int pos : branches[b].triggers) {
            if (pos < 0 || pos >= static_cast<int>(branches[b].tokens.size()))
                throw std::invalid_argument("grad_wrt_latent: trigger position out of range");
            token_maps[b].push_back(extract_token_map(results[b].attn, pos));
        }
    }

    LatentGradResult out;
    std::vector<std::vector<Map2D>> d_maps;
    out.losses = map_loss(obj, token_maps, cfg, &d_maps);

    out.grad = Tensor::zeros_like(z);
    for (std::size_t b = 0; b < branches.size(); ++b) {
        AttentionStack d_attn = results[b].attn.zeros_like();
        bool any = false;
        for (std::size_t i = 0; i < d_maps[b].size(); ++i) {
            for (double x : d_maps[b][i].v)
                if (x != 0.0) {
                    any = true;
                    break;
                }
            extract_token_map_adjoint(d_maps[b][i], branches[b].triggers[i], d_attn);
        }
        if (!any) continue;
        BackwardRequest req;
        req.d_attn = &d_attn;
        req.want_z = true;
        req.want_params = false;
        BackwardResult back = denoise_backward(base, caches[b], req);
        accumulate(out.grad, back.dz);
    }
    out.grad_norm = l2_norm(out.grad);
    return out;
}

namespace {

std::vector<std::vector<Map2D>> oracle_token_maps(const Tensor& z,
                                                  const std::vector<OracleBranch>& branches,
                                                  std::vector<std::vector<Map2D>>* full_maps) {
    std::vector<std::vector<Map2D>> token_maps(branches.size());
    for (std::size_t b = 0; b < branches.size(); ++b) {
        std::vector<Map2D> maps = oracle_attention(z, branches[b].anchors);
        for (int idx : branches[b].triggers) {
            if (idx < 0 || idx >= static_cast<int>(maps.size()))
                throw std::invalid_argument("oracle_grad_wrt_latent: trigger index out of range");
            token_maps[b].push_back(maps[idx]);
        }
        if (full_maps) (*full_maps)[b] = std::move(maps);
    }
    return token_maps;
}

}  // namespace

LatentGradResult oracle_grad_wrt_latent(const Tensor& z, const std::vector<OracleBranch>& branches,
                                        const GuidanceConfig& cfg, GuidanceObjective obj) {
    if (branches.empty()) throw std::invalid_argument("oracle_grad_wrt_latent: no branches");
    std::vector<std::vector<Map2D>> full_maps(branches.size());
    std::vector<std::vector<Map2D>> token_maps = oracle_token_maps(z, branches, &full_maps);

    LatentGradResult out;
    std::vector<std::vector<Map2D>> d_maps;
    out.losses = map_loss(obj, token_maps, cfg, &d_maps);

    out.grad = Tensor::zeros_like(z);
    for (std::size_t b = 0; b < branches.size(); ++b) {
        std::vector<Map2D> d_full(full_maps[b].size(), Map2D(z.extent(0), z.extent(1)));
        for (std::size_t i = 0; i < d_maps[b].size(); ++i) {
            Map2D& dst = d_full[branches[b].triggers[i]];
            for (std::size_t px = 0; px < dst.v.size(); ++px) dst.v[px] += d_maps[b][i].v[px];
        }
        oracle_attention_backward(z, branches[b].anchors, full_maps[b], d_full, out.grad);
    }
    out.grad_norm = l2_norm(out.grad);
    return out;
}

double oracle_objective(const Tensor& z, const std::vector<OracleBranch>& branches,
                        const GuidanceConfig& cfg, GuidanceObjective obj) {
    std::vector<std::vector<Map2D>> token_maps = oracle_token_maps(z, branches, nullptr);
    return map_loss(obj, token_maps, cfg, nullptr).total;
}

}  // namespace mcg
