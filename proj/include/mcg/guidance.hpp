#pragma once

#include <vector>

#include "mcg/denoiser.hpp"
#include "mcg/masks.hpp"
#include "mcg/numerics.hpp"

namespace mcg {

struct GuidanceConfig {
    double alpha = 0.8;   // intra weight in the composition objective
    double alpha1 = 0.5;  // intra weight in the layout objective
    double alpha2 = 0.4;  // inter weight in the layout objective
    double lambda_start = 20.0;
    double lambda_end = 10.0;
    int guided_steps = 25;  // K_g
    int total_steps = 30;   // T_s
    int grad_steps_per_t = 1;
    double eps_div = 1e-8;
    double eps_log = 1e-6;
    GaussianSpec smoothing{3, 0.5};
    MaskProposalConfig mask_proposal;
    bool per_pixel_overlap = false;  // alternate per-pixel mean reduction
    bool use_intra = true;           // ablation toggles
    bool use_inter = true;
    bool smooth_focus_maps = true;   // smooth subject maps before the focus term

    void validate() const;
};

// Soft IoU-style overlap: sum of pixelwise minima over the summed mass.
// Symmetric, in [0, 1/2].
double soft_overlap(const Map2D& a, const Map2D& b, double eps_div);
// Alternate reduction: mean over pixels of min/(a+b+eps).
double soft_overlap_per_pixel(const Map2D& a, const Map2D& b, double eps_div);

// Mean pairwise (1 - overlap) among each sub-prompt's trigger token maps.
// Sub-prompts with a single trigger token are excluded from the average.
double intra_loss(const std::vector<std::vector<Map2D>>& trigger_map_sets,
                  const GuidanceConfig& cfg);

// Mean pairwise overlap among aggregated concept maps. Fewer than two maps
// yields 0 and sets *degenerate.
double inter_loss(const std::vector<Map2D>& concept_maps, const GuidanceConfig& cfg,
                  bool* degenerate = nullptr);

inline double mcg_loss(double inter, double intra, double alpha) { return inter + alpha * intra; }

// Weakest-subject focus loss: max over subjects of (1 - spatial max of the
// smoothed subject map).
double ae_loss(const std::vector<Map2D>& subject_maps, const GaussianSpec& g,
               bool smooth = true);

inline double compgen_loss(double ae, double intra, double inter, double alpha1, double alpha2) {
    return ae + alpha1 * intra + alpha2 * inter;
}

// Linearly decaying guidance step size over [0, guided_steps).
double lambda_at(int k, const GuidanceConfig& cfg);

// One gradient step on the latent. lambda = 0 returns the input unchanged.
Tensor update_latent(const Tensor& z, const Tensor& grad, double lambda);

struct LossBreakdown {
    double total = 0.0;
    double inter = 0.0;
    double intra = 0.0;
    double ae = 0.0;
    bool inter_degenerate = false;
};

enum class GuidanceObjective {
    Composition,  // inter + alpha * intra over trigger maps
    Layout        // focus + alpha1 * intra + alpha2 * inter over subject maps
};

// Full objective over per-branch token maps, with optional gradients
// accumulated into d_token_maps (ragged shape mirrors token_maps).
LossBreakdown map_loss(GuidanceObjective obj,
                       const std::vector<std::vector<Map2D>>& token_maps,
                       const GuidanceConfig& cfg,
                       std::vector<std::vector<Map2D>>* d_token_maps);

// One conditional branch participating in guidance.
struct GuidedBranch {
    std::vector<int> tokens;
    std::vector<int> triggers;  // positions of this branch's trigger/subject tokens
    const ConceptAdapter* adapter = nullptr;
};

struct LatentGradResult {
    Tensor grad;
    LossBreakdown losses;
    double grad_norm = 0.0;
};

// d(objective)/dz through every branch's forward pass. Text features and
// parameters are constants here; only the latent varies.
LatentGradResult grad_wrt_latent(const Tensor& z, int t, const DenoiserParams& base,
                                 const std::vector<GuidedBranch>& branches,
                                 const GuidanceConfig& cfg, GuidanceObjective obj);

// Same objective evaluated through the closed-form attention oracle.
struct OracleBranch {
    Tensor anchors;             // (token count, latent channels)
    std::vector<int> triggers;  // anchor indices acting as trigger tokens
};

LatentGradResult oracle_grad_wrt_latent(const Tensor& z, const std::vector<OracleBranch>& branches,
                                        const GuidanceConfig& cfg, GuidanceObjective obj);

double oracle_objective(const Tensor& z, const std::vector<OracleBranch>& branches,
                        const GuidanceConfig& cfg, GuidanceObjective obj);

}  // namespace mcg
