#pragma once

#include <cstdint>
#include <vector>

#include "mcg/guidance.hpp"

namespace mcg {

// Linear-beta training grid subsampled to a fixed number of inference
// positions. Position 0 is the cleanest step; sampling walks positions
// (inference_steps-1) down to 0.
struct NoiseSchedule {
    int train_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    int inference_steps = 30;
    bool deterministic = true;  // sigma = 0 update when true

    std::vector<double> alpha_bar;  // per train step
    std::vector<int> tau;           // inference position -> train step

    static NoiseSchedule make(int train_steps, double beta_start, double beta_end,
                              int inference_steps, bool deterministic = true);
    double abar(int position) const { return alpha_bar[tau[position]]; }
    void validate() const;
};

// One reverse-diffusion update from position `pos` to `pos - 1`.
Tensor ddpm_step(const Tensor& z, const Tensor& eps_hat, int pos, const NoiseSchedule& s, Rng& rng);

// Final clean-image prediction at position 0.
Tensor predict_x0(const Tensor& z, const Tensor& eps_hat, const NoiseSchedule& s);

// Weighted recombination of branch outputs around the unconditional output:
// u + sum_i w_i (e_i - u), evaluated in expanded form so zero weights drop
// out exactly.
Tensor semantic_merge(const Tensor& eps_u, const std::vector<Tensor>& eps, const std::vector<double>& w);

// Same recombination with each branch's correction restricted to its mask.
// All-ones masks reproduce semantic_merge bit for bit.
Tensor masked_merge(const Tensor& eps_u, const std::vector<Tensor>& eps, const std::vector<Map2D>& masks,
                    const std::vector<double>& w);

// One conditional sampling branch. The first branch describes the whole scene
// and never carries an adapter; later branches carry one adapter each (or
// plain subject tokens in layout mode).
struct SamplerBranch {
    std::vector<int> tokens;
    std::vector<int> triggers;  // positions of trigger/subject tokens; empty for the global branch
    const ConceptAdapter* adapter = nullptr;
    double weight = 1.0;
};

struct StepRecord {
    int step = 0;      // loop index, 0-based from the noisiest step
    int position = 0;  // schedule position
    int t_train = 0;
    bool guided = false;
    double lambda = 0.0;
    std::vector<LossBreakdown> stage1;  // one entry per gradient sub-step
    std::vector<double> grad_norms;
    LossBreakdown post;  // objective evaluated on the post-update forwards
    bool post_valid = false;
    std::vector<double> eps_norms;  // unconditional first, then branches
    double z_norm = 0.0;
    bool mask_refined = false;
    bool mask_degenerate = false;
};

struct RunTrace {
    std::vector<StepRecord> steps;
    int snapshot_step = -1;
    std::vector<std::vector<Map2D>> snapshot_token_maps;  // per concept branch
    std::vector<Map2D> snapshot_concept_maps;
    std::vector<std::pair<int, Tensor>> latent_snapshots;  // (step, post-step latent)
};

struct RunOptions {
    int height = 16;
    int width = 16;
    GuidanceConfig guidance;
    NoiseSchedule schedule;
    bool refine_masks = false;   // masked merging, two concept branches only
    bool z_space_merge = false;  // merge stepped latents instead of noise estimates
    int snapshot_step = -1;
    int latent_snapshot_every = 0;  // 0 disables latent snapshots
    std::uint64_t seed = 0;

    void validate() const;
};

struct RunResult {
    Tensor image;  // predicted clean latent (h, w, l)
    RunTrace trace;
};

// Multi-concept sampling: per guided step, a latent gradient update on the
// disentanglement objective, then branch evaluation and merging.
RunResult run_mc2(const DenoiserParams& base, const std::vector<int>& uncond_tokens,
                  const std::vector<SamplerBranch>& branches, const RunOptions& opt);

// Same loop driven by the layout objective over subject tokens, no adapters.
RunResult run_compgen(const DenoiserParams& base, const std::vector<int>& uncond_tokens,
                      const std::vector<SamplerBranch>& branches, const RunOptions& opt);

// Plain single-prompt sampling used as the degeneration reference.
Tensor sample_single(const DenoiserParams& base, const ConceptAdapter* adapter,
                     const std::vector<int>& tokens, const NoiseSchedule& schedule, int height,
                     int width, std::uint64_t seed);

}  // namespace mcg
