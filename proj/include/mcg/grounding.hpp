#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mcg/sampler.hpp"

namespace mcg {

// One supervised training example: a clean latent, its caption, and one
// binary region mask per caption token. Tokens without a region of their own
// carry the all-ones mask.
struct GroundedSample {
    Tensor x0;               // (h, w, l)
    std::vector<int> tokens;
    std::vector<Map2D> masks;  // one per token

    void validate(int vocab_size) const;
};

struct TrainConfig {
    int steps = 1000;
    int batch = 2;
    double lr = 1e-4;
    double gamma1 = 0.1;   // weight of the in-mask mass loss
    double gamma2 = 0.01;  // weight of the per-pixel cross-entropy loss
    double eps_div = 1e-8;
    double eps_log = 1e-6;

    void validate() const;
};

// Mean over tokens of (1 - in-mask attention mass fraction).
double grounding_l1(const std::vector<Map2D>& maps, const std::vector<Map2D>& masks,
                    double eps_div);
// Per-pixel binary cross-entropy between masks and attention values, averaged
// over tokens and pixels. Values are clamped away from {0,1} before the logs.
double grounding_l2(const std::vector<Map2D>& maps, const std::vector<Map2D>& masks,
                    double eps_log);

// Gradient accumulation variants; d_maps must be zero-initialized to the map
// shapes (or hold a prior accumulation).
double grounding_l1_backward(const std::vector<Map2D>& maps, const std::vector<Map2D>& masks,
                             double eps_div, double dout, std::vector<Map2D>& d_maps);
double grounding_l2_backward(const std::vector<Map2D>& maps, const std::vector<Map2D>& masks,
                             double eps_log, double dout, std::vector<Map2D>& d_maps);

// Adam over a named tensor set. State is keyed by name and lazily created.
class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8);
    void step(const std::vector<std::pair<std::string, Tensor*>>& params,
              const std::map<std::string, Tensor>& grads);

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

struct TrainStats {
    std::vector<double> loss_curve;  // combined loss per optimizer step
    double final_loss = 0.0;
    double final_mse = 0.0;
    double final_l1 = 0.0;
    double final_l2 = 0.0;
};

struct TrainResult {
    ConceptAdapter adapter;
    TrainStats stats;
};

// Fits an adapter for one concept against a frozen base model: noise-prediction
// MSE plus the two grounding terms, Adam over the adapter payload only.
TrainResult train_concept(const DenoiserParams& base, const std::vector<GroundedSample>& dataset,
                          AdapterKind kind, const std::string& trigger_word, int trigger_id,
                          const TrainConfig& cfg, const NoiseSchedule& schedule, std::uint64_t seed,
                          double adapter_scale = 0.7, int adapter_rank = 2);

// Same objective applied to every base parameter; used to pretrain the toy
// world's shared model.
TrainStats train_base(DenoiserParams& params, const std::vector<GroundedSample>& dataset,
                      const TrainConfig& cfg, const NoiseSchedule& schedule, std::uint64_t seed);

// Mean noise-prediction MSE over fresh draws; the adapter may be null.
double eval_mse(const DenoiserParams& base, const ConceptAdapter* adapter,
                const std::vector<GroundedSample>& dataset, const NoiseSchedule& schedule,
                int draws, std::uint64_t seed);

// Mean over draws of the attention mass fraction inside the sample masks at
// the given token positions.
double trigger_mass_ratio(const DenoiserParams& base, const ConceptAdapter* adapter,
                          const std::vector<GroundedSample>& dataset,
                          const NoiseSchedule& schedule, int draws, std::uint64_t seed,
                          double eps_div);

}  // namespace mcg
