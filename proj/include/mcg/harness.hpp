#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mcg/grounding.hpp"

namespace mcg {

enum class BlobShape { Disc, Square, Triangle };

const char* blob_shape_name(BlobShape shape);
BlobShape blob_shape_from_name(const std::string& name);

// One synthetic concept: a colored shape with a trigger word and the generic
// category word it specializes.
struct ConceptSpec {
    std::string name;
    BlobShape shape = BlobShape::Disc;
    std::array<double, 3> color{0.9, 0.1, 0.1};
    double size_min = 2.0;
    double size_max = 3.0;
    std::string trigger;
    std::string category;

    void validate() const;
};

// Draws one anti-aliased blob onto an existing RGB image (values in [0,1]),
// compositing by per-pixel coverage. `size` is the radius / half-side /
// circumradius. When `mask` is given it receives the >= 50% coverage
// footprint of this blob alone.
void render_blob(Tensor& image, Map2D* mask, BlobShape shape, const std::array<double, 3>& color,
                 double cx, double cy, double size);

struct RenderResult {
    Tensor image;  // (h, w, 3), values in [0,1]
    Map2D mask;
    double size = 0.0;
};

// Renders one concept instance on the neutral background. The size is drawn
// from the spec's range; the position is caller-chosen and must keep the blob
// in frame.
RenderResult render_concept(const ConceptSpec& spec, int height, int width, double cx, double cy,
                            Rng& rng);

// [0,1] RGB <-> latent in [-1,1].
Tensor image_to_latent(const Tensor& image);
Tensor latent_to_image(const Tensor& z);

// Single-concept training set: randomized placements captioned
// "photo of a <trigger>", with the trigger token carrying the blob mask.
std::vector<GroundedSample> build_scene_dataset(const ConceptSpec& blueprint, int height, int width,
                                                int count, const Vocabulary& vocab, Rng& rng);

// Best mean-centered joint-RGB correlation against canonical templates of the
// concept, swept over placements and sizes, clipped to [0,1].
double presence_score(const Tensor& image, const ConceptSpec& spec);

struct SceneMetrics {
    std::vector<double> presence;  // one per concept
    bool co_occurrence = false;
    double final_inter = 0.0;
    double wall_seconds = 0.0;
};

struct RunEvaluation {
    std::vector<double> mean_presence;  // one per concept
    double co_occurrence_rate = 0.0;
    double mean_final_inter = 0.0;
    std::vector<SceneMetrics> per_run;
};

// Aggregates per-image presence scores into co-occurrence and means.
// `final_inter` and `wall_seconds` may be empty or parallel to `images`.
RunEvaluation evaluate_run(const std::vector<Tensor>& images, const std::vector<ConceptSpec>& specs,
                           double tau, const std::vector<double>& final_inter = {},
                           const std::vector<double>& wall_seconds = {});

// The toy world: frame size, schedule, base-model shape, pretraining budget,
// and the concept roster.
struct WorldSpec {
    int height = 16;
    int width = 16;
    ModelDims dims;
    double weight_scale = 0.5;
    int base_scenes = 192;
    double blank_caption_fraction = 0.1;
    double single_blob_fraction = 0.1;
    double base_size_min = 2.0;
    double base_size_max = 3.0;
    TrainConfig base_train;
    int train_grid = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    int inference_steps = 30;
    bool deterministic_sampler = true;
    double presence_tau = 0.6;
    std::vector<std::string> categories{"disc", "square", "triangle"};
    std::vector<ConceptSpec> concepts;

    void validate() const;
};

WorldSpec default_world_spec();

struct World {
    WorldSpec spec;
    Vocabulary vocab;
    DenoiserParams base;
    NoiseSchedule schedule;
    TrainStats base_stats;
};

// Builds the vocabulary, renders the pretraining scenes, and trains the shared
// base model on them. Deterministic given the seed.
World build_world(const WorldSpec& spec, std::uint64_t seed);

// Scene dataset used by build_world; exposed for inspection and CLI export.
std::vector<GroundedSample> build_world_dataset(const WorldSpec& spec, const Vocabulary& vocab,
                                                std::uint64_t seed);

// Trains one concept adapter inside a built world.
TrainResult train_world_concept(const World& world, const ConceptSpec& blueprint, AdapterKind kind,
                                const TrainConfig& cfg, int dataset_size, std::uint64_t seed);

// Prompt builders for composition runs.
std::vector<int> uncond_prompt(const Vocabulary& vocab);
std::vector<int> global_prompt(const Vocabulary& vocab, const std::vector<ConceptSpec>& concepts);

struct SubPrompt {
    std::vector<int> tokens;
    std::vector<int> triggers;
};

SubPrompt concept_prompt(const Vocabulary& vocab, const std::vector<ConceptSpec>& concepts,
                         std::size_t index);
// Layout-mode branch for one category word inside the global scene.
SubPrompt subject_prompt(const Vocabulary& vocab, const std::vector<ConceptSpec>& concepts,
                         std::size_t index);

struct ScenarioConfig {
    int seeds = 20;
    std::uint64_t seed_base = 1000;
    GuidanceConfig guidance;
    bool refine_masks = false;
    bool z_space_merge = false;
    double w_global = 1.4;
    double w_concept = 5.6;

    void validate() const;
};

struct ScenarioOutcome {
    RunEvaluation eval;
    std::vector<Tensor> images;  // decoded RGB frames, one per seed
    std::vector<RunTrace> traces;
};

// Runs the composition pipeline over a batch of seeds and scores the results.
ScenarioOutcome run_scenario(const World& world, const std::vector<const ConceptAdapter*>& adapters,
                             const ScenarioConfig& cfg);

}  // namespace mcg
