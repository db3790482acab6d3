#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcg/sampler.hpp"

namespace mcg {

// Raised for malformed documents, unknown keys, and constraint violations.
// The message always names the offending key.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat run configuration covering the guidance objective, the noise
// schedule, merge weights, and output plumbing. An empty document resolves
// to the defaults below.
struct RunConfig {
    GuidanceConfig guidance;

    int train_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    bool deterministic_sampler = true;
    int base_steps = 0;  // base pretraining budget; 0 keeps the world default

    double w_global = 1.4;
    double w_concept = 5.6;
    double compgen_w_global = 5.6;
    double compgen_w_concept = 1.4;

    int height = 16;
    int width = 16;
    bool refine_masks = false;
    bool z_space_merge = false;
    int snapshot_step = -1;
    int latent_snapshot_every = 0;

    std::vector<std::string> adapters;
    std::vector<std::uint64_t> seeds{0};
    std::string output_dir = "out";

    NoiseSchedule make_schedule() const;
    void validate() const;
};

// Parse a JSON document; empty or whitespace-only text yields defaults.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Canonical dump listing every key, including applied defaults. Reparsing
// the dump reproduces the config exactly.
std::string dump_run_config(const RunConfig& cfg);

}  // namespace mcg
