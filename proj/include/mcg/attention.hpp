#pragma once

#include <vector>

#include "mcg/numerics.hpp"
#include "mcg/tensor.hpp"

namespace mcg {

// Cross-attention probabilities for one forward pass: one (hw x s) matrix per
// block and head. Rows are per-pixel distributions over text tokens.
struct AttentionStack {
    int h = 0;
    int w = 0;
    int tokens = 0;
    // blocks[b][head] has shape (h*w, tokens).
    std::vector<std::vector<Tensor>> blocks;

    int block_count() const { return static_cast<int>(blocks.size()); }
    int head_count() const { return blocks.empty() ? 0 : static_cast<int>(blocks[0].size()); }
    void validate() const;
    AttentionStack zeros_like() const;
};

// Mean over blocks and heads of the attention column for one token, reshaped
// to the spatial grid.
Map2D extract_token_map(const AttentionStack& stack, int token_index);

// Adjoint of extract_token_map: scatters d_map back into d_stack.
void extract_token_map_adjoint(const Map2D& d_map, int token_index, AttentionStack& d_stack);

// Mean of the given token maps followed by Gaussian smoothing. This is the
// aggregated spatial footprint of one concept.
Map2D aggregate_concept_map(const std::vector<Map2D>& token_maps, const GaussianSpec& spec);

// Mean of token maps without smoothing.
Map2D mean_map(const std::vector<Map2D>& token_maps);

}  // namespace mcg
