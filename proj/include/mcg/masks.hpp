#pragma once

#include "mcg/numerics.hpp"

namespace mcg {

struct MaskProposalConfig {
    double theta1 = 0.2;  // overlap threshold
    double theta2 = 0.5;  // binarization threshold
    int dilation_radius = 2;
    GaussianSpec smoothing{3, 0.5};
    // Rescale by (max - min) instead of max before smoothing.
    bool unit_range_normalize = false;

    void validate() const;
};

// Per-stage pixel counts, reported by the CLI and used by tests.
struct MaskProposalStats {
    int dominant1 = 0;  // pixels where the first map strictly dominates
    int dominant2 = 0;
    int overlap = 0;      // pixels above theta1 in both maps
    int excluded1 = 0;    // pixels removed from each mask by the overlap rule
    int excluded2 = 0;
    int union_pixels = 0; // mask union before dilation
    int ring = 0;         // dilation ring size
    int ring_to1 = 0;
    int ring_to2 = 0;
};

struct MaskProposal {
    Map2D m1, m2;        // final soft masks in [0,1]
    Map2D hard1, hard2;  // binary masks after ring assignment, before blur
    bool degenerate = false;  // both hard masks empty (tied inputs)
    MaskProposalStats stats;
};

// Derives mutually exclusive soft masks for two subjects from their
// aggregated attention maps: rescale and smooth each map, split by strict
// dominance, carve out the shared high-attention overlap, dilate the union
// and hand the ring to the nearer mask, then blur for a soft boundary.
MaskProposal propose_masks(const Map2D& a1, const Map2D& a2, const MaskProposalConfig& cfg);

}  // namespace mcg
