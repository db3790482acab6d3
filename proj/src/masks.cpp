#include "mcg/masks.hpp"

#include <limits>

namespace mcg {

void MaskProposalConfig::validate() const {
    if (!(theta1 > 0.0 && theta1 < 1.0)) throw std::invalid_argument("MaskProposalConfig: theta1 must be in (0,1)");
    if (!(theta2 > 0.0 && theta2 < 1.0)) throw std::invalid_argument("MaskProposalConfig: theta2 must be in (0,1)");
    if (dilation_radius < 1) throw std::invalid_argument("MaskProposalConfig: dilation radius must be >= 1");
    smoothing.validate();
}

namespace {

double min_value(const Map2D& m) {
    double s = std::numeric_limits<double>::infinity();
    for (double x : m.v) s = std::min(s, x);
    return s;
}

Map2D rescale(const Map2D& a, bool unit_range) {
    double lo = min_value(a);
    double hi = max_value(a);
    double den = unit_range ? hi - lo : hi;
    Map2D out(a.h, a.w);
    if (den == 0.0) return out;  // flat or all-zero map has no usable contrast
    for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = (a.v[i] - lo) / den;
    return out;
}

int count_ones(const Map2D& m) {
    int n = 0;
    for (double x : m.v)
        if (x == 1.0) ++n;
    return n;
}

bool any_one(const Map2D& m) {
    for (double x : m.v)
        if (x == 1.0) return true;
    return false;
}

Map2D distance_or_inf(const Map2D& m) {
    if (any_one(m)) return distance_to_set(m);
    return Map2D(m.h, m.w, std::numeric_limits<double>::infinity());
}

}  // namespace

MaskProposal propose_masks(const Map2D& a1_in, const Map2D& a2_in, const MaskProposalConfig& cfg) {
    cfg.validate();
    if (!a1_in.same_shape(a2_in)) throw std::invalid_argument("propose_masks: shape mismatch");
    if (!all_finite(a1_in) || !all_finite(a2_in)) throw NumericError("propose_masks: non-finite input");

    MaskProposal out;
    Map2D a1 = gaussian_filter(rescale(a1_in, cfg.unit_range_normalize), cfg.smoothing);
    Map2D a2 = gaussian_filter(rescale(a2_in, cfg.unit_range_normalize), cfg.smoothing);

    int n = a1.h * a1.w;
    Map2D m1(a1.h, a1.w), m2(a1.h, a1.w), overlap(a1.h, a1.w);
    for (int i = 0; i < n; ++i) {
        m1.v[i] = a1.v[i] > a2.v[i] ? 1.0 : 0.0;
        m2.v[i] = a2.v[i] > a1.v[i] ? 1.0 : 0.0;
        overlap.v[i] = (a1.v[i] > cfg.theta1 && a2.v[i] > cfg.theta1) ? 1.0 : 0.0;
    }
    out.stats.dominant1 = count_ones(m1);
    out.stats.dominant2 = count_ones(m2);
    out.stats.overlap = count_ones(overlap);

    // The second exclusion sees the first one's result.
    for (int i = 0; i < n; ++i) m1.v[i] = m1.v[i] * (1.0 - overlap.v[i] * m2.v[i]);
    out.stats.excluded1 = out.stats.dominant1 - count_ones(m1);
    for (int i = 0; i < n; ++i) m2.v[i] = m2.v[i] * (1.0 - overlap.v[i] * m1.v[i]);
    out.stats.excluded2 = out.stats.dominant2 - count_ones(m2);

    for (int i = 0; i < n; ++i) {
        m1.v[i] = m1.v[i] > cfg.theta2 ? 1.0 : 0.0;
        m2.v[i] = m2.v[i] > cfg.theta2 ? 1.0 : 0.0;
    }

    Map2D uni(a1.h, a1.w);
    for (int i = 0; i < n; ++i) uni.v[i] = (m1.v[i] == 1.0 || m2.v[i] == 1.0) ? 1.0 : 0.0;
    out.stats.union_pixels = count_ones(uni);
    out.degenerate = out.stats.union_pixels == 0;

    Map2D ring(a1.h, a1.w);
    if (!out.degenerate) {
        Map2D dilated = dilate(uni, cfg.dilation_radius);
        for (int i = 0; i < n; ++i) ring.v[i] = dilated.v[i] - uni.v[i];
        out.stats.ring = count_ones(ring);

        Map2D d1 = distance_or_inf(m1);
        Map2D d2 = distance_or_inf(m2);
        // Ring pixels go to the nearer mask; exact ties go to the first.
        for (int i = 0; i < n; ++i) {
            if (ring.v[i] != 1.0) continue;
            if (d1.v[i] <= d2.v[i]) {
                m1.v[i] = 1.0;
                ++out.stats.ring_to1;
            } else {
                m2.v[i] = 1.0;
                ++out.stats.ring_to2;
            }
        }
    }

    out.hard1 = m1;
    out.hard2 = m2;
    out.m1 = gaussian_filter(m1, cfg.smoothing);
    out.m2 = gaussian_filter(m2, cfg.smoothing);
    return out;
}

}  // namespace mcg
