#include "mcg/attention.hpp"

namespace mcg {

void AttentionStack::validate() const {
    if (h <= 0 || w <= 0 || tokens <= 0)
        throw std::invalid_argument("AttentionStack: extents must be positive");
    if (blocks.empty()) throw std::invalid_argument("AttentionStack: no blocks");
    std::size_t heads = blocks[0].size();
    if (heads == 0) throw std::invalid_argument("AttentionStack: no heads");
    std::size_t hw = static_cast<std::size_t>(h) * w;
    for (const auto& block : blocks) {
        if (block.size() != heads) throw std::invalid_argument("AttentionStack: ragged heads");
        for (const Tensor& a : block) {
            if (a.rank() != 2 || a.extent(0) != hw || a.extent(1) != static_cast<std::size_t>(tokens))
                throw std::invalid_argument("AttentionStack: bad attention shape");
        }
    }
}

AttentionStack AttentionStack::zeros_like() const {
    AttentionStack out;
    out.h = h;
    out.w = w;
    out.tokens = tokens;
    out.blocks.resize(blocks.size());
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        out.blocks[b].reserve(blocks[b].size());
        for (const Tensor& a : blocks[b]) out.blocks[b].push_back(Tensor::zeros_like(a));
    }
    return out;
}

Map2D extract_token_map(const AttentionStack& stack, int token_index) {
    if (token_index < 0 || token_index >= stack.tokens)
        throw std::invalid_argument("extract_token_map: token index out of range");
    std::size_t hw = static_cast<std::size_t>(stack.h) * stack.w;
    std::size_t s = static_cast<std::size_t>(stack.tokens);
    Map2D out(stack.h, stack.w);
    double inv = 1.0 / (stack.block_count() * stack.head_count());
    for (const auto& block : stack.blocks)
        for (const Tensor& a : block) {
            const double* p = a.data();
            for (std::size_t i = 0; i < hw; ++i) out.v[i] += p[i * s + token_index];
        }
    for (double& x : out.v) x *= inv;
    return out;
}

void extract_token_map_adjoint(const Map2D& d_map, int token_index, AttentionStack& d_stack) {
    if (token_index < 0 || token_index >= d_stack.tokens)
        throw std::invalid_argument("extract_token_map_adjoint: token index out of range");
    if (d_map.h != d_stack.h || d_map.w != d_stack.w)
        throw std::invalid_argument("extract_token_map_adjoint: shape mismatch");
    std::size_t hw = d_map.size();
    std::size_t s = static_cast<std::size_t>(d_stack.tokens);
    double inv = 1.0 / (d_stack.block_count() * d_stack.head_count());
    for (auto& block : d_stack.blocks)
        for (Tensor& a : block) {
            double* p = a.data();
            for (std::size_t i = 0; i < hw; ++i) p[i * s + token_index] += inv * d_map.v[i];
        }
}

Map2D mean_map(const std::vector<Map2D>& token_maps) {
    if (token_maps.empty()) throw std::invalid_argument("mean_map: no maps");
    Map2D out(token_maps[0].h, token_maps[0].w);
    for (const Map2D& m : token_maps) {
        if (!m.same_shape(out)) throw std::invalid_argument("mean_map: shape mismatch");
        for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += m.v[i];
    }
    double inv = 1.0 / token_maps.size();
    for (double& x : out.v) x *= inv;
    return out;
}

Map2D aggregate_concept_map(const std::vector<Map2D>& token_maps, const GaussianSpec& spec) {
    return gaussian_filter(mean_map(token_maps), spec);
}

}  // namespace mcg
