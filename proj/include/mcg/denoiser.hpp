#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mcg/attention.hpp"
#include "mcg/tensor.hpp"

namespace mcg {

// Word-level token table. Id 0 is always the padding token.
class Vocabulary {
public:
    Vocabulary();

    int add(const std::string& word);
    int id_of(const std::string& word) const;  // throws on unknown words
    bool contains(const std::string& word) const;
    const std::string& word_of(int id) const;
    int size() const { return static_cast<int>(words_.size()); }
    int pad_id() const { return 0; }

    // Whitespace-separated encoding. Unknown words throw.
    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

struct ModelDims {
    int latent_channels = 3;  // l
    int text_dim = 16;        // d
    int attn_dim = 8;         // d', shared query/key width per head
    int value_dim = 8;        // per-head value width
    int blocks = 2;           // L
    int heads = 2;            // H
    int max_tokens = 64;      // prompt length cap

    void validate() const;
};

struct BlockParams {
    Tensor w_in, b_in;        // (l,l), (l)
    std::vector<Tensor> w_q;  // per head (l,d')
    std::vector<Tensor> w_k;  // per head (d,d')
    std::vector<Tensor> w_v;  // per head (d,value_dim)
    Tensor w_out, b_out;      // (H*value_dim,l), (l)
};

struct DenoiserParams {
    ModelDims dims;
    Tensor embed;        // (vocab,d)
    Tensor w_mix, b_mix; // (d,d), (d)
    std::vector<BlockParams> block;
    Tensor w_head, b_head;  // (l,l), (l)

    static DenoiserParams init(const ModelDims& dims, int vocab_size, Rng& rng,
                               double weight_scale = 1.0);
    static DenoiserParams zeros_like(const DenoiserParams& other);
    void validate() const;
    int vocab_size() const { return static_cast<int>(embed.extent(0)); }

    // Visits every parameter tensor with a stable name; used by the optimizer
    // and fingerprinting.
    template <typename F>
    void for_each_named(F&& fn) const {
        const_cast<DenoiserParams*>(this)->for_each_named_impl(
            [&fn](const std::string& name, Tensor& t) { fn(name, static_cast<const Tensor&>(t)); });
    }
    template <typename F>
    void for_each_named(F&& fn) {
        for_each_named_impl(std::forward<F>(fn));
    }

private:
    template <typename F>
    void for_each_named_impl(F&& fn) {
        fn("embed", embed);
        fn("mix.w", w_mix);
        fn("mix.b", b_mix);
        for (std::size_t b = 0; b < block.size(); ++b) {
            std::string p = "b" + std::to_string(b) + ".";
            fn(p + "in.w", block[b].w_in);
            fn(p + "in.b", block[b].b_in);
            for (std::size_t h = 0; h < block[b].w_q.size(); ++h) {
                std::string ph = p + "h" + std::to_string(h) + ".";
                fn(ph + "wq", block[b].w_q[h]);
                fn(ph + "wk", block[b].w_k[h]);
                fn(ph + "wv", block[b].w_v[h]);
            }
            fn(p + "out.w", block[b].w_out);
            fn(p + "out.b", block[b].b_out);
        }
        fn("head.w", w_head);
        fn("head.b", b_head);
    }
};

enum class AdapterKind { EmbeddingOffset, LowRank, FullDelta };

const char* adapter_kind_name(AdapterKind kind);
AdapterKind adapter_kind_from_name(const std::string& name);

// A small parameter delta binding one trigger token to a concept. The payload
// is a named tensor set whose schema depends on the kind:
//   embedding-offset: "offset" (d)
//   low-rank:         "b<i>.h<j>.{wq|wk|wv}.{u|v}" and "mix.{u|v}" factors
//   full-delta:       "b<i>.h<j>.{wq|wk|wv}" and "mix" dense deltas
struct ConceptAdapter {
    AdapterKind kind = AdapterKind::LowRank;
    std::string trigger;
    int trigger_id = -1;
    double scale = 0.7;
    int rank = 2;
    std::map<std::string, Tensor> payload;

    static ConceptAdapter zero(AdapterKind kind, const DenoiserParams& base,
                               const std::string& trigger, int trigger_id,
                               double scale = 0.7, int rank = 2);
    void validate(const DenoiserParams& base) const;
};

// Effective attention/text weights after applying an adapter to the base.
struct ResolvedWeights {
    std::vector<std::vector<Tensor>> w_q, w_k, w_v;  // [block][head]
    Tensor w_mix;
    Tensor offset;  // (d); numel 0 when the adapter carries no offset
};

ResolvedWeights resolve_adapter(const DenoiserParams& base, const ConceptAdapter* adapter);

// Saved activations from one forward pass, consumed by denoise_backward.
struct ForwardCache {
    int h = 0, w = 0, t = 0;
    std::vector<int> tokens;
    std::vector<int> trigger_rows;
    const ConceptAdapter* adapter = nullptr;
    ResolvedWeights eff;
    Tensor t_emb;               // (l)
    Tensor c_raw, c_pre, c;     // (s,d)
    bool text_cached = false;
    std::vector<Tensor> f;      // block inputs, L+1 entries of (hw,l)
    std::vector<Tensor> u;      // attention inputs per block (hw,l)
    std::vector<Tensor> o;      // concatenated head outputs per block (hw,H*value_dim)
    std::vector<std::vector<Tensor>> q, k, v, attn;  // [block][head]
};

struct ForwardResult {
    Tensor eps;           // (h,w,l)
    AttentionStack attn;  // averaged nowhere; raw per block/head
};

// Text path: embedding lookup, optional trigger-row offset, shared mixing
// layer with tanh.
Tensor encode_prompt(const std::vector<int>& tokens, const DenoiserParams& params,
                     const ConceptAdapter* adapter);

// Attention path with an externally encoded context.
ForwardResult denoise_forward(const Tensor& z, int t, const Tensor& c,
                              const DenoiserParams& params, const ConceptAdapter* adapter);

// Text encoding plus attention path; fills `cache` for the backward pass.
ForwardResult full_forward(const Tensor& z, int t, const std::vector<int>& tokens,
                           const DenoiserParams& params, const ConceptAdapter* adapter,
                           ForwardCache* cache);

struct BackwardRequest {
    const AttentionStack* d_attn = nullptr;  // dL/dA seeds, may be null
    const Tensor* d_eps = nullptr;           // dL/deps seeds (h,w,l), may be null
    bool want_z = true;
    bool want_params = false;
};

struct BackwardResult {
    Tensor dz;  // (h,w,l), present when want_z
    // Gradients with respect to the *effective* weights, shaped like the base
    // parameters. Base-only tensors (w_in, w_out, w_head, embed) are exact
    // base gradients; adapted slots hold effective-weight gradients.
    DenoiserParams dparams;
    std::map<std::string, Tensor> d_adapter;  // payload-shaped, when an adapter is present
};

BackwardResult denoise_backward(const DenoiserParams& params, const ForwardCache& cache,
                                const BackwardRequest& req);

// Sinusoidal embedding of the integer step index, length `channels`.
Tensor time_embedding(int t, int channels);

// Closed-form attention stand-in: per-pixel softmax over tokens of the inner
// product between the latent vector and each anchor direction.
std::vector<Map2D> oracle_attention(const Tensor& z, const Tensor& anchors);

// Accumulates dz for the oracle given upstream map gradients.
void oracle_attention_backward(const Tensor& z, const Tensor& anchors,
                               const std::vector<Map2D>& maps,
                               const std::vector<Map2D>& d_maps, Tensor& dz);

}  // namespace mcg
