#include "mcg/denoiser.hpp"

#include <cmath>
#include <sstream>

namespace mcg {

Vocabulary::Vocabulary() { add("<pad>"); }

int Vocabulary::add(const std::string& word) {
    if (word.empty()) throw std::invalid_argument("Vocabulary: empty word");
    auto it = index_.find(word);
    if (it != index_.end()) return it->second;
    int id = static_cast<int>(words_.size());
    words_.push_back(word);
    index_.emplace(word, id);
    return id;
}

int Vocabulary::id_of(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) throw std::invalid_argument("Vocabulary: unknown word '" + word + "'");
    return it->second;
}

bool Vocabulary::contains(const std::string& word) const { return index_.count(word) > 0; }

const std::string& Vocabulary::word_of(int id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("Vocabulary: id out of range");
    return words_[id];
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
    std::vector<int> ids;
    std::istringstream is(text);
    std::string word;
    while (is >> word) ids.push_back(id_of(word));
    return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word_of(ids[i]);
    }
    return out;
}

void ModelDims::validate() const {
    if (latent_channels < 1 || text_dim < 1 || attn_dim < 1 || value_dim < 1 || blocks < 1 ||
        heads < 1 || max_tokens < 1)
        throw std::invalid_argument("ModelDims: all extents must be positive");
}

static Tensor init_matrix(Rng& rng, std::size_t rows, std::size_t cols, double std_dev) {
    Tensor t = rng.gaussian_tensor({rows, cols});
    scale_inplace(t, std_dev);
    return t;
}

DenoiserParams DenoiserParams::init(const ModelDims& dims, int vocab_size, Rng& rng,
                                    double weight_scale) {
    dims.validate();
    if (vocab_size < 1) throw std::invalid_argument("DenoiserParams: vocab_size must be positive");
    std::size_t l = dims.latent_channels, d = dims.text_dim;
    std::size_t dk = dims.attn_dim, dv = dims.value_dim;
    DenoiserParams p;
    p.dims = dims;
    p.embed = rng.gaussian_tensor({static_cast<std::size_t>(vocab_size), d});
    p.w_mix = init_matrix(rng, d, d, weight_scale / std::sqrt(double(d)));
    p.b_mix = Tensor({d});
    p.block.resize(dims.blocks);
    for (auto& b : p.block) {
        b.w_in = init_matrix(rng, l, l, weight_scale / std::sqrt(double(l)));
        b.b_in = Tensor({l});
        b.w_q.resize(dims.heads);
        b.w_k.resize(dims.heads);
        b.w_v.resize(dims.heads);
        for (int h = 0; h < dims.heads; ++h) {
            b.w_q[h] = init_matrix(rng, l, dk, weight_scale / std::sqrt(double(l)));
            b.w_k[h] = init_matrix(rng, d, dk, weight_scale / std::sqrt(double(d)));
            b.w_v[h] = init_matrix(rng, d, dv, weight_scale / std::sqrt(double(d)));
        }
        b.w_out = init_matrix(rng, dims.heads * dv, l, weight_scale / std::sqrt(double(dims.heads * dv)));
        b.b_out = Tensor({l});
    }
    p.w_head = init_matrix(rng, l, l, weight_scale / std::sqrt(double(l)));
    p.b_head = Tensor({l});
    return p;
}

DenoiserParams DenoiserParams::zeros_like(const DenoiserParams& other) {
    DenoiserParams p;
    p.dims = other.dims;
    p.embed = Tensor::zeros_like(other.embed);
    p.w_mix = Tensor::zeros_like(other.w_mix);
    p.b_mix = Tensor::zeros_like(other.b_mix);
    p.block.resize(other.block.size());
    for (std::size_t b = 0; b < other.block.size(); ++b) {
        const BlockParams& ob = other.block[b];
        BlockParams& nb = p.block[b];
        nb.w_in = Tensor::zeros_like(ob.w_in);
        nb.b_in = Tensor::zeros_like(ob.b_in);
        for (std::size_t h = 0; h < ob.w_q.size(); ++h) {
            nb.w_q.push_back(Tensor::zeros_like(ob.w_q[h]));
            nb.w_k.push_back(Tensor::zeros_like(ob.w_k[h]));
            nb.w_v.push_back(Tensor::zeros_like(ob.w_v[h]));
        }
        nb.w_out = Tensor::zeros_like(ob.w_out);
        nb.b_out = Tensor::zeros_like(ob.b_out);
    }
    p.w_head = Tensor::zeros_like(other.w_head);
    p.b_head = Tensor::zeros_like(other.b_head);
    return p;
}

void DenoiserParams::validate() const {
    dims.validate();
    std::size_t l = dims.latent_channels, d = dims.text_dim;
    std::size_t dk = dims.attn_dim, dv = dims.value_dim;
    auto check = [](const Tensor& t, std::vector<std::size_t> shape, const char* name) {
        if (t.shape() != shape) throw std::invalid_argument(std::string("DenoiserParams: bad shape for ") + name);
        if (!t.all_finite()) throw std::invalid_argument(std::string("DenoiserParams: non-finite ") + name);
    };
    if (embed.rank() != 2 || embed.extent(1) != d)
        throw std::invalid_argument("DenoiserParams: bad embedding shape");
    check(w_mix, {d, d}, "w_mix");
    check(b_mix, {d}, "b_mix");
    if (block.size() != static_cast<std::size_t>(dims.blocks))
        throw std::invalid_argument("DenoiserParams: block count mismatch");
    for (const BlockParams& b : block) {
        check(b.w_in, {l, l}, "w_in");
        check(b.b_in, {l}, "b_in");
        if (b.w_q.size() != static_cast<std::size_t>(dims.heads) || b.w_k.size() != b.w_q.size() ||
            b.w_v.size() != b.w_q.size())
            throw std::invalid_argument("DenoiserParams: head count mismatch");
        for (int h = 0; h < dims.heads; ++h) {
            check(b.w_q[h], {l, dk}, "w_q");
            check(b.w_k[h], {d, dk}, "w_k");
            check(b.w_v[h], {d, dv}, "w_v");
        }
        check(b.w_out, {static_cast<std::size_t>(dims.heads) * dv, l}, "w_out");
        check(b.b_out, {l}, "b_out");
    }
    check(w_head, {l, l}, "w_head");
    check(b_head, {l}, "b_head");
}

const char* adapter_kind_name(AdapterKind kind) {
    switch (kind) {
        case AdapterKind::EmbeddingOffset: return "embedding-offset";
        case AdapterKind::LowRank: return "low-rank";
        case AdapterKind::FullDelta: return "full-delta";
    }
    throw std::invalid_argument("adapter_kind_name: bad kind");
}

AdapterKind adapter_kind_from_name(const std::string& name) {
    if (name == "embedding-offset") return AdapterKind::EmbeddingOffset;
    if (name == "low-rank") return AdapterKind::LowRank;
    if (name == "full-delta") return AdapterKind::FullDelta;
    throw std::invalid_argument("adapter_kind_from_name: unknown kind '" + name + "'");
}

namespace {

std::string slot_key(int b, int h, const char* which) {
    return "b" + std::to_string(b) + ".h" + std::to_string(h) + "." + which;
}

// Calls fn(key, rows, cols) for every adapted matrix slot.
template <typename F>
void for_each_adapted_slot(const ModelDims& dims, F&& fn) {
    std::size_t l = dims.latent_channels, d = dims.text_dim;
    std::size_t dk = dims.attn_dim, dv = dims.value_dim;
    for (int b = 0; b < dims.blocks; ++b)
        for (int h = 0; h < dims.heads; ++h) {
            fn(slot_key(b, h, "wq"), l, dk);
            fn(slot_key(b, h, "wk"), d, dk);
            fn(slot_key(b, h, "wv"), d, dv);
        }
    fn(std::string("mix"), d, d);
}

}  // namespace

ConceptAdapter ConceptAdapter::zero(AdapterKind kind, const DenoiserParams& base,
                                    const std::string& trigger, int trigger_id, double scale,
                                    int rank) {
    ConceptAdapter a;
    a.kind = kind;
    a.trigger = trigger;
    a.trigger_id = trigger_id;
    a.scale = scale;
    a.rank = rank;
    switch (kind) {
        case AdapterKind::EmbeddingOffset:
            a.payload["offset"] = Tensor({static_cast<std::size_t>(base.dims.text_dim)});
            break;
        case AdapterKind::LowRank:
            for_each_adapted_slot(base.dims, [&](const std::string& key, std::size_t rows, std::size_t cols) {
                a.payload[key + ".u"] = Tensor({rows, static_cast<std::size_t>(rank)});
                a.payload[key + ".v"] = Tensor({cols, static_cast<std::size_t>(rank)});
            });
            break;
        case AdapterKind::FullDelta:
            for_each_adapted_slot(base.dims, [&](const std::string& key, std::size_t rows, std::size_t cols) {
                a.payload[key] = Tensor({rows, cols});
            });
            break;
    }
    a.validate(base);
    return a;
}

void ConceptAdapter::validate(const DenoiserParams& base) const {
    if (trigger_id < 0 || trigger_id >= base.vocab_size())
        throw std::invalid_argument("ConceptAdapter: trigger id out of vocabulary range");
    if (!(scale > 0.0 && scale <= 2.0))
        throw std::invalid_argument("ConceptAdapter: scale must be in (0,2]");
    auto expect = [&](const std::string& key, std::vector<std::size_t> shape) {
        auto it = payload.find(key);
        if (it == payload.end())
            throw std::invalid_argument("ConceptAdapter: missing payload '" + key + "'");
        if (it->second.shape() != shape)
            throw std::invalid_argument("ConceptAdapter: bad payload shape for '" + key + "'");
        if (!it->second.all_finite())
            throw std::invalid_argument("ConceptAdapter: non-finite payload '" + key + "'");
    };
    std::size_t expected = 0;
    switch (kind) {
        case AdapterKind::EmbeddingOffset:
            expect("offset", {static_cast<std::size_t>(base.dims.text_dim)});
            expected = 1;
            break;
        case AdapterKind::LowRank:
            if (rank < 1) throw std::invalid_argument("ConceptAdapter: rank must be positive");
            for_each_adapted_slot(base.dims, [&](const std::string& key, std::size_t rows, std::size_t cols) {
                expect(key + ".u", {rows, static_cast<std::size_t>(rank)});
                expect(key + ".v", {cols, static_cast<std::size_t>(rank)});
                expected += 2;
            });
            break;
        case AdapterKind::FullDelta:
            for_each_adapted_slot(base.dims, [&](const std::string& key, std::size_t rows, std::size_t cols) {
                expect(key, {rows, cols});
                expected += 1;
            });
            break;
    }
    if (payload.size() != expected)
        throw std::invalid_argument("ConceptAdapter: unexpected payload entries");
}

namespace {

// delta = scale * u * v^T, accumulated onto w.
void add_low_rank(Tensor& w, const Tensor& u, const Tensor& v, double scale) {
    std::size_t rows = w.extent(0), cols = w.extent(1), r = u.extent(1);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < r; ++p) s += u.at2(i, p) * v.at2(j, p);
            w.at2(i, j) += scale * s;
        }
}

}  // namespace

ResolvedWeights resolve_adapter(const DenoiserParams& base, const ConceptAdapter* adapter) {
    ResolvedWeights eff;
    int L = base.dims.blocks;
    eff.w_q.resize(L);
    eff.w_k.resize(L);
    eff.w_v.resize(L);
    for (int b = 0; b < L; ++b) {
        eff.w_q[b] = base.block[b].w_q;
        eff.w_k[b] = base.block[b].w_k;
        eff.w_v[b] = base.block[b].w_v;
    }
    eff.w_mix = base.w_mix;
    if (!adapter) return eff;

    adapter->validate(base);
    auto slot = [&](const std::string& key) -> Tensor& {
        if (key == "mix") return eff.w_mix;
        // key is b<i>.h<j>.<which>
        std::size_t d1 = key.find('.'), d2 = key.find('.', d1 + 1);
        int b = std::stoi(key.substr(1, d1 - 1));
        int h = std::stoi(key.substr(d1 + 2, d2 - d1 - 2));
        std::string which = key.substr(d2 + 1);
        if (which == "wq") return eff.w_q[b][h];
        if (which == "wk") return eff.w_k[b][h];
        return eff.w_v[b][h];
    };
    switch (adapter->kind) {
        case AdapterKind::EmbeddingOffset:
            eff.offset = adapter->payload.at("offset");
            break;
        case AdapterKind::LowRank:
            for_each_adapted_slot(base.dims, [&](const std::string& key, std::size_t, std::size_t) {
                add_low_rank(slot(key), adapter->payload.at(key + ".u"), adapter->payload.at(key + ".v"),
                             adapter->scale);
            });
            break;
        case AdapterKind::FullDelta:
            for_each_adapted_slot(base.dims, [&](const std::string& key, std::size_t, std::size_t) {
                accumulate_scaled(slot(key), adapter->payload.at(key), adapter->scale);
            });
            break;
    }
    return eff;
}

Tensor time_embedding(int t, int channels) {
    if (t < 0) throw std::invalid_argument("time_embedding: t must be nonnegative");
    Tensor e({static_cast<std::size_t>(channels)});
    for (int j = 0; j < channels; ++j) {
        int pair = j / 2;
        double freq = std::exp(-std::log(10000.0) * (2.0 * pair) / channels);
        double arg = t * freq;
        e[j] = (j % 2 == 0) ? std::sin(arg) : std::cos(arg);
    }
    return e;
}

namespace {

Tensor colsum(const Tensor& m) {
    std::size_t rows = m.extent(0), cols = m.extent(1);
    Tensor out({cols});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j] += m.at2(i, j);
    return out;
}

struct TextActivations {
    Tensor c_raw, c_pre, c;
};

TextActivations text_path(const std::vector<int>& tokens, const DenoiserParams& p,
                          const ResolvedWeights& eff, const std::vector<int>& trigger_rows,
                          double adapter_scale) {
    std::size_t s = tokens.size(), d = p.dims.text_dim;
    TextActivations a;
    a.c_raw = Tensor({s, d});
    for (std::size_t i = 0; i < s; ++i) {
        int id = tokens[i];
        if (id < 0 || id >= p.vocab_size())
            throw std::invalid_argument("encode_prompt: unknown token id");
        for (std::size_t j = 0; j < d; ++j) a.c_raw.at2(i, j) = p.embed.at2(id, j);
    }
    if (eff.offset.numel() == d)
        for (int row : trigger_rows)
            for (std::size_t j = 0; j < d; ++j)
                a.c_raw.at2(row, j) += adapter_scale * eff.offset[j];
    a.c_pre = matmul(a.c_raw, eff.w_mix);
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < d; ++j) a.c_pre.at2(i, j) += p.b_mix[j];
    a.c = Tensor({s, d});
    for (std::size_t i = 0; i < a.c.numel(); ++i) a.c[i] = std::tanh(a.c_pre[i]);
    return a;
}

std::vector<int> find_trigger_rows(const std::vector<int>& tokens, const ConceptAdapter* adapter) {
    std::vector<int> rows;
    if (adapter)
        for (std::size_t i = 0; i < tokens.size(); ++i)
            if (tokens[i] == adapter->trigger_id) rows.push_back(static_cast<int>(i));
    return rows;
}

ForwardResult attention_path(const Tensor& z, int t, const Tensor& c, const DenoiserParams& p,
                             const ResolvedWeights& eff, ForwardCache* cache) {
    if (z.rank() != 3) throw std::invalid_argument("denoise_forward: latent must be rank 3");
    std::size_t h = z.extent(0), w = z.extent(1), l = z.extent(2);
    if (l != static_cast<std::size_t>(p.dims.latent_channels))
        throw std::invalid_argument("denoise_forward: latent channel mismatch");
    if (c.rank() != 2 || c.extent(1) != static_cast<std::size_t>(p.dims.text_dim))
        throw std::invalid_argument("denoise_forward: bad context shape");
    std::size_t s = c.extent(0);
    if (s < 1 || s > static_cast<std::size_t>(p.dims.max_tokens))
        throw std::invalid_argument("denoise_forward: context length out of range");
    if (t < 0) throw std::invalid_argument("denoise_forward: t must be nonnegative");
    if (!z.all_finite()) throw NumericError("denoise_forward: non-finite latent");

    std::size_t n = h * w;
    int L = p.dims.blocks, H = p.dims.heads;
    std::size_t dk = p.dims.attn_dim, dv = p.dims.value_dim;
    double inv_sqrt_dk = 1.0 / std::sqrt(double(dk));
    Tensor t_emb = time_embedding(t, p.dims.latent_channels);

    ForwardResult res;
    res.attn.h = static_cast<int>(h);
    res.attn.w = static_cast<int>(w);
    res.attn.tokens = static_cast<int>(s);
    res.attn.blocks.resize(L);

    if (cache) {
        cache->h = static_cast<int>(h);
        cache->w = static_cast<int>(w);
        cache->t = t;
        cache->t_emb = t_emb;
        cache->f.clear();
        cache->u.clear();
        cache->o.clear();
        cache->q.assign(L, {});
        cache->k.assign(L, {});
        cache->v.assign(L, {});
        cache->attn.assign(L, {});
    }

    Tensor f = z.reshaped({n, l});
    if (cache) cache->f.push_back(f);

    for (int b = 0; b < L; ++b) {
        const BlockParams& bp = p.block[b];
        Tensor u = matmul(f, bp.w_in);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < l; ++j) u.at2(i, j) += bp.b_in[j] + t_emb[j];

        Tensor o({n, static_cast<std::size_t>(H) * dv});
        for (int head = 0; head < H; ++head) {
            Tensor qm = matmul(u, eff.w_q[b][head]);
            Tensor km = matmul(c, eff.w_k[b][head]);
            Tensor vm = matmul(c, eff.w_v[b][head]);
            Tensor logits = matmul_nt(qm, km);
            Tensor a = softmax_rows(logits, inv_sqrt_dk);
            Tensor ov = matmul(a, vm);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < dv; ++j) o.at2(i, head * dv + j) = ov.at2(i, j);
            res.attn.blocks[b].push_back(a);
            if (cache) {
                cache->q[b].push_back(std::move(qm));
                cache->k[b].push_back(std::move(km));
                cache->v[b].push_back(std::move(vm));
                cache->attn[b].push_back(res.attn.blocks[b].back());
            }
        }
        Tensor pre = matmul(o, bp.w_out);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < l; ++j) pre.at2(i, j) += f.at2(i, j) + bp.b_out[j];
        Tensor f_next({n, l});
        for (std::size_t i = 0; i < f_next.numel(); ++i) f_next[i] = std::tanh(pre[i]);
        if (cache) {
            cache->u.push_back(std::move(u));
            cache->o.push_back(std::move(o));
            cache->f.push_back(f_next);
        }
        f = std::move(f_next);
    }

    Tensor eps = matmul(f, p.w_head);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < l; ++j) eps.at2(i, j) += p.b_head[j];
    if (!eps.all_finite()) throw NumericError("denoise_forward: non-finite output");
    res.eps = eps.reshaped({h, w, l});
    return res;
}

}  // namespace

Tensor encode_prompt(const std::vector<int>& tokens, const DenoiserParams& params,
                     const ConceptAdapter* adapter) {
    if (tokens.empty()) throw std::invalid_argument("encode_prompt: empty prompt");
    if (tokens.size() > static_cast<std::size_t>(params.dims.max_tokens))
        throw std::invalid_argument("encode_prompt: prompt too long");
    ResolvedWeights eff = resolve_adapter(params, adapter);
    std::vector<int> trig = find_trigger_rows(tokens, adapter);
    return text_path(tokens, params, eff, trig, adapter ? adapter->scale : 0.0).c;
}

ForwardResult denoise_forward(const Tensor& z, int t, const Tensor& c,
                              const DenoiserParams& params, const ConceptAdapter* adapter) {
    ResolvedWeights eff = resolve_adapter(params, adapter);
    return attention_path(z, t, c, params, eff, nullptr);
}

ForwardResult full_forward(const Tensor& z, int t, const std::vector<int>& tokens,
                           const DenoiserParams& params, const ConceptAdapter* adapter,
                           ForwardCache* cache) {
    if (tokens.empty()) throw std::invalid_argument("full_forward: empty prompt");
    if (tokens.size() > static_cast<std::size_t>(params.dims.max_tokens))
        throw std::invalid_argument("full_forward: prompt too long");
    ResolvedWeights eff = resolve_adapter(params, adapter);
    std::vector<int> trig = find_trigger_rows(tokens, adapter);
    TextActivations text = text_path(tokens, params, eff, trig, adapter ? adapter->scale : 0.0);
    if (cache) {
        cache->tokens = tokens;
        cache->trigger_rows = trig;
        cache->adapter = adapter;
        cache->c_raw = text.c_raw;
        cache->c_pre = text.c_pre;
        cache->c = text.c;
        cache->text_cached = true;
        ForwardResult res = attention_path(z, t, text.c, params, eff, cache);
        cache->eff = std::move(eff);
        return res;
    }
    return attention_path(z, t, text.c, params, eff, nullptr);
}

BackwardResult denoise_backward(const DenoiserParams& params, const ForwardCache& cache,
                                const BackwardRequest& req) {
    if (!cache.text_cached) throw std::invalid_argument("denoise_backward: cache not filled");
    if (!req.d_attn && !req.d_eps) throw std::invalid_argument("denoise_backward: no seeds");

    std::size_t h = cache.h, w = cache.w, n = h * w;
    std::size_t l = params.dims.latent_channels, d = params.dims.text_dim;
    std::size_t dk = params.dims.attn_dim, dv = params.dims.value_dim;
    int L = params.dims.blocks, H = params.dims.heads;
    double inv_sqrt_dk = 1.0 / std::sqrt(double(dk));
    std::size_t s = cache.tokens.size();

    BackwardResult out;
    bool want_params = req.want_params;
    bool want_adapter = cache.adapter != nullptr;
    bool want_eff = want_params || want_adapter;
    out.dparams = DenoiserParams::zeros_like(params);

    // Head.
    Tensor df({n, l});
    if (req.d_eps) {
        if (req.d_eps->rank() != 3 || req.d_eps->extent(0) != h || req.d_eps->extent(1) != w ||
            req.d_eps->extent(2) != l)
            throw std::invalid_argument("denoise_backward: bad d_eps shape");
        Tensor de = req.d_eps->reshaped({n, l});
        df = matmul_nt(de, params.w_head);
        if (want_params) {
            accumulate(out.dparams.w_head, matmul_tn(cache.f[L], de));
            accumulate(out.dparams.b_head, colsum(de));
        }
    }

    Tensor dc({s, d});
    for (int b = L - 1; b >= 0; --b) {
        const Tensor& f_next = cache.f[b + 1];
        Tensor dp = Tensor::zeros_like(df);
        for (std::size_t i = 0; i < dp.numel(); ++i)
            dp[i] = df[i] * (1.0 - f_next[i] * f_next[i]);

        Tensor df_prev = dp;  // residual branch
        Tensor do_cat = matmul_nt(dp, params.block[b].w_out);
        if (want_params) {
            accumulate(out.dparams.block[b].w_out, matmul_tn(cache.o[b], dp));
            accumulate(out.dparams.block[b].b_out, colsum(dp));
        }

        Tensor du({n, l});
        for (int head = 0; head < H; ++head) {
            Tensor do_h({n, dv});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < dv; ++j) do_h.at2(i, j) = do_cat.at2(i, head * dv + j);

            const Tensor& a = cache.attn[b][head];
            Tensor da = matmul_nt(do_h, cache.v[b][head]);
            if (req.d_attn) accumulate(da, req.d_attn->blocks[b][head]);

            Tensor dvm = matmul_tn(a, do_h);
            if (want_eff) accumulate(out.dparams.block[b].w_v[head], matmul_tn(cache.c, dvm));
            accumulate(dc, matmul_nt(dvm, cache.eff.w_v[b][head]));

            Tensor dlogits = Tensor::zeros_like(a);
            softmax_rows_backward(a, da, inv_sqrt_dk, dlogits);

            Tensor dq = matmul(dlogits, cache.k[b][head]);
            Tensor dkm = matmul_tn(dlogits, cache.q[b][head]);
            if (want_eff) {
                accumulate(out.dparams.block[b].w_q[head], matmul_tn(cache.u[b], dq));
                accumulate(out.dparams.block[b].w_k[head], matmul_tn(cache.c, dkm));
            }
            accumulate(du, matmul_nt(dq, cache.eff.w_q[b][head]));
            accumulate(dc, matmul_nt(dkm, cache.eff.w_k[b][head]));
        }

        accumulate(df_prev, matmul_nt(du, params.block[b].w_in));
        if (want_params) {
            accumulate(out.dparams.block[b].w_in, matmul_tn(cache.f[b], du));
            accumulate(out.dparams.block[b].b_in, colsum(du));
        }
        df = std::move(df_prev);
    }

    if (req.want_z) out.dz = df.reshaped({h, w, l});

    if (want_eff) {
        // Text path.
        Tensor dc_pre = Tensor::zeros_like(dc);
        for (std::size_t i = 0; i < dc.numel(); ++i)
            dc_pre[i] = dc[i] * (1.0 - cache.c[i] * cache.c[i]);
        accumulate(out.dparams.w_mix, matmul_tn(cache.c_raw, dc_pre));
        accumulate(out.dparams.b_mix, colsum(dc_pre));
        Tensor dc_raw = matmul_nt(dc_pre, cache.eff.w_mix);
        for (std::size_t i = 0; i < s; ++i) {
            int id = cache.tokens[i];
            for (std::size_t j = 0; j < d; ++j) out.dparams.embed.at2(id, j) += dc_raw.at2(i, j);
        }

        const ConceptAdapter* adapter = cache.adapter;
        if (adapter) {
            double sc = adapter->scale;
            switch (adapter->kind) {
                case AdapterKind::EmbeddingOffset: {
                    Tensor g({d});
                    for (int row : cache.trigger_rows)
                        for (std::size_t j = 0; j < d; ++j) g[j] += sc * dc_raw.at2(row, j);
                    out.d_adapter["offset"] = std::move(g);
                    break;
                }
                case AdapterKind::LowRank:
                case AdapterKind::FullDelta: {
                    auto eff_grad = [&](const std::string& key) -> const Tensor& {
                        if (key == "mix") return out.dparams.w_mix;
                        std::size_t d1 = key.find('.'), d2 = key.find('.', d1 + 1);
                        int b = std::stoi(key.substr(1, d1 - 1));
                        int hh = std::stoi(key.substr(d1 + 2, d2 - d1 - 2));
                        std::string which = key.substr(d2 + 1);
                        if (which == "wq") return out.dparams.block[b].w_q[hh];
                        if (which == "wk") return out.dparams.block[b].w_k[hh];
                        return out.dparams.block[b].w_v[hh];
                    };
                    for_each_adapted_slot(params.dims, [&](const std::string& key, std::size_t, std::size_t) {
                        const Tensor& g = eff_grad(key);
                        if (adapter->kind == AdapterKind::FullDelta) {
                            Tensor gd = g;
                            scale_inplace(gd, sc);
                            out.d_adapter[key] = std::move(gd);
                        } else {
                            Tensor gu = matmul(g, adapter->payload.at(key + ".v"));
                            scale_inplace(gu, sc);
                            Tensor gv = matmul_tn(g, adapter->payload.at(key + ".u"));
                            scale_inplace(gv, sc);
                            out.d_adapter[key + ".u"] = std::move(gu);
                            out.d_adapter[key + ".v"] = std::move(gv);
                        }
                    });
                    break;
                }
            }
        }
    }
    return out;
}

std::vector<Map2D> oracle_attention(const Tensor& z, const Tensor& anchors) {
    if (z.rank() != 3) throw std::invalid_argument("oracle_attention: latent must be rank 3");
    if (anchors.rank() != 2 || anchors.extent(0) < 1)
        throw std::invalid_argument("oracle_attention: need at least one anchor");
    if (anchors.extent(1) != z.extent(2))
        throw std::invalid_argument("oracle_attention: anchor width mismatch");
    std::size_t h = z.extent(0), w = z.extent(1), l = z.extent(2);
    std::size_t m = anchors.extent(0);
    Tensor logits({h * w, m});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t k = 0; k < m; ++k) {
                double s = 0.0;
                for (std::size_t c = 0; c < l; ++c) s += z.at3(y, x, c) * anchors.at2(k, c);
                logits.at2(y * w + x, k) = s;
            }
    Tensor a = softmax_rows(logits, 1.0);
    std::vector<Map2D> maps(m, Map2D(static_cast<int>(h), static_cast<int>(w)));
    for (std::size_t i = 0; i < h * w; ++i)
        for (std::size_t k = 0; k < m; ++k) maps[k].v[i] = a.at2(i, k);
    return maps;
}

void oracle_attention_backward(const Tensor& z, const Tensor& anchors,
                               const std::vector<Map2D>& maps, const std::vector<Map2D>& d_maps,
                               Tensor& dz) {
    std::size_t h = z.extent(0), w = z.extent(1), l = z.extent(2);
    std::size_t m = anchors.extent(0);
    if (maps.size() != m || d_maps.size() != m)
        throw std::invalid_argument("oracle_attention_backward: map count mismatch");
    if (!dz.same_shape(z)) throw std::invalid_argument("oracle_attention_backward: dz shape mismatch");
    for (std::size_t i = 0; i < h * w; ++i) {
        double inner = 0.0;
        for (std::size_t k = 0; k < m; ++k) inner += maps[k].v[i] * d_maps[k].v[i];
        std::size_t y = i / w, x = i % w;
        for (std::size_t k = 0; k < m; ++k) {
            double dl = maps[k].v[i] * (d_maps[k].v[i] - inner);
            for (std::size_t c = 0; c < l; ++c) dz.at3(y, x, c) += dl * anchors.at2(k, c);
        }
    }
}

}  // namespace mcg
