#include "kvcar/model.hpp"

#include <algorithm>
#include <cmath>

#include "kvcar/error.hpp"

namespace kvcar {

void ModelConfig::validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_ff <= 0 || vocab <= 0)
        throw ConfigError("model config: extents must be positive");
    if (d_model % n_heads != 0)
        throw ConfigError("model config: d_model must be divisible by n_heads");
    if (max_seq < 1) throw ConfigError("model config: max_seq must be at least 1");
}

AutoencoderSet::Pair& AutoencoderSet::at(int64_t layer) {
    auto it = pairs_.find(layer);
    if (it == pairs_.end()) throw ConfigError("autoencoder set: no pair for layer " + std::to_string(layer));
    return it->second;
}

const AutoencoderSet::Pair& AutoencoderSet::at(int64_t layer) const {
    auto it = pairs_.find(layer);
    if (it == pairs_.end()) throw ConfigError("autoencoder set: no pair for layer " + std::to_string(layer));
    return it->second;
}

std::vector<int64_t> AutoencoderSet::layers() const {
    std::vector<int64_t> out;
    out.reserve(pairs_.size());
    for (const auto& [layer, _] : pairs_) out.push_back(layer);
    return out;
}

AutoencoderSet AutoencoderSet::clone() const {
    AutoencoderSet copy;
    for (const auto& [layer, pair] : pairs_)
        copy.pairs_[layer] = Pair{pair.k.clone(), pair.v.clone()};
    return copy;
}

Tensor attention_head(const Tensor& q, const Tensor& k, const Tensor& v, bool causal) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw ShapeError("attention_head: 2-d tensors expected");
    const int64_t t = q.dim(0), dk = q.dim(1), s = k.dim(0);
    if (k.dim(1) != dk) throw ShapeError("attention_head: key width must match the query width");
    if (v.dim(0) != s || v.dim(1) != dk)
        throw ShapeError("attention_head: value shape must match the keys");
    if (causal && s < t) throw ShapeError("attention_head: causal alignment needs s >= t");

    Tensor scores = mul_scalar(matmul(q, transpose(k)), 1.0f / std::sqrt(static_cast<float>(dk)));
    if (causal && t > 1) {
        std::vector<float> mask(static_cast<size_t>(t * s), 0.0f);
        const int64_t offset = s - t;
        bool any = false;
        for (int64_t i = 0; i < t; ++i)
            for (int64_t j = offset + i + 1; j < s; ++j) {
                mask[i * s + j] = -1e9f;
                any = true;
            }
        if (any) scores = add(scores, Tensor::from_data({t, s}, std::move(mask)));
    }
    return matmul(softmax_rows(scores), v);
}

// ---------------------------------------------------------------------------
// Model construction
// ---------------------------------------------------------------------------

TransformerModel::TransformerModel(const ModelConfig& cfg, std::mt19937& gen) : cfg_(cfg) {
    cfg_.validate();
    const float wstd = 0.02f;
    const int64_t d = cfg_.d_model;

    tok_emb_ = Tensor::randn({cfg_.vocab, d}, gen, wstd).set_requires_grad(true);
    pos_emb_ = Tensor::randn({cfg_.max_seq, d}, gen, wstd).set_requires_grad(true);

    layers_.resize(static_cast<size_t>(cfg_.n_layers));
    for (auto& l : layers_) {
        l.ln1_gamma = Tensor::full({d}, 1.0f).set_requires_grad(true);
        l.ln1_beta = Tensor::zeros({d}).set_requires_grad(true);
        l.wq = Tensor::randn({d, d}, gen, wstd).set_requires_grad(true);
        l.wk = Tensor::randn({d, d}, gen, wstd).set_requires_grad(true);
        l.wv = Tensor::randn({d, d}, gen, wstd).set_requires_grad(true);
        l.wo = Tensor::randn({d, d}, gen, wstd).set_requires_grad(true);
        l.ln2_gamma = Tensor::full({d}, 1.0f).set_requires_grad(true);
        l.ln2_beta = Tensor::zeros({d}).set_requires_grad(true);
        l.ffn_w1 = Tensor::randn({d, cfg_.d_ff}, gen, wstd).set_requires_grad(true);
        l.ffn_b1 = Tensor::zeros({cfg_.d_ff}).set_requires_grad(true);
        l.ffn_w2 = Tensor::randn({cfg_.d_ff, d}, gen, wstd).set_requires_grad(true);
        l.ffn_b2 = Tensor::zeros({d}).set_requires_grad(true);
    }
    lnf_gamma_ = Tensor::full({d}, 1.0f).set_requires_grad(true);
    lnf_beta_ = Tensor::zeros({d}).set_requires_grad(true);
    w_out_ = Tensor::randn({d, cfg_.vocab}, gen, wstd).set_requires_grad(true);
}

int64_t TransformerModel::parameter_count(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t d = cfg.d_model;
    const int64_t per_layer = 2 * d            // ln1
                              + 4 * d * d      // wq, wk, wv, wo
                              + 2 * d          // ln2
                              + d * cfg.d_ff + cfg.d_ff + cfg.d_ff * d + d;
    return cfg.vocab * d + cfg.max_seq * d + cfg.n_layers * per_layer + 2 * d + d * cfg.vocab;
}

std::vector<Tensor> TransformerModel::parameters() {
    std::vector<Tensor> out;
    for (auto& [_, t] : named_parameters()) out.push_back(t);
    return out;
}

std::vector<std::pair<std::string, Tensor>> TransformerModel::named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_emb", tok_emb_);
    out.emplace_back("pos_emb", pos_emb_);
    for (size_t i = 0; i < layers_.size(); ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        auto& l = layers_[i];
        out.emplace_back(p + "ln1.gamma", l.ln1_gamma);
        out.emplace_back(p + "ln1.beta", l.ln1_beta);
        out.emplace_back(p + "wq", l.wq);
        out.emplace_back(p + "wk", l.wk);
        out.emplace_back(p + "wv", l.wv);
        out.emplace_back(p + "wo", l.wo);
        out.emplace_back(p + "ln2.gamma", l.ln2_gamma);
        out.emplace_back(p + "ln2.beta", l.ln2_beta);
        out.emplace_back(p + "ffn.w1", l.ffn_w1);
        out.emplace_back(p + "ffn.b1", l.ffn_b1);
        out.emplace_back(p + "ffn.w2", l.ffn_w2);
        out.emplace_back(p + "ffn.b2", l.ffn_b2);
    }
    out.emplace_back("lnf.gamma", lnf_gamma_);
    out.emplace_back("lnf.beta", lnf_beta_);
    out.emplace_back("w_out", w_out_);
    return out;
}

Tensor& TransformerModel::parameter(const std::string& name) {
    if (name == "tok_emb") return tok_emb_;
    if (name == "pos_emb") return pos_emb_;
    if (name == "lnf.gamma") return lnf_gamma_;
    if (name == "lnf.beta") return lnf_beta_;
    if (name == "w_out") return w_out_;
    if (name.rfind("layers.", 0) == 0) {
        const size_t dot = name.find('.', 7);
        if (dot != std::string::npos) {
            const int64_t idx = std::stoll(name.substr(7, dot - 7));
            const std::string field = name.substr(dot + 1);
            auto& l = layer(idx);
            if (field == "ln1.gamma") return l.ln1_gamma;
            if (field == "ln1.beta") return l.ln1_beta;
            if (field == "wq") return l.wq;
            if (field == "wk") return l.wk;
            if (field == "wv") return l.wv;
            if (field == "wo") return l.wo;
            if (field == "ln2.gamma") return l.ln2_gamma;
            if (field == "ln2.beta") return l.ln2_beta;
            if (field == "ffn.w1") return l.ffn_w1;
            if (field == "ffn.b1") return l.ffn_b1;
            if (field == "ffn.w2") return l.ffn_w2;
            if (field == "ffn.b2") return l.ffn_b2;
        }
    }
    throw ConfigError("model: unknown parameter " + name);
}

void TransformerModel::set_trainable(bool value) {
    for (auto& [_, t] : named_parameters()) t.set_requires_grad(value);
}

TransformerModel TransformerModel::clone() const {
    TransformerModel copy;
    copy.cfg_ = cfg_;
    copy.tok_emb_ = tok_emb_.clone();
    copy.pos_emb_ = pos_emb_.clone();
    copy.layers_.resize(layers_.size());
    for (size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        auto& c = copy.layers_[i];
        c.ln1_gamma = l.ln1_gamma.clone();
        c.ln1_beta = l.ln1_beta.clone();
        c.wq = l.wq.clone();
        c.wk = l.wk.clone();
        c.wv = l.wv.clone();
        c.wo = l.wo.clone();
        c.ln2_gamma = l.ln2_gamma.clone();
        c.ln2_beta = l.ln2_beta.clone();
        c.ffn_w1 = l.ffn_w1.clone();
        c.ffn_b1 = l.ffn_b1.clone();
        c.ffn_w2 = l.ffn_w2.clone();
        c.ffn_b2 = l.ffn_b2.clone();
    }
    copy.lnf_gamma_ = lnf_gamma_.clone();
    copy.lnf_beta_ = lnf_beta_.clone();
    copy.w_out_ = w_out_.clone();
    return copy;
}

TransformerModel::LayerParams& TransformerModel::layer(int64_t i) {
    if (i < 0 || i >= static_cast<int64_t>(layers_.size()))
        throw ConfigError("model: layer index out of range");
    return layers_[static_cast<size_t>(i)];
}

const TransformerModel::LayerParams& TransformerModel::layer(int64_t i) const {
    if (i < 0 || i >= static_cast<int64_t>(layers_.size()))
        throw ConfigError("model: layer index out of range");
    return layers_[static_cast<size_t>(i)];
}

void TransformerModel::check_tokens(std::span<const int32_t> tokens) const {
    if (tokens.empty()) throw ConfigError("model: empty token sequence");
    for (int32_t t : tokens)
        if (t < 0 || t >= cfg_.vocab) throw ConfigError("model: token id out of range");
}

// ---------------------------------------------------------------------------
// Full-sequence forward (training / recompute path)
// ---------------------------------------------------------------------------

namespace {

// Per-head multi-head attention over already substituted K/V.
Tensor mha_heads(const Tensor& q, const Tensor& k_used, const Tensor& v_used,
                 int64_t n_heads, const Tensor& wo) {
    const int64_t head_dim = q.cols() / n_heads;
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    for (int64_t h = 0; h < n_heads; ++h) {
        Tensor qh = slice_cols(q, h * head_dim, (h + 1) * head_dim);
        Tensor kh = slice_cols(k_used, h * head_dim, (h + 1) * head_dim);
        Tensor vh = slice_cols(v_used, h * head_dim, (h + 1) * head_dim);
        heads.push_back(attention_head(qh, kh, vh, /*causal=*/true));
    }
    return matmul(concat_cols(heads), wo);
}

} // namespace

ForwardResult TransformerModel::forward_full(std::span<const int32_t> tokens,
                                             const ForwardOptions& opts) const {
    check_tokens(tokens);
    const int64_t t = static_cast<int64_t>(tokens.size());
    if (t > cfg_.max_seq) throw ConfigError("model: sequence exceeds max_seq");
    if (opts.reuse && opts.reuse->n_layers() != 0 &&
        (opts.reuse->n_layers() != cfg_.n_layers || opts.reuse->n_heads() != cfg_.n_heads))
        throw ConfigError("model: reuse plan extents do not match");

    const int64_t head_dim = cfg_.head_dim();
    auto ae_engaged = [&](int64_t layer) -> const AutoencoderSet::Pair* {
        if (!opts.autoencoders || !opts.autoencoders->has(layer)) return nullptr;
        if (opts.layer_filter && !opts.layer_filter->count(layer)) return nullptr;
        return &opts.autoencoders->at(layer);
    };

    Tensor x = add(gather_rows(tok_emb_, tokens), slice_rows(pos_emb_, 0, t));

    ForwardResult result;
    std::vector<Tensor> k_used_all, v_used_all; // per layer, for alias resolution
    k_used_all.reserve(layers_.size());
    v_used_all.reserve(layers_.size());

    for (int64_t li = 0; li < cfg_.n_layers; ++li) {
        const auto& l = layers_[static_cast<size_t>(li)];
        Tensor xn = layernorm(x, l.ln1_gamma, l.ln1_beta);
        Tensor q = matmul(xn, l.wq);
        Tensor k_raw = matmul(xn, l.wk);
        Tensor v_raw = matmul(xn, l.wv);

        auto substituted = [&](const Tensor& raw, KvSide side,
                               const std::vector<Tensor>& prev_used) -> Tensor {
            const AutoencoderSet::Pair* pair = ae_engaged(li);
            const Autoencoder* ae =
                pair == nullptr ? nullptr : (side == KvSide::k ? &pair->k : &pair->v);
            const bool any_alias = opts.reuse && opts.reuse->n_layers() != 0 &&
                                   opts.reuse->aliased_count(li, side) > 0;

            if (!ae && !any_alias) return raw;
            if (ae && !any_alias) return ae->decode(ae->encode(raw, opts.ae_mode), opts.ae_mode);

            // Mixed layer: codec over the non-aliased slice block, aliased
            // heads served from the previous layer's substituted tensors.
            Tensor own_block;
            std::vector<int64_t> own_heads;
            for (int64_t h = 0; h < cfg_.n_heads; ++h)
                if (!opts.reuse->aliased(li, side, h)) own_heads.push_back(h);
            if (!own_heads.empty()) {
                std::vector<Tensor> slices;
                for (int64_t h : own_heads)
                    slices.push_back(slice_cols(raw, h * head_dim, (h + 1) * head_dim));
                own_block = concat_cols(slices);
                if (ae) own_block = ae->decode(ae->encode(own_block, opts.ae_mode), opts.ae_mode);
            }

            std::vector<Tensor> parts;
            parts.reserve(static_cast<size_t>(cfg_.n_heads));
            int64_t own_slot = 0;
            for (int64_t h = 0; h < cfg_.n_heads; ++h) {
                if (opts.reuse->aliased(li, side, h)) {
                    const Tensor& prev = prev_used[static_cast<size_t>(li - 1)];
                    parts.push_back(slice_cols(prev, h * head_dim, (h + 1) * head_dim));
                } else {
                    parts.push_back(slice_cols(own_block, own_slot * head_dim, (own_slot + 1) * head_dim));
                    ++own_slot;
                }
            }
            return concat_cols(parts);
        };

        Tensor k_used = substituted(k_raw, KvSide::k, k_used_all);
        Tensor v_used = substituted(v_raw, KvSide::v, v_used_all);
        k_used_all.push_back(k_used);
        v_used_all.push_back(v_used);
        if (opts.capture_kv) result.layer_kv.push_back(LayerKV{k_raw, v_raw, k_used, v_used});

        x = add(x, mha_heads(q, k_used, v_used, cfg_.n_heads, l.wo));
        Tensor x2 = layernorm(x, l.ln2_gamma, l.ln2_beta);
        Tensor f = gelu(add_rows(matmul(x2, l.ffn_w1), l.ffn_b1));
        x = add(x, add_rows(matmul(f, l.ffn_w2), l.ffn_b2));
    }

    x = layernorm(x, lnf_gamma_, lnf_beta_);
    result.logits = matmul(x, w_out_);
    return result;
}

// ---------------------------------------------------------------------------
// Cache path
// ---------------------------------------------------------------------------

Tensor TransformerModel::run_cached(std::span<const int32_t> tokens, KVCache& cache) const {
    NoGradGuard guard;
    check_tokens(tokens);
    if (cache.n_layers() != cfg_.n_layers || cache.n_heads() != cfg_.n_heads ||
        cache.d_model() != cfg_.d_model)
        throw ConfigError("model: cache extents do not match");

    const int64_t t = static_cast<int64_t>(tokens.size());
    const int64_t p0 = cache.size(0);
    for (int64_t li = 1; li < cfg_.n_layers; ++li)
        if (cache.size(li) != p0) throw ConsistencyError("model: cache layers hold unequal positions");
    if (p0 + t > cfg_.max_seq) throw ConfigError("model: cache would exceed max_seq");

    const int64_t head_dim = cfg_.head_dim();
    const ReusePlan& plan = cache.reuse();

    Tensor x = add(gather_rows(tok_emb_, tokens), slice_rows(pos_emb_, p0, p0 + t));

    Tensor prev_k_cur, prev_v_cur; // previous layer's substituted current-step K/V
    for (int64_t li = 0; li < cfg_.n_layers; ++li) {
        const auto& l = layers_[static_cast<size_t>(li)];
        Tensor xn = layernorm(x, l.ln1_gamma, l.ln1_beta);
        Tensor q = matmul(xn, l.wq);
        Tensor k_cur = matmul(xn, l.wk);
        Tensor v_cur = matmul(xn, l.wv);

        // Aliased heads take the previous layer's current-step tensors, so
        // attention sees the same source a later read of the cache resolves to.
        if (plan.n_layers() != 0 &&
            (plan.aliased_count(li, KvSide::k) > 0 || plan.aliased_count(li, KvSide::v) > 0)) {
            auto substitute = [&](const Tensor& own, const Tensor& prev, KvSide side) {
                std::vector<Tensor> parts;
                parts.reserve(static_cast<size_t>(cfg_.n_heads));
                for (int64_t h = 0; h < cfg_.n_heads; ++h) {
                    const Tensor& src = plan.aliased(li, side, h) ? prev : own;
                    parts.push_back(slice_cols(src, h * head_dim, (h + 1) * head_dim));
                }
                return concat_cols(parts);
            };
            k_cur = substitute(k_cur, prev_k_cur, KvSide::k);
            v_cur = substitute(v_cur, prev_v_cur, KvSide::v);
        }

        for (int64_t r = 0; r < t; ++r)
            cache.append(li, k_cur.data().subspan(static_cast<size_t>(r * cfg_.d_model),
                                                  static_cast<size_t>(cfg_.d_model)),
                         v_cur.data().subspan(static_cast<size_t>(r * cfg_.d_model),
                                              static_cast<size_t>(cfg_.d_model)));

        Tensor k_att = k_cur, v_att = v_cur;
        if (p0 > 0) {
            KVCache::Read past = cache.read_prefix(li, p0);
            const Tensor kparts[] = {past.k, k_cur};
            const Tensor vparts[] = {past.v, v_cur};
            k_att = concat_rows(kparts);
            v_att = concat_rows(vparts);
        }

        x = add(x, mha_heads(q, k_att, v_att, cfg_.n_heads, l.wo));
        Tensor x2 = layernorm(x, l.ln2_gamma, l.ln2_beta);
        Tensor f = gelu(add_rows(matmul(x2, l.ffn_w1), l.ffn_b1));
        x = add(x, add_rows(matmul(f, l.ffn_w2), l.ffn_b2));

        prev_k_cur = k_cur;
        prev_v_cur = v_cur;
    }

    x = layernorm(x, lnf_gamma_, lnf_beta_);
    return matmul(x, w_out_);
}

Tensor TransformerModel::prefill(std::span<const int32_t> tokens, KVCache& cache) const {
    if (!cache.empty()) throw ConfigError("prefill: cache must be empty");
    if (static_cast<int64_t>(tokens.size()) > cfg_.max_seq)
        throw ConfigError("prefill: prompt exceeds max_seq");
    return run_cached(tokens, cache);
}

Tensor TransformerModel::decode_step(int32_t token, KVCache& cache) const {
    const int32_t toks[] = {token};
    return run_cached(toks, cache);
}

KVCache TransformerModel::make_cache(const SchemeSpec& scheme, const AutoencoderSet& aes,
                                     CacheOptions options) const {
    if (!scheme.codecs.empty() && static_cast<int64_t>(scheme.codecs.size()) != cfg_.n_layers)
        throw ConfigError("make_cache: scheme must describe every layer");
    std::vector<LayerCodecBinding> bindings;
    bindings.reserve(static_cast<size_t>(cfg_.n_layers));
    for (int64_t li = 0; li < cfg_.n_layers; ++li) {
        LayerCodecBinding b;
        b.spec = scheme.codecs.empty() ? CodecSpec{CodecKind::identity, cfg_.d_model}
                                       : scheme.codecs[static_cast<size_t>(li)];
        if (b.spec.kind != CodecKind::identity) {
            if (!aes.has(li))
                throw ConfigError("make_cache: scheme compresses layer " + std::to_string(li) +
                                  " but no autoencoders are present for it");
            const auto& pair = aes.at(li);
            b.k_codec = &pair.k;
            b.v_codec = &pair.v;
        }
        bindings.push_back(b);
    }
    return KVCache(cfg_.n_layers, cfg_.n_heads, cfg_.d_model, std::move(bindings), scheme.reuse,
                   options);
}

} // namespace kvcar
