#pragma once
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kvcar/autoencoder.hpp"
#include "kvcar/kvcache.hpp"
#include "kvcar/tensor.hpp"

namespace kvcar {

struct ModelConfig {
    int64_t n_layers = 2;
    int64_t n_heads = 2;
    int64_t d_model = 32;
    int64_t d_ff = 64;
    int64_t vocab = 257;
    int64_t max_seq = 64;

    int64_t head_dim() const { return d_model / n_heads; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Trained K/V compressor pairs keyed by layer.
class AutoencoderSet {
  public:
    struct Pair {
        Autoencoder k;
        Autoencoder v;
    };

    bool has(int64_t layer) const { return pairs_.count(layer) != 0; }
    bool empty() const { return pairs_.empty(); }
    size_t size() const { return pairs_.size(); }
    Pair& at(int64_t layer);
    const Pair& at(int64_t layer) const;
    void put(int64_t layer, Pair pair) { pairs_[layer] = std::move(pair); }
    void erase(int64_t layer) { pairs_.erase(layer); }
    std::vector<int64_t> layers() const;
    AutoencoderSet clone() const;

  private:
    std::map<int64_t, Pair> pairs_;
};

// Causal scaled dot-product attention for one head:
// softmax(q·kᵀ/√dk)·v. With causal=true the query suffix is aligned to the
// end of the keys: query i attends to key positions ≤ (s − t) + i.
Tensor attention_head(const Tensor& q, const Tensor& k, const Tensor& v, bool causal);

// Options for the cacheless full-sequence forward used by training and the
// recompute oracle. Engaged layers substitute K/V with their codec
// reconstruction at every position; the reuse plan substitutes aliased head
// slices with the previous layer's (post-codec) tensors.
struct ForwardOptions {
    const AutoencoderSet* autoencoders = nullptr;
    const std::set<int64_t>* layer_filter = nullptr; // subset of autoencoders to engage
    Mode ae_mode = Mode::train;
    const ReusePlan* reuse = nullptr;
    bool capture_kv = false;
};

struct LayerKV {
    Tensor k_raw; // projection output before any codec/substitution
    Tensor v_raw;
    Tensor k_used; // what attention consumed
    Tensor v_used;
};

struct ForwardResult {
    Tensor logits; // [t × vocab]
    std::vector<LayerKV> layer_kv;
};

// Decoder-only transformer: learned token + absolute position embeddings,
// pre-layernorm residual blocks (attention, then a GELU feed-forward), a
// final layernorm, and an untied output projection. Prefill and decode run
// all K/V traffic through a KVCache; the current step's K/V take part in
// attention at full dimension and are also written through the codec, so
// later steps see only the decoded form.
class TransformerModel {
  public:
    TransformerModel() = default;
    TransformerModel(const ModelConfig& cfg, std::mt19937& gen);

    const ModelConfig& config() const { return cfg_; }
    static int64_t parameter_count(const ModelConfig& cfg);

    std::vector<Tensor> parameters();
    std::vector<std::pair<std::string, Tensor>> named_parameters();
    Tensor& parameter(const std::string& name);
    void set_trainable(bool value);
    TransformerModel clone() const;

    ForwardResult forward_full(std::span<const int32_t> tokens, const ForwardOptions& opts = {}) const;

    // Cache path (no gradients). prefill requires an empty cache and returns
    // logits for every prompt position; decode_step appends one position per
    // layer and returns the next-token logits.
    Tensor prefill(std::span<const int32_t> tokens, KVCache& cache) const;
    Tensor decode_step(int32_t token, KVCache& cache) const;

    // Builds a cache whose codec bindings follow `scheme`. Layers with a
    // non-identity codec must have matching autoencoders in `aes`.
    KVCache make_cache(const SchemeSpec& scheme, const AutoencoderSet& aes,
                       CacheOptions options = {}) const;

    struct LayerParams {
        Tensor ln1_gamma, ln1_beta;
        Tensor wq, wk, wv, wo;
        Tensor ln2_gamma, ln2_beta;
        Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };
    LayerParams& layer(int64_t i);
    const LayerParams& layer(int64_t i) const;

  private:
    struct StepState; // one forward step shared across layers (cache path)
    Tensor run_cached(std::span<const int32_t> tokens, KVCache& cache) const;
    void check_tokens(std::span<const int32_t> tokens) const;

    ModelConfig cfg_;
    Tensor tok_emb_; // [vocab × D]
    Tensor pos_emb_; // [max_seq × D]
    std::vector<LayerParams> layers_;
    Tensor lnf_gamma_, lnf_beta_;
    Tensor w_out_; // [D × vocab]
};

} // namespace kvcar
