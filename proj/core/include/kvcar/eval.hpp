#pragma once
#include <cstdint>
#include <optional>
#include <set>

#include "kvcar/checkpoint.hpp"
#include "kvcar/corpus.hpp"
#include "kvcar/training.hpp"

namespace kvcar {

// Runtime scheme selection for evaluation. `kind` picks the codec for the
// checkpoint's compressed layers (identity ignores them); `use_reuse`
// attaches the stored plan. Mismatches with the checkpoint raise ConfigError.
struct EvalScheme {
    CodecKind kind = CodecKind::identity;
    bool use_reuse = false;
    std::optional<std::set<int64_t>> layers; // restrict compressed layers

    const std::set<int64_t>* layer_filter() const { return layers ? &*layers : nullptr; }
};

struct EvalReport {
    double mean_ce = 0.0;
    double perplexity = 0.0;
    int64_t windows = 0;
    int64_t tokens = 0;
    double savings_fraction = 0.0; // accounting vs the uncompressed cache
    uint64_t kv_bytes_per_window = 0;
};

// Held-out perplexity through the cached decode path: each window is fed
// token by token through decode_step, exercising the codec chain on every
// read. Perplexity is exp(mean CE).
EvalReport evaluate_cached(const ModelArtifact& artifact, const Corpus& corpus,
                           const TrainConfig& cfg, const EvalScheme& scheme);

// Same slice through the cacheless full-sequence forward (eval-mode codecs):
// the recompute reference for the cached path.
double perplexity_recompute(const ModelArtifact& artifact, const Corpus& corpus,
                            const TrainConfig& cfg, const EvalScheme& scheme);

} // namespace kvcar
