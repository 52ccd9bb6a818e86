#include "kvcar/eval.hpp"

#include <cmath>

#include "kvcar/error.hpp"

namespace kvcar {

namespace {

// Stable −log softmax(logits)[target] in double.
double nll_of_row(std::span<const float> row, int32_t target) {
    double mx = row[0];
    for (float v : row) mx = std::max(mx, double(v));
    double sum = 0.0;
    for (float v : row) sum += std::exp(double(v) - mx);
    return mx + std::log(sum) - double(row[target]);
}

} // namespace

EvalReport evaluate_cached(const ModelArtifact& artifact, const Corpus& corpus,
                           const TrainConfig& cfg, const EvalScheme& scheme) {
    cfg.validate();
    const SchemeSpec spec = artifact.scheme(scheme.kind, scheme.use_reuse, scheme.layer_filter());
    const auto split = corpus.split_windows(cfg.window, cfg.heldout_fraction, cfg.seed);
    const auto& offsets = split.heldout.empty() ? split.train : split.heldout;

    EvalReport report;
    double total = 0.0;
    for (int64_t off : offsets) {
        const auto tokens = corpus.window_tokens(off, cfg.window);
        KVCache cache = artifact.model.make_cache(spec, artifact.autoencoders);
        for (size_t i = 0; i + 1 < tokens.size(); ++i) {
            Tensor logits = artifact.model.decode_step(tokens[i], cache);
            total += nll_of_row(logits.data(), tokens[i + 1]);
            report.tokens++;
        }
        report.windows++;
    }
    report.mean_ce = report.tokens == 0 ? 0.0 : total / static_cast<double>(report.tokens);
    report.perplexity = std::exp(report.mean_ce);

    AccountingQuery aq;
    aq.n_layers = artifact.model.config().n_layers;
    aq.n_heads = artifact.model.config().n_heads;
    aq.d_model = artifact.model.config().d_model;
    aq.seq_len = cfg.window;
    aq.batch = 1;
    aq.bytes_per_element = 4; // float32 storage
    aq.scheme = spec;
    const CacheStats stats = bytes_used(aq);
    report.savings_fraction = stats.savings_fraction;
    report.kv_bytes_per_window = stats.total_bytes;
    return report;
}

double perplexity_recompute(const ModelArtifact& artifact, const Corpus& corpus,
                            const TrainConfig& cfg, const EvalScheme& scheme) {
    cfg.validate();
    // Validates the scheme/checkpoint pairing the same way the cached path does.
    (void)artifact.scheme(scheme.kind, scheme.use_reuse, scheme.layer_filter());
    const std::set<int64_t>* filter = scheme.layer_filter();
    std::set<int64_t> compressed;
    if (scheme.kind != CodecKind::identity) {
        for (const auto& [layer, _] : artifact.ae_latent)
            if (!filter || filter->count(layer)) compressed.insert(layer);
    }
    const double ce = heldout_ce(artifact.model,
                                 scheme.kind == CodecKind::identity ? nullptr : &artifact.autoencoders,
                                 scheme.kind == CodecKind::identity ? nullptr : &compressed,
                                 scheme.use_reuse ? &artifact.reuse : nullptr, corpus, cfg);
    return std::exp(ce);
}

} // namespace kvcar
