// Decode-step cost under the different cache codecs. The interesting
// comparison is identity vs autoencoder vs autoencoder+int8, and
// recompute-on-read vs memoized decoding as the context grows.

#include <benchmark/benchmark.h>

#include <random>

#include <kvcar/model.hpp>

using namespace kvcar;

namespace {

struct Fixture {
    ModelConfig cfg;
    TransformerModel model;
    AutoencoderSet aes;

    Fixture() {
        cfg.n_layers = 4;
        cfg.n_heads = 4;
        cfg.d_model = 64;
        cfg.d_ff = 128;
        cfg.vocab = 257;
        cfg.max_seq = 512;
        std::mt19937 gen(7);
        model = TransformerModel(cfg, gen);
        for (int64_t layer = 0; layer < cfg.n_layers; ++layer) {
            AutoencoderConfig acfg;
            acfg.input_dim = cfg.d_model;
            acfg.latent = cfg.d_model / 2;
            aes.put(layer, {Autoencoder(acfg, gen), Autoencoder(acfg, gen)});
        }
    }

    SchemeSpec scheme(CodecKind kind) const {
        SchemeSpec s = SchemeSpec::identity(cfg.n_layers, cfg.d_model);
        if (kind != CodecKind::identity)
            for (auto& c : s.codecs) c = CodecSpec{kind, cfg.d_model / 2};
        return s;
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

void decode_tokens(benchmark::State& state, CodecKind kind, bool memoize) {
    auto& f = fixture();
    const int64_t context = state.range(0);
    CacheOptions opts;
    opts.memoize_decoded = memoize;
    for (auto _ : state) {
        KVCache cache = f.model.make_cache(f.scheme(kind), f.aes, opts);
        for (int64_t i = 0; i < context; ++i) {
            Tensor logits = f.model.decode_step(static_cast<int32_t>(i % 251), cache);
            benchmark::DoNotOptimize(logits.data().data());
        }
    }
    state.SetItemsProcessed(state.iterations() * context);
}

void BM_DecodeIdentity(benchmark::State& state) {
    decode_tokens(state, CodecKind::identity, false);
}
void BM_DecodeAutoencoder(benchmark::State& state) {
    decode_tokens(state, CodecKind::autoencoder, false);
}
void BM_DecodeAutoencoderMemoized(benchmark::State& state) {
    decode_tokens(state, CodecKind::autoencoder, true);
}
void BM_DecodeAutoencoderInt8(benchmark::State& state) {
    decode_tokens(state, CodecKind::autoencoder_int8, false);
}

BENCHMARK(BM_DecodeIdentity)->Arg(32)->Arg(128);
BENCHMARK(BM_DecodeAutoencoder)->Arg(32)->Arg(128);
BENCHMARK(BM_DecodeAutoencoderMemoized)->Arg(32)->Arg(128);
BENCHMARK(BM_DecodeAutoencoderInt8)->Arg(32)->Arg(128);

} // namespace

BENCHMARK_MAIN();
