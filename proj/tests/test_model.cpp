#include <doctest.h>

#include <cmath>
#include <random>

#include <kvcar/error.hpp>
#include <kvcar/model.hpp>

#include "support/gradcheck.hpp"
#include "support/reference_model.hpp"
#include "support/rigs.hpp"

using namespace kvcar;
using namespace kvcar::testing;

namespace {

std::vector<int32_t> random_tokens(std::mt19937& gen, int64_t n, int64_t vocab) {
    std::uniform_int_distribution<int32_t> dist(0, static_cast<int32_t>(vocab - 1));
    std::vector<int32_t> tokens(static_cast<size_t>(n));
    for (auto& t : tokens) t = dist(gen);
    return tokens;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double mx = 0;
    for (int64_t i = 0; i < a.numel(); ++i)
        mx = std::max(mx, std::abs(double(a.data()[i]) - b.data()[i]));
    return mx;
}

} // namespace

TEST_CASE("attention over a single position returns the value row exactly") {
    std::mt19937 gen(3);
    Tensor q = Tensor::randn({1, 4}, gen, 1.0f);
    Tensor k = Tensor::randn({1, 4}, gen, 1.0f);
    Tensor v = Tensor::randn({1, 4}, gen, 1.0f);
    Tensor out = attention_head(q, k, v, true);
    for (int j = 0; j < 4; ++j) CHECK(out.at(0, j) == v.at(0, j));
}

TEST_CASE("attention saturates onto the matching key") {
    // One key aligned with the query at a large scale, the rest orthogonal.
    Tensor q = Tensor::from_data({1, 2}, {10.0f, 0.0f});
    Tensor k = Tensor::from_data({3, 2}, {0, 1, 30, 0, 0, -1});
    Tensor v = Tensor::from_data({3, 2}, {1, 1, 5, -5, 2, 2});
    Tensor out = attention_head(q, k, v, false);
    CHECK(out.at(0, 0) == doctest::Approx(5.0).epsilon(1e-4));
    CHECK(out.at(0, 1) == doctest::Approx(-5.0).epsilon(1e-4));
}

TEST_CASE("causal attention matches per-position recomputation") {
    std::mt19937 gen(5);
    const int64_t t = 3, dk = 4;
    Tensor q = Tensor::randn({t, dk}, gen, 1.0f);
    Tensor k = Tensor::randn({t, dk}, gen, 1.0f);
    Tensor v = Tensor::randn({t, dk}, gen, 1.0f);
    Tensor full = attention_head(q, k, v, true);
    for (int64_t i = 0; i < t; ++i) {
        Tensor qi = slice_rows(q, i, i + 1);
        Tensor ki = slice_rows(k, 0, i + 1);
        Tensor vi = slice_rows(v, 0, i + 1);
        Tensor row = attention_head(qi, ki, vi, true);
        for (int64_t j = 0; j < dk; ++j)
            CHECK(full.at(i, j) == doctest::Approx(row.at(0, j)).epsilon(1e-6));
    }
}

TEST_CASE("attention rejects mismatched widths and misaligned causal shapes") {
    CHECK_THROWS_AS(
        attention_head(Tensor::zeros({2, 4}), Tensor::zeros({2, 3}), Tensor::zeros({2, 3}), false),
        ShapeError);
    CHECK_THROWS_AS(
        attention_head(Tensor::zeros({3, 4}), Tensor::zeros({2, 4}), Tensor::zeros({2, 4}), true),
        ShapeError);
}

TEST_CASE("parameter count is a pure function of the config") {
    ModelConfig cfg;
    cfg.n_layers = 3;
    cfg.n_heads = 4;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.vocab = 19;
    cfg.max_seq = 12;
    std::mt19937 gen(7);
    TransformerModel model(cfg, gen);
    int64_t total = 0;
    for (auto& [_, t] : model.named_parameters()) total += t.numel();
    CHECK(total == TransformerModel::parameter_count(cfg));
}

TEST_CASE("config validation") {
    ModelConfig cfg;
    cfg.d_model = 10;
    cfg.n_heads = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.d_model = 8;
    cfg.max_seq = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("prefill populates every layer and equals the cacheless forward") {
    ModelConfig cfg;
    cfg.n_layers = 3;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.vocab = 31;
    cfg.max_seq = 16;
    std::mt19937 gen(11);
    TransformerModel model(cfg, gen);
    const auto tokens = random_tokens(gen, 9, cfg.vocab);

    KVCache cache = model.make_cache(SchemeSpec::identity(cfg.n_layers, cfg.d_model), {});
    Tensor cached_logits = model.prefill(tokens, cache);
    for (int64_t li = 0; li < cfg.n_layers; ++li) CHECK(cache.size(li) == 9);

    Tensor full_logits = model.forward_full(tokens).logits;
    CHECK(max_abs_diff(cached_logits, full_logits) < 1e-5);

    CHECK_THROWS_AS(model.prefill(tokens, cache), ConfigError); // cache no longer empty
}

TEST_CASE("prefill+decode equals full recompute under the identity codec") {
    std::mt19937 gen(13);
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_ff = 24;
    cfg.vocab = 23;
    cfg.max_seq = 20;
    TransformerModel model(cfg, gen);
    auto prompt = random_tokens(gen, 6, cfg.vocab);

    KVCache cache = model.make_cache(SchemeSpec::identity(cfg.n_layers, cfg.d_model), {});
    Tensor logits = model.prefill(prompt, cache);
    std::vector<int32_t> sequence = prompt;
    for (int step = 0; step < 5; ++step) {
        // Greedy next token from the last row.
        int32_t best = 0;
        float best_v = logits.at(logits.rows() - 1, 0);
        for (int64_t j = 1; j < cfg.vocab; ++j)
            if (logits.at(logits.rows() - 1, j) > best_v) {
                best_v = logits.at(logits.rows() - 1, j);
                best = static_cast<int32_t>(j);
            }
        sequence.push_back(best);

        Tensor recompute = model.forward_full(sequence).logits;
        logits = model.decode_step(best, cache);
        Tensor last = slice_rows(recompute, recompute.rows() - 1, recompute.rows());
        CHECK(max_abs_diff(logits, last) < 1e-5);
        for (int64_t li = 0; li < cfg.n_layers; ++li)
            CHECK(cache.size(li) == static_cast<int64_t>(sequence.size()));
    }
}

TEST_CASE("single-token prefill equals a decode step from an empty cache") {
    std::mt19937 gen(53);
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_ff = 24;
    cfg.vocab = 19;
    cfg.max_seq = 8;
    TransformerModel model(cfg, gen);
    KVCache a = model.make_cache(SchemeSpec::identity(cfg.n_layers, cfg.d_model), {});
    KVCache b = model.make_cache(SchemeSpec::identity(cfg.n_layers, cfg.d_model), {});
    const int32_t token[] = {7};
    CHECK(data_hash(model.prefill(token, a)) == data_hash(model.decode_step(7, b)));
}

TEST_CASE("decode is deterministic and respects max_seq") {
    std::mt19937 gen(17);
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.vocab = 11;
    cfg.max_seq = 3;
    TransformerModel model(cfg, gen);

    KVCache a = model.make_cache(SchemeSpec::identity(1, 8), {});
    KVCache b = model.make_cache(SchemeSpec::identity(1, 8), {});
    Tensor la = model.decode_step(4, a);
    Tensor lb = model.decode_step(4, b);
    CHECK(data_hash(la) == data_hash(lb));

    model.decode_step(5, a);
    model.decode_step(6, a);
    CHECK_THROWS_AS(model.decode_step(7, a), ConfigError); // max_seq reached
}

TEST_CASE("single-head attention uses the captured K/V verbatim") {
    std::mt19937 gen(19);
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.vocab = 13;
    cfg.max_seq = 8;
    TransformerModel model(cfg, gen);
    const auto tokens = random_tokens(gen, 5, cfg.vocab);

    ForwardOptions opts;
    opts.capture_kv = true;
    ForwardResult res = model.forward_full(tokens, opts);

    const auto& l = model.layer(0);
    Tensor x = add(gather_rows(model.parameter("tok_emb"), tokens),
                   slice_rows(model.parameter("pos_emb"), 0, 5));
    Tensor xn = layernorm(x, l.ln1_gamma, l.ln1_beta);
    CHECK(data_hash(res.layer_kv[0].k_used) == data_hash(matmul(xn, l.wk)));
    CHECK(data_hash(res.layer_kv[0].v_used) == data_hash(matmul(xn, l.wv)));
}

TEST_CASE("causality: perturbing token j changes logits only at positions >= j") {
    std::mt19937 gen(23);
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_ff = 24;
    cfg.vocab = 29;
    cfg.max_seq = 12;
    TransformerModel model(cfg, gen);
    auto tokens = random_tokens(gen, 8, cfg.vocab);
    Tensor base = model.forward_full(tokens).logits;

    for (int64_t j : {2, 5, 7}) {
        auto perturbed = tokens;
        perturbed[static_cast<size_t>(j)] =
            static_cast<int32_t>((perturbed[static_cast<size_t>(j)] + 1) % cfg.vocab);
        Tensor out = model.forward_full(perturbed).logits;
        for (int64_t i = 0; i < j; ++i)
            for (int64_t c = 0; c < cfg.vocab; ++c) CHECK(out.at(i, c) == base.at(i, c));
        double diff_at_j = 0;
        for (int64_t c = 0; c < cfg.vocab; ++c)
            diff_at_j = std::max(diff_at_j, std::abs(double(out.at(j, c)) - base.at(j, c)));
        CHECK(diff_at_j > 0.0);
    }
}

TEST_CASE("head split/concat round trip recovers the tensor exactly") {
    std::mt19937 gen(29);
    const int64_t h = 4, d = 32;
    Tensor x = Tensor::randn({6, d}, gen, 1.0f);
    std::vector<Tensor> heads;
    for (int64_t i = 0; i < h; ++i) heads.push_back(slice_cols(x, i * (d / h), (i + 1) * (d / h)));
    CHECK(data_hash(concat_cols(heads)) == data_hash(x));
}

TEST_CASE("token validation and overlong prompts") {
    std::mt19937 gen(31);
    ModelConfig cfg;
    cfg.vocab = 10;
    cfg.max_seq = 4;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.n_layers = 1;
    TransformerModel model(cfg, gen);
    std::vector<int32_t> bad{3, 10};
    CHECK_THROWS_AS(model.forward_full(bad), ConfigError);
    auto long_prompt = random_tokens(gen, 5, cfg.vocab);
    CHECK_THROWS_AS(model.forward_full(long_prompt), ConfigError);
    KVCache cache = model.make_cache(SchemeSpec::identity(1, 8), {});
    CHECK_THROWS_AS(model.prefill(long_prompt, cache), ConfigError);
}

TEST_CASE("reuse substitution feeds layer n the tensors of layer n-1") {
    // Duplicated-layer rig: K/V identical across layers, so substituted and
    // raw tensors agree bitwise and logits are unchanged by full reuse.
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_ff = 24;
    cfg.vocab = 17;
    cfg.max_seq = 10;
    TransformerModel model = make_duplicated_layer_model(cfg, 37);
    std::mt19937 gen(41);
    auto tokens = random_tokens(gen, 7, cfg.vocab);

    ReusePlan plan(cfg.n_layers, cfg.n_heads);
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
        plan.set_aliased(1, KvSide::k, h, true);
        plan.set_aliased(1, KvSide::v, h, true);
    }

    Tensor base = model.forward_full(tokens).logits;
    ForwardOptions opts;
    opts.reuse = &plan;
    opts.capture_kv = true;
    ForwardResult reused = model.forward_full(tokens, opts);
    CHECK(max_abs_diff(base, reused.logits) < 1e-5);
    // Substitution correctness: layer 1 consumed layer 0's K bitwise.
    CHECK(data_hash(reused.layer_kv[1].k_used) == data_hash(reused.layer_kv[0].k_used));

    // The cached path agrees with the substituted forward.
    SchemeSpec scheme = SchemeSpec::identity(cfg.n_layers, cfg.d_model);
    scheme.reuse = plan;
    KVCache cache = model.make_cache(scheme, {});
    Tensor cached = model.prefill(tokens, cache);
    CHECK(max_abs_diff(cached, reused.logits) < 1e-5);
}

TEST_CASE("autoencoder codec in the cache path matches the substituted forward") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.vocab = 19;
    cfg.max_seq = 12;
    std::mt19937 gen(43);
    TransformerModel model(cfg, gen);
    auto tokens = random_tokens(gen, 6, cfg.vocab);

    // Identity-rig codecs on layer 1: lossless, so the cached path must match
    // the plain forward within float noise even though every read decodes.
    AutoencoderSet aes;
    aes.put(1, {make_identity_autoencoder(cfg.d_model), make_identity_autoencoder(cfg.d_model)});
    SchemeSpec scheme = SchemeSpec::identity(cfg.n_layers, cfg.d_model);
    scheme.codecs[1] = CodecSpec{CodecKind::autoencoder, cfg.d_model};

    KVCache cache = model.make_cache(scheme, aes);
    Tensor prefill_logits = model.prefill(tokens, cache);
    Tensor plain = model.forward_full(tokens).logits;
    CHECK(max_abs_diff(prefill_logits, plain) < 1e-4);

    Tensor step = model.decode_step(3, cache);
    auto extended = tokens;
    extended.push_back(3);
    Tensor full = model.forward_full(extended).logits;
    CHECK(max_abs_diff(step, slice_rows(full, full.rows() - 1, full.rows())) < 1e-4);
}

TEST_CASE("full-model gradients match the double-precision FD oracle") {
    std::mt19937 gen(47);
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.vocab = 13;
    cfg.max_seq = 8;
    TransformerModel model(cfg, gen);
    auto tokens = random_tokens(gen, 7, cfg.vocab);
    std::vector<int32_t> inputs(tokens.begin(), tokens.end() - 1);
    std::vector<int32_t> targets(tokens.begin() + 1, tokens.end());

    Tensor loss = cross_entropy(model.forward_full(inputs).logits, targets);
    backward(loss);

    RefModel ref = RefModel::from(model);
    CHECK(std::abs(double(loss.item()) - ref.ce_loss(inputs, targets)) < 1e-4);

    for (auto& [name, param] : model.named_parameters()) {
        std::vector<std::vector<double>> wrapped{ref.params.at(name)};
        auto fd = fd_gradient(
            [&](const std::vector<std::vector<double>>& p) {
                RefModel probe = ref;
                probe.params[name] = p[0];
                return probe.ce_loss(inputs, targets);
            },
            wrapped, 0, 1e-3);
        const auto ad = to_double(param.grad());
        // Unused embedding rows have exactly zero gradient on both sides.
        if (l2_norm(fd) == 0.0 && l2_norm(ad) == 0.0) continue;
        CHECK_MESSAGE(rel_error(ad, fd) < 1e-3, "gradient mismatch for ", name);
    }
}
