#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <kvcar/checkpoint.hpp>
#include <kvcar/corpus.hpp>
#include <kvcar/error.hpp>
#include <kvcar/training.hpp>

#include "support/rigs.hpp"

using namespace kvcar;
using namespace kvcar::testing;

namespace {

std::string temp_file(const char* name) {
    return (std::filesystem::temp_directory_path() /
            (std::string("kvcar_art_") + name + "_" + std::to_string(::getpid())))
        .string();
}

ModelArtifact make_artifact(uint32_t seed) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_ff = 24;
    cfg.vocab = 41;
    cfg.max_seq = 12;
    std::mt19937 gen(seed);
    ModelArtifact art;
    art.model = TransformerModel(cfg, gen);
    AutoencoderConfig acfg;
    acfg.input_dim = 16;
    acfg.latent = 8;
    art.autoencoders.put(1, {Autoencoder(acfg, gen), Autoencoder(acfg, gen)});
    art.ae_latent[1] = 8;
    art.recon_floor_k[1] = 0.125;
    art.recon_floor_v[1] = 0.25;
    art.reuse = ReusePlan(2, 2);
    art.reuse.set_aliased(1, KvSide::v, 0, true);
    art.seed = 777;
    return art;
}

} // namespace

TEST_CASE("checkpoint round trip preserves every tensor and the metadata") {
    ModelArtifact art = make_artifact(11);
    const std::string path = temp_file("ckpt");
    save_artifact(path, art);
    ModelArtifact loaded = load_artifact(path);

    CHECK(loaded.model.config() == art.model.config());
    for (auto& [name, t] : art.model.named_parameters())
        CHECK(data_hash(loaded.model.parameter(name)) == data_hash(t));
    REQUIRE(loaded.autoencoders.has(1));
    for (auto& [name, t] : art.autoencoders.at(1).k.named_tensors())
        CHECK(data_hash(loaded.autoencoders.at(1).k.tensor(name)) == data_hash(t));
    CHECK(loaded.reuse == art.reuse);
    CHECK(loaded.ae_latent == art.ae_latent);
    CHECK(loaded.recon_floor_k == art.recon_floor_k);
    CHECK(loaded.recon_floor_v == art.recon_floor_v);
    CHECK(loaded.seed == 777);

    // Behavioral equality: same forward output.
    std::vector<int32_t> tokens{1, 2, 3, 5, 8};
    CHECK(data_hash(loaded.model.forward_full(tokens).logits) ==
          data_hash(art.model.forward_full(tokens).logits));
    std::remove(path.c_str());
}

TEST_CASE("checkpoint loading rejects garbage") {
    const std::string path = temp_file("junk");
    {
        std::ofstream out(path, std::ios::binary);
        out << "not a checkpoint";
    }
    CHECK_THROWS_AS(load_artifact(path), IoError);
    CHECK_THROWS_AS(load_artifact(path + ".does_not_exist"), IoError);
    std::remove(path.c_str());
}

TEST_CASE("artifact scheme construction and mismatch errors") {
    ModelArtifact art = make_artifact(13);
    SchemeSpec spec = art.scheme(CodecKind::autoencoder, true);
    CHECK(spec.codecs[0].kind == CodecKind::identity);
    CHECK(spec.codecs[1].kind == CodecKind::autoencoder);
    CHECK(spec.codecs[1].stored_dim == 8);
    CHECK(spec.reuse.aliased(1, KvSide::v, 0));

    ModelArtifact bare = make_artifact(17);
    bare.autoencoders = AutoencoderSet{};
    bare.ae_latent.clear();
    bare.reuse = ReusePlan{};
    CHECK_THROWS_AS(bare.scheme(CodecKind::autoencoder, false), ConfigError);
    CHECK_THROWS_AS(bare.scheme(CodecKind::identity, true), ConfigError);
    CHECK(bare.scheme(CodecKind::identity, false).codecs.size() == 2);
}

TEST_CASE("head stats JSON round trip") {
    HeadStats stats;
    stats.n_layers = 3;
    stats.n_heads = 2;
    stats.batches = 5;
    stats.distance = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
    const std::string path = temp_file("stats");
    save_head_stats(path, stats);
    HeadStats loaded = load_head_stats(path);
    CHECK(loaded.n_layers == 3);
    CHECK(loaded.n_heads == 2);
    CHECK(loaded.batches == 5);
    CHECK(loaded.distance == stats.distance);
    CHECK(loaded.at(2, KvSide::v, 1) == 0.8);
    std::remove(path.c_str());
}

TEST_CASE("corpus split is deterministic and windows stay in range") {
    Corpus corpus = make_toy_corpus(4096, 3);
    auto a = corpus.split_windows(32, 0.1, 99);
    auto b = corpus.split_windows(32, 0.1, 99);
    CHECK(a.train == b.train);
    CHECK(a.heldout == b.heldout);
    auto c = corpus.split_windows(32, 0.1, 100);
    CHECK(a.train != c.train); // different seed shuffles differently

    CHECK(a.train.size() + a.heldout.size() == 4096 / 32);
    for (int64_t off : a.train) {
        auto tokens = corpus.window_tokens(off, 32);
        CHECK(tokens.size() == 33);
        CHECK(tokens[0] == Corpus::kBos);
        for (int32_t t : tokens) CHECK(t < Corpus::kVocab);
    }
}

TEST_CASE("corpus loading errors and window bounds") {
    CHECK_THROWS_AS(Corpus::load("/nonexistent/kvcar/corpus.bin"), IoError);
    Corpus tiny = Corpus::from_bytes({1, 2, 3});
    CHECK_THROWS_AS(tiny.split_windows(8, 0.1, 0), ConfigError);
    CHECK_THROWS_AS(tiny.window_tokens(2, 4), ConfigError);
}
