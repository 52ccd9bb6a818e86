#include "kvcar/checkpoint.hpp"

#include <fstream>
#include <random>

#include <json.hpp>

#include "kvcar/error.hpp"

namespace kvcar {

using nlohmann::json;

namespace {

constexpr uint32_t kMagic = 0x5243564bu; // "KVCR"
constexpr uint32_t kVersion = 1;

json config_json(const ModelConfig& cfg) {
    return json{{"n_layers", cfg.n_layers}, {"n_heads", cfg.n_heads}, {"d_model", cfg.d_model},
                {"d_ff", cfg.d_ff},         {"vocab", cfg.vocab},     {"max_seq", cfg.max_seq}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers").get<int64_t>();
    cfg.n_heads = j.at("n_heads").get<int64_t>();
    cfg.d_model = j.at("d_model").get<int64_t>();
    cfg.d_ff = j.at("d_ff").get<int64_t>();
    cfg.vocab = j.at("vocab").get<int64_t>();
    cfg.max_seq = j.at("max_seq").get<int64_t>();
    cfg.validate();
    return cfg;
}

json ae_config_json(const AutoencoderConfig& cfg) {
    return json{{"input_dim", cfg.input_dim},
                {"hidden", cfg.hidden},
                {"latent", cfg.latent},
                {"leaky_slope", cfg.leaky_slope}};
}

AutoencoderConfig ae_config_from_json(const json& j) {
    AutoencoderConfig cfg;
    cfg.input_dim = j.at("input_dim").get<int64_t>();
    cfg.hidden = j.at("hidden").get<int64_t>();
    cfg.latent = j.at("latent").get<int64_t>();
    cfg.leaky_slope = j.at("leaky_slope").get<float>();
    return cfg;
}

} // namespace

SchemeSpec ModelArtifact::scheme(CodecKind kind, bool with_reuse,
                                 const std::set<int64_t>* layer_filter) const {
    const auto& cfg = model.config();
    SchemeSpec spec = SchemeSpec::identity(cfg.n_layers, cfg.d_model);
    if (kind != CodecKind::identity) {
        if (autoencoders.empty())
            throw ConfigError("scheme/checkpoint mismatch: no autoencoders stored");
        for (const auto& [layer, latent] : ae_latent) {
            if (layer_filter && !layer_filter->count(layer)) continue;
            if (!autoencoders.has(layer))
                throw ConfigError("scheme/checkpoint mismatch: missing autoencoders for layer " +
                                  std::to_string(layer));
            spec.codecs[static_cast<size_t>(layer)] = CodecSpec{kind, latent};
        }
    }
    if (with_reuse) {
        if (reuse.n_layers() == 0)
            throw ConfigError("scheme/checkpoint mismatch: no reuse plan stored");
        spec.reuse = reuse;
    }
    return spec;
}

void save_artifact(const std::string& path, ModelArtifact& artifact) {
    json manifest;
    manifest["format_version"] = kVersion;
    manifest["model_config"] = config_json(artifact.model.config());
    manifest["seed"] = artifact.seed;

    std::vector<std::pair<std::string, Tensor>> tensors = artifact.model.named_parameters();
    json ae_list = json::array();
    for (int64_t layer : artifact.autoencoders.layers()) {
        auto& pair = artifact.autoencoders.at(layer);
        ae_list.push_back(json{{"layer", layer},
                               {"k", ae_config_json(pair.k.config())},
                               {"v", ae_config_json(pair.v.config())}});
        const std::string prefix = "ae." + std::to_string(layer) + ".";
        for (auto& [name, t] : pair.k.named_tensors()) tensors.emplace_back(prefix + "k." + name, t);
        for (auto& [name, t] : pair.v.named_tensors()) tensors.emplace_back(prefix + "v." + name, t);
    }
    manifest["autoencoders"] = ae_list;

    if (artifact.reuse.n_layers() != 0) {
        manifest["reuse"] = json{{"n_layers", artifact.reuse.n_layers()},
                                 {"n_heads", artifact.reuse.n_heads()},
                                 {"bitmap", artifact.reuse.to_bitmap()}};
    } else {
        manifest["reuse"] = nullptr;
    }

    json latents = json::object();
    for (const auto& [layer, d] : artifact.ae_latent) latents[std::to_string(layer)] = d;
    manifest["ae_latent"] = latents;
    json floors_k = json::object(), floors_v = json::object();
    for (const auto& [layer, f] : artifact.recon_floor_k) floors_k[std::to_string(layer)] = f;
    for (const auto& [layer, f] : artifact.recon_floor_v) floors_v[std::to_string(layer)] = f;
    manifest["recon_floor"] = json{{"k", floors_k}, {"v", floors_v}};

    json tensor_list = json::array();
    uint64_t offset = 0;
    for (auto& [name, t] : tensors) {
        tensor_list.push_back(json{{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += static_cast<uint64_t>(t.numel());
    }
    manifest["tensors"] = tensor_list;

    const std::string text = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot write " + path);
    out.write(reinterpret_cast<const char*>(&kMagic), sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
    const uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (auto& [name, t] : tensors) {
        const auto d = t.data();
        out.write(reinterpret_cast<const char*>(d.data()),
                  static_cast<std::streamsize>(d.size() * sizeof(float)));
    }
    if (!out) throw IoError("checkpoint: write failed for " + path);
}

ModelArtifact load_artifact(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot read " + path);
    uint32_t magic = 0, version = 0;
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&magic), sizeof(magic));
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || magic != kMagic) throw IoError("checkpoint: bad magic in " + path);
    if (version != kVersion) throw IoError("checkpoint: unsupported version in " + path);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("checkpoint: truncated manifest in " + path);
    json manifest = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (manifest.is_discarded()) throw IoError("checkpoint: malformed manifest in " + path);

    ModelArtifact artifact;
    const ModelConfig cfg = config_from_json(manifest.at("model_config"));
    std::mt19937 gen(0);
    artifact.model = TransformerModel(cfg, gen);
    artifact.seed = manifest.value("seed", uint64_t{0});

    for (const auto& entry : manifest.at("autoencoders")) {
        const int64_t layer = entry.at("layer").get<int64_t>();
        AutoencoderSet::Pair pair{Autoencoder(ae_config_from_json(entry.at("k")), gen),
                                  Autoencoder(ae_config_from_json(entry.at("v")), gen)};
        artifact.autoencoders.put(layer, std::move(pair));
    }

    if (!manifest.at("reuse").is_null()) {
        const auto& r = manifest.at("reuse");
        const auto bitmap = r.at("bitmap").get<std::vector<uint8_t>>();
        artifact.reuse = ReusePlan::from_bitmap(r.at("n_layers").get<int64_t>(),
                                                r.at("n_heads").get<int64_t>(), bitmap);
    }
    for (const auto& [key, value] : manifest.at("ae_latent").items())
        artifact.ae_latent[std::stoll(key)] = value.get<int64_t>();
    for (const auto& [key, value] : manifest.at("recon_floor").at("k").items())
        artifact.recon_floor_k[std::stoll(key)] = value.get<double>();
    for (const auto& [key, value] : manifest.at("recon_floor").at("v").items())
        artifact.recon_floor_v[std::stoll(key)] = value.get<double>();

    // Resolve every named tensor and fill it from the payload.
    const std::streampos payload_start = in.tellg();
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<Shape>();
        const uint64_t offset = entry.at("offset").get<uint64_t>();

        Tensor* target = nullptr;
        if (name.rfind("ae.", 0) == 0) {
            const size_t dot1 = name.find('.', 3);
            const int64_t layer = std::stoll(name.substr(3, dot1 - 3));
            const char side = name[dot1 + 1];
            const std::string field = name.substr(dot1 + 3);
            auto& pair = artifact.autoencoders.at(layer);
            target = &(side == 'k' ? pair.k : pair.v).tensor(field);
        } else {
            target = &artifact.model.parameter(name);
        }
        if (target->shape() != shape) throw IoError("checkpoint: shape mismatch for tensor " + name);
        in.seekg(payload_start + static_cast<std::streamoff>(offset * sizeof(float)));
        in.read(reinterpret_cast<char*>(target->mutable_data().data()),
                static_cast<std::streamsize>(target->numel() * sizeof(float)));
        if (!in) throw IoError("checkpoint: truncated payload in " + path);
    }
    return artifact;
}

} // namespace kvcar
