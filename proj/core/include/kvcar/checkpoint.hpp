#pragma once
#include <cstdint>
#include <map>
#include <string>

#include "kvcar/kvcache.hpp"
#include "kvcar/model.hpp"

namespace kvcar {

// Everything a checkpoint holds: the base model, per-layer K/V autoencoder
// pairs, an optional reuse plan, the full-row stored dimension each
// compressed layer was trained for, and the recorded stage-1 reconstruction
// floors.
struct ModelArtifact {
    TransformerModel model;
    AutoencoderSet autoencoders;
    ReusePlan reuse;                       // n_layers() == 0 when absent
    std::map<int64_t, int64_t> ae_latent;  // layer → stored_dim d
    std::map<int64_t, double> recon_floor_k;
    std::map<int64_t, double> recon_floor_v;
    uint64_t seed = 0;

    // Builds the cache scheme this artifact implies: compressed layers use
    // `kind`, everything else identity; the stored reuse plan is attached
    // when `with_reuse` is set.
    SchemeSpec scheme(CodecKind kind, bool with_reuse,
                      const std::set<int64_t>* layer_filter = nullptr) const;
};

// Container layout (version 1, little-endian):
//   "KVCR" | u32 version | u64 manifest length | manifest (JSON) |
//   payload (raw float32).
// The manifest names every tensor with its shape and element offset into the
// payload, and carries the model config, autoencoder configs, reuse bitmap,
// stored dimensions, reconstruction floors, and seed.
void save_artifact(const std::string& path, ModelArtifact& artifact);
ModelArtifact load_artifact(const std::string& path);

} // namespace kvcar
