#pragma once
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "kvcar/autoencoder.hpp"
#include "kvcar/tensor.hpp"

namespace kvcar {

enum class KvSide : int { k = 0, v = 1 };

enum class CodecKind : uint8_t { identity = 0, autoencoder = 1, autoencoder_int8 = 2 };

// Per-layer codec description. stored_dim is the full-row stored width in
// elements: d_model for identity, the latent d otherwise. With head reuse in
// the same layer, aliased head slices are excluded before encoding, so the
// physical row narrows to stored_dim · (non-aliased heads) / n_heads.
struct CodecSpec {
    CodecKind kind = CodecKind::identity;
    int64_t stored_dim = 0;
};

// Which (layer, head, K-or-V) slots are served from the same slot one layer
// below. Layer 0 never aliases. Chains resolve transitively through
// source_layer().
class ReusePlan {
  public:
    ReusePlan() = default;
    ReusePlan(int64_t n_layers, int64_t n_heads);

    int64_t n_layers() const { return n_layers_; }
    int64_t n_heads() const { return n_heads_; }
    bool empty() const;

    bool aliased(int64_t layer, KvSide side, int64_t head) const;
    void set_aliased(int64_t layer, KvSide side, int64_t head, bool value);

    // Nearest layer at or below `layer` that actually stores this slot.
    int64_t source_layer(int64_t layer, KvSide side, int64_t head) const;

    int64_t aliased_count() const;
    int64_t aliased_count(int64_t layer, KvSide side) const;

    // Bit order: layer-major, K before V, head ascending; LSB-first packing.
    std::vector<uint8_t> to_bitmap() const;
    static ReusePlan from_bitmap(int64_t n_layers, int64_t n_heads, std::span<const uint8_t> bits);

    bool operator==(const ReusePlan&) const = default;

  private:
    void check(int64_t layer, int64_t head) const;
    size_t index(int64_t layer, KvSide side, int64_t head) const;
    int64_t n_layers_ = 0;
    int64_t n_heads_ = 0;
    std::vector<uint8_t> alias_; // 0/1 per slot
};

// Static description of a whole-cache configuration: one codec per layer
// plus the reuse plan. Used by the accounting functions and by the runtime
// cache construction.
struct SchemeSpec {
    std::vector<CodecSpec> codecs; // size n_layers; empty ⇒ all identity
    ReusePlan reuse;               // empty ⇒ no aliasing

    static SchemeSpec identity(int64_t n_layers, int64_t d_model);
};

struct CacheStats {
    std::vector<uint64_t> bytes_per_layer;
    uint64_t total_bytes = 0;
    uint64_t baseline_bytes = 0; // 2·P·L·D·seq·batch
    double savings_fraction = 0.0;
};

struct AccountingQuery {
    int64_t n_layers = 0;
    int64_t n_heads = 0;
    int64_t d_model = 0;
    int64_t seq_len = 0;
    int64_t batch = 0;
    int64_t bytes_per_element = 2; // P ∈ {1, 2, 4} for float payloads
    SchemeSpec scheme;
};

// Exact byte accounting. Per (layer, K/V, head): 0 bytes when aliased,
// otherwise P'·seq·batch·(stored_dim/n_heads) where P' is 1 for int8
// payloads and P otherwise. With identity codecs and an empty plan this
// reduces to 2·P·L·D·seq·batch.
CacheStats bytes_used(const AccountingQuery& query);

// Savings fractions independent of sequence length, batch, and precision.
struct SavingsQuery {
    int64_t n_layers = 0;
    int64_t n_heads = 0;
    ReusePlan reuse;                     // may be empty
    std::map<int64_t, double> compressed; // layer → d/D ratio
};
struct SavingsReport {
    double reuse_only = 0.0;
    double autoencoder_only = 0.0;
    double combined = 0.0;
};
// combined = aliased/(2Lh) + Σ (1 − d/D)·(compressed non-aliased slots)/(2Lh)
SavingsReport savings_report(const SavingsQuery& query);

// Runtime binding of a layer codec to its trained networks. The
// autoencoders must be sized for the layer's effective widths: input
// (D/h)·m and latent (stored_dim/h)·m, with m the non-aliased head count
// for that side.
struct LayerCodecBinding {
    CodecSpec spec;
    const Autoencoder* k_codec = nullptr;
    const Autoencoder* v_codec = nullptr;
};

struct CacheOptions {
    // Keep decoded prefixes around between reads instead of re-decoding.
    bool memoize_decoded = false;
};

// Per-layer K/V storage in stored dimension with encode-on-append /
// decode-on-read and alias-transparent reads.
//
// Single writer; concurrent readers are fine between appends when
// memoize_decoded is off.
class KVCache {
  public:
    KVCache(int64_t n_layers, int64_t n_heads, int64_t d_model,
            std::vector<LayerCodecBinding> codecs, ReusePlan reuse,
            CacheOptions options = {});

    int64_t n_layers() const { return n_layers_; }
    int64_t n_heads() const { return n_heads_; }
    int64_t d_model() const { return d_model_; }
    int64_t size(int64_t layer) const;
    bool empty() const;

    const CodecSpec& codec(int64_t layer) const;
    const ReusePlan& reuse() const { return reuse_; }

    // k_row/v_row are full-dimension (length D). Non-aliased head slices are
    // encoded per the layer codec and appended; aliased slots are skipped.
    void append(int64_t layer, std::span<const float> k_row, std::span<const float> v_row);

    struct Read {
        Tensor k; // [count × D], decoded and alias-resolved
        Tensor v;
    };
    Read read(int64_t layer) const;
    Read read_prefix(int64_t layer, int64_t count) const;

    // Physical payload bytes currently stored, matching the accounting rules
    // (headers of quantized rows excluded).
    uint64_t stored_payload_bytes(int64_t bytes_per_element) const;

    // Snapshot format (version 1, little-endian):
    //   "KVSN" | u32 version | i64 n_layers | i64 n_heads | i64 d_model |
    //   i64 positions | per layer: u8 codec kind, i64 stored_dim |
    //   reuse bitmap (layer-major, K before V, head ascending, LSB-first) |
    //   per layer, per side (K then V): i64 row width, then rows:
    //     float payloads: positions·width f32
    //     int8 payloads, per row: u8 flag (1 = constant row) then either
    //       f32 constant value, or f32 scale, i16 zeropoint, width int8.
    void dump_snapshot(std::ostream& out) const;
    // Rebuilds storage from a snapshot; codec bindings and plan must match
    // the snapshot header.
    static KVCache load_snapshot(std::istream& in, std::vector<LayerCodecBinding> codecs,
                                 ReusePlan reuse, CacheOptions options = {});

  private:
    struct SideStore {
        int64_t width = 0;                 // stored elements per position
        std::vector<float> f32;            // identity / autoencoder payload
        std::vector<int8_t> q8;            // autoencoder_int8 payload
        struct RowMeta {
            uint8_t degenerate = 0;
            float const_value = 0.0f;
            float scale = 0.0f;
            int32_t zeropoint = 0;
        };
        std::vector<RowMeta> rows;         // int8 payloads only
        mutable std::vector<float> decoded_memo; // [rows × decoded width]
        mutable int64_t decoded_rows = 0;
    };

    const Autoencoder* side_codec(int64_t layer, KvSide side) const;
    const SideStore& store(int64_t layer, KvSide side) const;
    SideStore& store(int64_t layer, KvSide side);
    int64_t non_aliased_heads(int64_t layer, KvSide side) const;
    // Decoded non-aliased block for the layer's own stored rows,
    // [count × (D/h)·m]; column order follows ascending head index.
    std::vector<float> decode_own(int64_t layer, KvSide side, int64_t count) const;
    void append_side(int64_t layer, KvSide side, std::span<const float> row);
    void check_layer(int64_t layer) const;

    int64_t n_layers_ = 0;
    int64_t n_heads_ = 0;
    int64_t d_model_ = 0;
    std::vector<LayerCodecBinding> codecs_;
    ReusePlan reuse_;
    CacheOptions options_;
    std::vector<int64_t> positions_;  // per layer
    std::vector<SideStore> stores_;   // [layer][side] flattened
};

} // namespace kvcar
