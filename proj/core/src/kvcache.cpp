#include "kvcar/kvcache.hpp"

#include <algorithm>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "kvcar/error.hpp"
#include "kvcar/quantizer.hpp"

namespace kvcar {

// ---------------------------------------------------------------------------
// ReusePlan
// ---------------------------------------------------------------------------

ReusePlan::ReusePlan(int64_t n_layers, int64_t n_heads)
    : n_layers_(n_layers), n_heads_(n_heads),
      alias_(static_cast<size_t>(n_layers * 2 * n_heads), 0) {
    if (n_layers <= 0 || n_heads <= 0) throw ConfigError("reuse plan: extents must be positive");
}

bool ReusePlan::empty() const {
    if (n_layers_ == 0) return true;
    return std::all_of(alias_.begin(), alias_.end(), [](uint8_t b) { return b == 0; });
}

void ReusePlan::check(int64_t layer, int64_t head) const {
    if (n_layers_ == 0) throw ConfigError("reuse plan: unconfigured");
    if (layer < 0 || layer >= n_layers_) throw ConfigError("reuse plan: layer out of range");
    if (head < 0 || head >= n_heads_) throw ConfigError("reuse plan: head out of range");
}

size_t ReusePlan::index(int64_t layer, KvSide side, int64_t head) const {
    return static_cast<size_t>((layer * 2 + static_cast<int64_t>(side)) * n_heads_ + head);
}

bool ReusePlan::aliased(int64_t layer, KvSide side, int64_t head) const {
    if (n_layers_ == 0) return false;
    check(layer, head);
    return alias_[index(layer, side, head)] != 0;
}

void ReusePlan::set_aliased(int64_t layer, KvSide side, int64_t head, bool value) {
    check(layer, head);
    if (layer == 0 && value) throw ConfigError("reuse plan: layer 0 cannot alias");
    alias_[index(layer, side, head)] = value ? 1 : 0;
}

int64_t ReusePlan::source_layer(int64_t layer, KvSide side, int64_t head) const {
    if (n_layers_ == 0) return layer;
    check(layer, head);
    int64_t l = layer;
    while (l > 0 && alias_[index(l, side, head)]) --l;
    return l;
}

int64_t ReusePlan::aliased_count() const {
    int64_t n = 0;
    for (uint8_t b : alias_) n += b;
    return n;
}

int64_t ReusePlan::aliased_count(int64_t layer, KvSide side) const {
    if (n_layers_ == 0) return 0;
    check(layer, 0);
    int64_t n = 0;
    for (int64_t h = 0; h < n_heads_; ++h) n += alias_[index(layer, side, h)];
    return n;
}

std::vector<uint8_t> ReusePlan::to_bitmap() const {
    std::vector<uint8_t> bits((alias_.size() + 7) / 8, 0);
    for (size_t i = 0; i < alias_.size(); ++i)
        if (alias_[i]) bits[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
    return bits;
}

ReusePlan ReusePlan::from_bitmap(int64_t n_layers, int64_t n_heads, std::span<const uint8_t> bits) {
    ReusePlan plan(n_layers, n_heads);
    const size_t slots = plan.alias_.size();
    if (bits.size() != (slots + 7) / 8) throw ConfigError("reuse plan: bitmap size mismatch");
    for (size_t i = 0; i < slots; ++i)
        plan.alias_[i] = (bits[i / 8] >> (i % 8)) & 1u;
    for (int64_t h = 0; h < n_heads; ++h)
        for (int s = 0; s < 2; ++s)
            if (plan.alias_[plan.index(0, static_cast<KvSide>(s), h)])
                throw ConfigError("reuse plan: layer 0 cannot alias");
    return plan;
}

SchemeSpec SchemeSpec::identity(int64_t n_layers, int64_t d_model) {
    SchemeSpec s;
    s.codecs.assign(static_cast<size_t>(n_layers), CodecSpec{CodecKind::identity, d_model});
    return s;
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

namespace {

void validate_accounting(const AccountingQuery& q) {
    if (q.n_layers <= 0 || q.n_heads <= 0 || q.d_model <= 0)
        throw ConfigError("accounting: model extents must be positive");
    if (q.seq_len < 0 || q.batch <= 0)
        throw ConfigError("accounting: sequence length must be non-negative and batch positive");
    if (q.bytes_per_element != 1 && q.bytes_per_element != 2 && q.bytes_per_element != 4)
        throw ConfigError("accounting: bytes per element must be 1, 2, or 4");
    if (q.d_model % q.n_heads != 0)
        throw ConfigError("accounting: d_model must be divisible by n_heads");
    if (!q.scheme.codecs.empty() && static_cast<int64_t>(q.scheme.codecs.size()) != q.n_layers)
        throw ConfigError("accounting: scheme must describe every layer");
    if (q.scheme.reuse.n_layers() != 0 &&
        (q.scheme.reuse.n_layers() != q.n_layers || q.scheme.reuse.n_heads() != q.n_heads))
        throw ConfigError("accounting: reuse plan extents do not match the model");
}

} // namespace

CacheStats bytes_used(const AccountingQuery& q) {
    validate_accounting(q);
    CacheStats stats;
    stats.bytes_per_layer.assign(static_cast<size_t>(q.n_layers), 0);

    const ReusePlan& plan = q.scheme.reuse;
    for (int64_t layer = 0; layer < q.n_layers; ++layer) {
        CodecSpec spec{CodecKind::identity, q.d_model};
        if (!q.scheme.codecs.empty()) spec = q.scheme.codecs[static_cast<size_t>(layer)];
        if (spec.stored_dim <= 0 || spec.stored_dim > q.d_model)
            throw ConfigError("accounting: stored_dim out of range");
        if (spec.kind == CodecKind::identity && spec.stored_dim != q.d_model)
            throw ConfigError("accounting: identity codec must store the full width");

        const int64_t payload_bytes = spec.kind == CodecKind::autoencoder_int8 ? 1 : q.bytes_per_element;
        uint64_t layer_bytes = 0;
        for (int s = 0; s < 2; ++s) {
            const KvSide side = static_cast<KvSide>(s);
            const int64_t m = plan.n_layers() == 0
                                  ? q.n_heads
                                  : q.n_heads - plan.aliased_count(layer, side);
            const __int128 width_num = static_cast<__int128>(spec.stored_dim) * m;
            if (width_num % q.n_heads != 0)
                throw ConfigError("accounting: stored width is not divisible across heads");
            const __int128 bytes = static_cast<__int128>(payload_bytes) * q.seq_len * q.batch *
                                   (width_num / q.n_heads);
            layer_bytes += static_cast<uint64_t>(bytes);
        }
        stats.bytes_per_layer[static_cast<size_t>(layer)] = layer_bytes;
        stats.total_bytes += layer_bytes;
    }

    stats.baseline_bytes = static_cast<uint64_t>(
        static_cast<__int128>(2) * q.bytes_per_element * q.n_layers * q.d_model * q.seq_len * q.batch);
    stats.savings_fraction =
        stats.baseline_bytes == 0
            ? 0.0
            : 1.0 - static_cast<double>(stats.total_bytes) / static_cast<double>(stats.baseline_bytes);
    return stats;
}

SavingsReport savings_report(const SavingsQuery& q) {
    if (q.n_layers <= 0 || q.n_heads <= 0)
        throw ConfigError("savings: extents must be positive");
    if (q.reuse.n_layers() != 0 &&
        (q.reuse.n_layers() != q.n_layers || q.reuse.n_heads() != q.n_heads))
        throw ConfigError("savings: reuse plan extents do not match");
    for (const auto& [layer, ratio] : q.compressed) {
        if (layer < 0 || layer >= q.n_layers) throw ConfigError("savings: compressed layer out of range");
        if (ratio <= 0.0 || ratio > 1.0) throw ConfigError("savings: d/D ratio must be in (0, 1]");
    }

    const double total_slots = 2.0 * static_cast<double>(q.n_layers) * static_cast<double>(q.n_heads);
    double reuse_sum = 0.0, ae_sum = 0.0, combined_sum = 0.0;
    for (int64_t layer = 0; layer < q.n_layers; ++layer) {
        const auto it = q.compressed.find(layer);
        const double shrink = it == q.compressed.end() ? 0.0 : 1.0 - it->second;
        for (int s = 0; s < 2; ++s) {
            const KvSide side = static_cast<KvSide>(s);
            for (int64_t h = 0; h < q.n_heads; ++h) {
                const bool aliased = q.reuse.n_layers() != 0 && q.reuse.aliased(layer, side, h);
                if (aliased) reuse_sum += 1.0;
                ae_sum += shrink;
                combined_sum += aliased ? 1.0 : shrink;
            }
        }
    }
    return SavingsReport{reuse_sum / total_slots, ae_sum / total_slots, combined_sum / total_slots};
}

// ---------------------------------------------------------------------------
// KVCache
// ---------------------------------------------------------------------------

KVCache::KVCache(int64_t n_layers, int64_t n_heads, int64_t d_model,
                 std::vector<LayerCodecBinding> codecs, ReusePlan reuse, CacheOptions options)
    : n_layers_(n_layers), n_heads_(n_heads), d_model_(d_model),
      codecs_(std::move(codecs)), reuse_(std::move(reuse)), options_(options) {
    if (n_layers_ <= 0 || n_heads_ <= 0 || d_model_ <= 0 || d_model_ % n_heads_ != 0)
        throw ConfigError("kvcache: invalid extents");
    if (static_cast<int64_t>(codecs_.size()) != n_layers_)
        throw ConfigError("kvcache: one codec binding per layer required");
    if (reuse_.n_layers() != 0 && (reuse_.n_layers() != n_layers_ || reuse_.n_heads() != n_heads_))
        throw ConfigError("kvcache: reuse plan extents do not match");

    positions_.assign(static_cast<size_t>(n_layers_), 0);
    stores_.resize(static_cast<size_t>(n_layers_ * 2));
    const int64_t head_dim = d_model_ / n_heads_;

    for (int64_t layer = 0; layer < n_layers_; ++layer) {
        const auto& binding = codecs_[static_cast<size_t>(layer)];
        const auto& spec = binding.spec;
        if (spec.stored_dim <= 0 || spec.stored_dim > d_model_)
            throw ConfigError("kvcache: stored_dim out of range");
        if (spec.kind == CodecKind::identity) {
            if (spec.stored_dim != d_model_)
                throw ConfigError("kvcache: identity codec must store the full width");
        } else if (!binding.k_codec || !binding.v_codec) {
            throw ConfigError("kvcache: autoencoder codec without bound networks");
        }

        for (int s = 0; s < 2; ++s) {
            const KvSide side = static_cast<KvSide>(s);
            const int64_t m = non_aliased_heads(layer, side);
            int64_t width = 0;
            if (m > 0) {
                const int64_t width_num = spec.stored_dim * m;
                if (width_num % n_heads_ != 0)
                    throw ConfigError("kvcache: stored width is not divisible across heads");
                width = width_num / n_heads_;
            }
            store(layer, side).width = width;
            if (spec.kind != CodecKind::identity && m > 0) {
                const Autoencoder* ae = side == KvSide::k ? binding.k_codec : binding.v_codec;
                if (ae->config().input_dim != head_dim * m || ae->config().latent != width)
                    throw ConfigError("kvcache: codec network widths do not match the layer");
            }
        }
    }
}

void KVCache::check_layer(int64_t layer) const {
    if (layer < 0 || layer >= n_layers_) throw ConfigError("kvcache: layer index out of range");
}

int64_t KVCache::size(int64_t layer) const {
    check_layer(layer);
    return positions_[static_cast<size_t>(layer)];
}

bool KVCache::empty() const {
    return std::all_of(positions_.begin(), positions_.end(), [](int64_t p) { return p == 0; });
}

const CodecSpec& KVCache::codec(int64_t layer) const {
    check_layer(layer);
    return codecs_[static_cast<size_t>(layer)].spec;
}

const Autoencoder* KVCache::side_codec(int64_t layer, KvSide side) const {
    const auto& binding = codecs_[static_cast<size_t>(layer)];
    return side == KvSide::k ? binding.k_codec : binding.v_codec;
}

const KVCache::SideStore& KVCache::store(int64_t layer, KvSide side) const {
    return stores_[static_cast<size_t>(layer * 2 + static_cast<int64_t>(side))];
}

KVCache::SideStore& KVCache::store(int64_t layer, KvSide side) {
    return stores_[static_cast<size_t>(layer * 2 + static_cast<int64_t>(side))];
}

int64_t KVCache::non_aliased_heads(int64_t layer, KvSide side) const {
    if (reuse_.n_layers() == 0) return n_heads_;
    return n_heads_ - reuse_.aliased_count(layer, side);
}

void KVCache::append_side(int64_t layer, KvSide side, std::span<const float> row) {
    SideStore& st = store(layer, side);
    if (st.width == 0) return; // every head aliased: nothing stored
    const int64_t head_dim = d_model_ / n_heads_;

    // Gather the non-aliased head slices in head order.
    std::vector<float> gathered;
    gathered.reserve(static_cast<size_t>(st.width));
    for (int64_t h = 0; h < n_heads_; ++h) {
        if (reuse_.n_layers() != 0 && reuse_.aliased(layer, side, h)) continue;
        gathered.insert(gathered.end(), row.begin() + h * head_dim, row.begin() + (h + 1) * head_dim);
    }

    const auto& spec = codecs_[static_cast<size_t>(layer)].spec;
    if (spec.kind == CodecKind::identity) {
        st.f32.insert(st.f32.end(), gathered.begin(), gathered.end());
        return;
    }

    NoGradGuard guard;
    const Autoencoder* ae = side_codec(layer, side);
    const int64_t gathered_width = static_cast<int64_t>(gathered.size());
    Tensor latent = ae->encode(Tensor::from_data({1, gathered_width}, std::move(gathered)), Mode::eval);
    const auto ld = latent.data();
    if (spec.kind == CodecKind::autoencoder) {
        st.f32.insert(st.f32.end(), ld.begin(), ld.end());
        return;
    }

    // autoencoder_int8: quantize each appended latent row on its own.
    SideStore::RowMeta meta;
    if (!quantizable(ld)) {
        meta.degenerate = 1;
        meta.const_value = ld.empty() ? 0.0f : ld[0];
        st.q8.insert(st.q8.end(), static_cast<size_t>(st.width), 0);
    } else {
        QuantizedBlock block = quantize(ld);
        meta.scale = block.scale;
        meta.zeropoint = block.zeropoint;
        st.q8.insert(st.q8.end(), block.q.begin(), block.q.end());
    }
    st.rows.push_back(meta);
}

void KVCache::append(int64_t layer, std::span<const float> k_row, std::span<const float> v_row) {
    check_layer(layer);
    if (static_cast<int64_t>(k_row.size()) != d_model_ || static_cast<int64_t>(v_row.size()) != d_model_)
        throw ShapeError("kvcache append: rows must have length d_model");
    append_side(layer, KvSide::k, k_row);
    append_side(layer, KvSide::v, v_row);
    positions_[static_cast<size_t>(layer)]++;
}

std::vector<float> KVCache::decode_own(int64_t layer, KvSide side, int64_t count) const {
    const SideStore& st = store(layer, side);
    const int64_t m = non_aliased_heads(layer, side);
    const int64_t head_dim = d_model_ / n_heads_;
    const int64_t out_width = m * head_dim;
    if (count == 0 || out_width == 0) return {};

    const auto& spec = codecs_[static_cast<size_t>(layer)].spec;
    if (spec.kind == CodecKind::identity)
        return std::vector<float>(st.f32.begin(), st.f32.begin() + count * st.width);

    auto decode_rows = [&](int64_t from, int64_t to, std::vector<float>& out) {
        const int64_t n = to - from;
        if (n <= 0) return;
        std::vector<float> latent(static_cast<size_t>(n * st.width));
        if (spec.kind == CodecKind::autoencoder) {
            std::copy(st.f32.begin() + from * st.width, st.f32.begin() + to * st.width, latent.begin());
        } else {
            for (int64_t r = from; r < to; ++r) {
                const auto& meta = st.rows[static_cast<size_t>(r)];
                float* dst = latent.data() + (r - from) * st.width;
                if (meta.degenerate) {
                    std::fill(dst, dst + st.width, meta.const_value);
                } else {
                    QuantizedBlock block;
                    block.scale = meta.scale;
                    block.zeropoint = meta.zeropoint;
                    block.q.assign(st.q8.begin() + r * st.width, st.q8.begin() + (r + 1) * st.width);
                    const std::vector<float> deq = dequantize(block);
                    std::copy(deq.begin(), deq.end(), dst);
                }
            }
        }
        NoGradGuard guard;
        const Autoencoder* ae = side_codec(layer, side);
        Tensor decoded = ae->decode(Tensor::from_data({n, st.width}, std::move(latent)), Mode::eval);
        out.insert(out.end(), decoded.data().begin(), decoded.data().end());
    };

    if (!options_.memoize_decoded) {
        std::vector<float> out;
        out.reserve(static_cast<size_t>(count * out_width));
        decode_rows(0, count, out);
        return out;
    }

    // Eval-mode decoding is row-independent, so the memo can grow in place.
    if (st.decoded_rows < count) {
        decode_rows(st.decoded_rows, count, st.decoded_memo);
        st.decoded_rows = count;
    }
    return std::vector<float>(st.decoded_memo.begin(), st.decoded_memo.begin() + count * out_width);
}

KVCache::Read KVCache::read(int64_t layer) const { return read_prefix(layer, size(layer)); }

KVCache::Read KVCache::read_prefix(int64_t layer, int64_t count) const {
    check_layer(layer);
    if (count < 0 || count > positions_[static_cast<size_t>(layer)])
        throw ConfigError("kvcache read: count exceeds stored positions");

    const int64_t head_dim = d_model_ / n_heads_;
    Read result;
    for (int s = 0; s < 2; ++s) {
        const KvSide side = static_cast<KvSide>(s);
        std::vector<float> full(static_cast<size_t>(std::max<int64_t>(count, 0) * d_model_), 0.0f);

        // Decode each distinct owner layer once per read.
        std::map<int64_t, std::vector<float>> decoded;
        auto owner_block = [&](int64_t owner) -> const std::vector<float>& {
            auto it = decoded.find(owner);
            if (it != decoded.end()) return it->second;
            if (positions_[static_cast<size_t>(owner)] < count)
                throw ConsistencyError("kvcache read: alias source holds fewer positions than its reader");
            return decoded.emplace(owner, decode_own(owner, side, count)).first->second;
        };

        for (int64_t h = 0; h < n_heads_; ++h) {
            const int64_t owner =
                reuse_.n_layers() == 0 ? layer : reuse_.source_layer(layer, side, h);
            const std::vector<float>& block = owner_block(owner);
            // Column offset of this head inside the owner's non-aliased block.
            int64_t slot = 0;
            for (int64_t hh = 0; hh < h; ++hh)
                if (reuse_.n_layers() == 0 || !reuse_.aliased(owner, side, hh)) ++slot;
            const int64_t block_width = non_aliased_heads(owner, side) * head_dim;
            for (int64_t r = 0; r < count; ++r)
                std::copy(block.begin() + r * block_width + slot * head_dim,
                          block.begin() + r * block_width + (slot + 1) * head_dim,
                          full.begin() + r * d_model_ + h * head_dim);
        }
        Tensor t = count == 0 ? Tensor() : Tensor::from_data({count, d_model_}, std::move(full));
        (side == KvSide::k ? result.k : result.v) = t;
    }
    return result;
}

uint64_t KVCache::stored_payload_bytes(int64_t bytes_per_element) const {
    uint64_t total = 0;
    for (int64_t layer = 0; layer < n_layers_; ++layer) {
        const auto& spec = codecs_[static_cast<size_t>(layer)].spec;
        const int64_t per_elem = spec.kind == CodecKind::autoencoder_int8 ? 1 : bytes_per_element;
        for (int s = 0; s < 2; ++s) {
            const SideStore& st = store(layer, static_cast<KvSide>(s));
            total += static_cast<uint64_t>(per_elem) * st.width * positions_[static_cast<size_t>(layer)];
        }
    }
    return total;
}

// ---------------------------------------------------------------------------
// Snapshots
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void write_pod(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw IoError("kvcache snapshot: truncated stream");
    return value;
}

constexpr uint32_t kSnapshotMagic = 0x4e53564bu; // "KVSN"
constexpr uint32_t kSnapshotVersion = 1;

} // namespace

void KVCache::dump_snapshot(std::ostream& out) const {
    const int64_t positions = positions_.empty() ? 0 : positions_[0];
    for (int64_t p : positions_)
        if (p != positions) throw ConsistencyError("kvcache snapshot: layers hold unequal position counts");

    write_pod(out, kSnapshotMagic);
    write_pod(out, kSnapshotVersion);
    write_pod(out, n_layers_);
    write_pod(out, n_heads_);
    write_pod(out, d_model_);
    write_pod(out, positions);
    for (const auto& binding : codecs_) {
        write_pod(out, static_cast<uint8_t>(binding.spec.kind));
        write_pod(out, binding.spec.stored_dim);
    }
    ReusePlan plan = reuse_.n_layers() == 0 ? ReusePlan(n_layers_, n_heads_) : reuse_;
    const auto bits = plan.to_bitmap();
    out.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(bits.size()));

    for (int64_t layer = 0; layer < n_layers_; ++layer) {
        for (int s = 0; s < 2; ++s) {
            const SideStore& st = store(layer, static_cast<KvSide>(s));
            write_pod(out, st.width);
            if (st.width == 0) continue; // fully aliased side: nothing stored
            if (codecs_[static_cast<size_t>(layer)].spec.kind == CodecKind::autoencoder_int8) {
                for (int64_t r = 0; r < positions; ++r) {
                    const auto& meta = st.rows[static_cast<size_t>(r)];
                    write_pod(out, meta.degenerate);
                    if (meta.degenerate) {
                        write_pod(out, meta.const_value);
                    } else {
                        write_pod(out, meta.scale);
                        if (meta.zeropoint < INT16_MIN || meta.zeropoint > INT16_MAX)
                            throw IoError("kvcache snapshot: zeropoint exceeds the int16 container field");
                        write_pod(out, static_cast<int16_t>(meta.zeropoint));
                        out.write(reinterpret_cast<const char*>(st.q8.data() + r * st.width),
                                  static_cast<std::streamsize>(st.width));
                    }
                }
            } else {
                out.write(reinterpret_cast<const char*>(st.f32.data()),
                          static_cast<std::streamsize>(positions * st.width * sizeof(float)));
            }
        }
    }
    if (!out) throw IoError("kvcache snapshot: write failed");
}

KVCache KVCache::load_snapshot(std::istream& in, std::vector<LayerCodecBinding> codecs,
                               ReusePlan reuse, CacheOptions options) {
    if (read_pod<uint32_t>(in) != kSnapshotMagic) throw IoError("kvcache snapshot: bad magic");
    if (read_pod<uint32_t>(in) != kSnapshotVersion) throw IoError("kvcache snapshot: unsupported version");
    const int64_t n_layers = read_pod<int64_t>(in);
    const int64_t n_heads = read_pod<int64_t>(in);
    const int64_t d_model = read_pod<int64_t>(in);
    const int64_t positions = read_pod<int64_t>(in);

    KVCache cache(n_layers, n_heads, d_model, std::move(codecs), std::move(reuse), options);
    for (int64_t layer = 0; layer < n_layers; ++layer) {
        const auto kind = static_cast<CodecKind>(read_pod<uint8_t>(in));
        const int64_t stored = read_pod<int64_t>(in);
        const auto& spec = cache.codec(layer);
        if (kind != spec.kind || stored != spec.stored_dim)
            throw IoError("kvcache snapshot: codec header does not match the provided bindings");
    }
    ReusePlan ref = cache.reuse_.n_layers() == 0 ? ReusePlan(n_layers, n_heads) : cache.reuse_;
    std::vector<uint8_t> bits((static_cast<size_t>(n_layers * 2 * n_heads) + 7) / 8);
    in.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
    if (!in) throw IoError("kvcache snapshot: truncated stream");
    if (ReusePlan::from_bitmap(n_layers, n_heads, bits) != ref)
        throw IoError("kvcache snapshot: reuse bitmap does not match the provided plan");

    for (int64_t layer = 0; layer < n_layers; ++layer) {
        for (int s = 0; s < 2; ++s) {
            SideStore& st = cache.store(layer, static_cast<KvSide>(s));
            const int64_t width = read_pod<int64_t>(in);
            if (width != st.width) throw IoError("kvcache snapshot: stored width mismatch");
            if (width == 0) continue;
            if (cache.codec(layer).kind == CodecKind::autoencoder_int8) {
                st.q8.resize(static_cast<size_t>(positions * width));
                st.rows.resize(static_cast<size_t>(positions));
                for (int64_t r = 0; r < positions; ++r) {
                    auto& meta = st.rows[static_cast<size_t>(r)];
                    meta.degenerate = read_pod<uint8_t>(in);
                    if (meta.degenerate) {
                        meta.const_value = read_pod<float>(in);
                        std::fill_n(st.q8.begin() + r * width, width, 0);
                    } else {
                        meta.scale = read_pod<float>(in);
                        meta.zeropoint = read_pod<int16_t>(in);
                        in.read(reinterpret_cast<char*>(st.q8.data() + r * width),
                                static_cast<std::streamsize>(width));
                        if (!in) throw IoError("kvcache snapshot: truncated stream");
                    }
                }
            } else {
                st.f32.resize(static_cast<size_t>(positions * width));
                in.read(reinterpret_cast<char*>(st.f32.data()),
                        static_cast<std::streamsize>(positions * width * sizeof(float)));
                if (!in && positions * width > 0) throw IoError("kvcache snapshot: truncated stream");
            }
        }
    }
    std::fill(cache.positions_.begin(), cache.positions_.end(), positions);
    return cache;
}

} // namespace kvcar
