#pragma once
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace kvcar {

// Byte-level corpus: token ids are raw byte values plus a BOS special.
// Windows are contiguous byte slices; the train/held-out split shuffles the
// window start offsets deterministically under the given seed.
class Corpus {
  public:
    static constexpr int32_t kBos = 256;
    static constexpr int64_t kVocab = 257; // 256 byte values + BOS

    static Corpus load(const std::string& path);
    static Corpus from_bytes(std::vector<uint8_t> bytes);

    int64_t size_bytes() const { return static_cast<int64_t>(bytes_.size()); }
    std::span<const uint8_t> bytes() const { return bytes_; }

    struct Split {
        std::vector<int64_t> train;   // window start offsets
        std::vector<int64_t> heldout;
    };
    // Non-overlapping windows of `window_len` bytes, stride window_len.
    Split split_windows(int64_t window_len, double heldout_fraction, uint64_t seed) const;

    // BOS followed by window_len bytes starting at `offset`.
    std::vector<int32_t> window_tokens(int64_t offset, int64_t window_len) const;

  private:
    std::vector<uint8_t> bytes_;
};

} // namespace kvcar
