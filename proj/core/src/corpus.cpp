#include "kvcar/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>

#include "kvcar/error.hpp"

namespace kvcar {

Corpus Corpus::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("corpus: cannot read " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_bytes(std::move(bytes));
}

Corpus Corpus::from_bytes(std::vector<uint8_t> bytes) {
    Corpus c;
    c.bytes_ = std::move(bytes);
    return c;
}

Corpus::Split Corpus::split_windows(int64_t window_len, double heldout_fraction, uint64_t seed) const {
    if (window_len <= 0) throw ConfigError("corpus: window length must be positive");
    if (heldout_fraction < 0.0 || heldout_fraction >= 1.0)
        throw ConfigError("corpus: held-out fraction must be in [0, 1)");
    const int64_t n_windows = size_bytes() / window_len;
    if (n_windows == 0) throw ConfigError("corpus: shorter than one window");

    std::vector<int64_t> offsets(static_cast<size_t>(n_windows));
    for (int64_t i = 0; i < n_windows; ++i) offsets[static_cast<size_t>(i)] = i * window_len;
    std::mt19937_64 gen(seed);
    std::shuffle(offsets.begin(), offsets.end(), gen);

    int64_t n_heldout = static_cast<int64_t>(heldout_fraction * static_cast<double>(n_windows));
    if (heldout_fraction > 0.0 && n_heldout == 0 && n_windows > 1) n_heldout = 1;

    Split split;
    split.heldout.assign(offsets.begin(), offsets.begin() + n_heldout);
    split.train.assign(offsets.begin() + n_heldout, offsets.end());
    if (split.train.empty()) throw ConfigError("corpus: no training windows left after the split");
    return split;
}

std::vector<int32_t> Corpus::window_tokens(int64_t offset, int64_t window_len) const {
    if (offset < 0 || window_len <= 0 || offset + window_len > size_bytes())
        throw ConfigError("corpus: window out of range");
    std::vector<int32_t> tokens;
    tokens.reserve(static_cast<size_t>(window_len + 1));
    tokens.push_back(kBos);
    for (int64_t i = 0; i < window_len; ++i)
        tokens.push_back(static_cast<int32_t>(bytes_[static_cast<size_t>(offset + i)]));
    return tokens;
}

} // namespace kvcar
