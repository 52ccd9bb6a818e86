#include "kvcar/quantizer.hpp"

#include <algorithm>
#include <cmath>

#include "kvcar/error.hpp"

namespace kvcar {

namespace {
// std::round already rounds halfway cases away from zero.
inline int64_t round_half_away(double v) { return static_cast<int64_t>(std::llround(v)); }
} // namespace

bool quantizable(std::span<const float> x) {
    if (x.empty()) return false;
    const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
    return *mx > *mn;
}

QuantizedBlock quantize(std::span<const float> x) {
    if (x.empty()) throw NumericsError("quantize: empty input");
    const auto [mn_it, mx_it] = std::minmax_element(x.begin(), x.end());
    const float mn = *mn_it, mx = *mx_it;
    if (!(mx > mn)) throw NumericsError("quantize: degenerate range (max == min)");

    QuantizedBlock block;
    block.scale = 255.0f / (mx - mn);
    block.zeropoint = static_cast<int32_t>(-round_half_away(double(block.scale) * mn) - 128);
    block.q.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const int64_t v = round_half_away(double(block.scale) * x[i] + block.zeropoint);
        block.q[i] = static_cast<int8_t>(std::clamp<int64_t>(v, -128, 127));
    }
    return block;
}

std::vector<float> dequantize(const QuantizedBlock& block) {
    if (!(block.scale > 0.0f)) throw NumericsError("dequantize: scale must be positive");
    std::vector<float> out(block.q.size());
    const double inv = 1.0 / double(block.scale);
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>((block.q[i] - block.zeropoint) * inv);
    return out;
}

} // namespace kvcar
