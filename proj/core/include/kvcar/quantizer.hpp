#pragma once
#include <cstdint>
#include <span>
#include <vector>

namespace kvcar {

// Affine int8 block: x ≈ (q − zeropoint) / scale.
//
// scale = 255 / (max − min), zeropoint = −round(scale·min) − 128, with
// round-half-away-from-zero throughout. Values are clamped into [−128, 127]
// after rounding; the formula can land on 128 at the max element.
struct QuantizedBlock {
    std::vector<int8_t> q;
    float scale = 0.0f;
    int32_t zeropoint = 0;

    // Payload bytes plus the fixed per-block header (scale + zeropoint).
    size_t byte_size() const { return q.size() + sizeof(float) + sizeof(int16_t); }
};

// Requires max(x) > min(x); throws NumericsError on a constant input
// (callers that can see constant rows should store them as a value+flag).
QuantizedBlock quantize(std::span<const float> x);

std::vector<float> dequantize(const QuantizedBlock& block);

bool quantizable(std::span<const float> x); // max(x) > min(x)

} // namespace kvcar
