#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "pixemb/tape.hpp"
#include "pixemb/tensor.hpp"

namespace pixemb {

// Quantization recipe: Q_a-bit uniform activations over [range_lo, range_hi],
// 1-bit sign-and-scale weights.
struct QuantConfig {
    int activation_bits = 2;
    int weight_bits = 1;
    float range_lo = 0.0f;
    float range_hi = 1.0f;

    int levels() const { return (1 << activation_bits) - 1; }
    float scale() const { return (range_hi - range_lo) / static_cast<float>(levels()); }
    void validate() const;
};

// Integer codes plus the affine mapping back to real values:
// value = scale * (code - zero_level).
struct QuantizedTensor {
    std::vector<int> shape;
    int bits = 2;
    float scale = 1.0f;
    int zero_level = 0;
    std::vector<std::uint8_t> codes;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int e : shape) n *= e;
        return n;
    }
    float dequant(std::uint8_t code) const {
        return scale * (static_cast<float>(code) - static_cast<float>(zero_level));
    }
};

// Integer code for x: clamp to the range, map to {0 .. 2^Qa-1}, round half
// away from zero.
int quantize_code(float x, const QuantConfig& cfg);

// quantize_code composed with the level-to-value affine. Every quantizing
// path in the library goes through this pair, which is what makes the merged
// inference table bit-exact against the training forward.
float code_to_value(int code, const QuantConfig& cfg);
float quantize_value(float x, const QuantConfig& cfg);

void quantize_activation_forward(std::span<const float> x, std::span<float> out,
                                 const QuantConfig& cfg);
QuantizedTensor quantize_tensor(const Tensor& x, const QuantConfig& cfg);
Tensor dequantize(const QuantizedTensor& q);

// Uniform activation quantizer as a tape op. Backward is the clipped
// straight-through estimator: gradient passes where range_lo <= x <= range_hi
// and is zero outside.
Tensor quantize_activation(Tape& tape, const Tensor& x, const QuantConfig& cfg);

// upstream masked by indicator(lo <= input <= hi); identity when no clip
// range is given.
std::vector<float> ste_backward(std::span<const float> upstream, std::span<const float> input,
                                std::optional<std::pair<float, float>> clip_range);

struct WeightQuant {
    Tensor y;                  // alpha_c * sign(w_c)
    std::vector<float> alpha;  // one per output channel, or a single entry
};

// Sign-and-scale weight binarization on the tape. alpha_c is the mean
// absolute value of output channel c (axis 0); sign(0) counts as +1. The
// backward rule passes the gradient through sign unchanged and treats alpha
// as a recomputed constant, so upstream gradients are scaled by alpha_c.
// All-zero channels get alpha 0 and a warning diagnostic.
// per_channel=false uses one alpha for the whole tensor (the integer-argmax
// head needs a uniform scale so that logit order matches accumulator order).
WeightQuant quantize_weight(Tape& tape, const Tensor& w, bool per_channel = true);

// Forward-only alphas (same definition as quantize_weight).
std::vector<float> weight_alphas(const Tensor& w, bool per_channel = true);

}  // namespace pixemb
