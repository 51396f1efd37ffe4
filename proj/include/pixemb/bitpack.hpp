#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pixemb/quantize.hpp"
#include "pixemb/tensor.hpp"

namespace pixemb {

// Bit-plane packed Q-bit activations. Plane k holds bit k of every element;
// elements are packed along the channel axis with the channel count padded up
// to a multiple of 64. Padded lanes are always zero.
struct PackedTensor {
    int n = 0, c = 0, h = 0, w = 0;
    int bits = 0;
    float scale = 1.0f;
    int zero_level = 0;
    int words_per_pos = 0;  // ceil(c / 64)
    std::vector<std::uint64_t> planes;

    std::int64_t plane_stride() const {
        return static_cast<std::int64_t>(n) * h * w * words_per_pos;
    }
    const std::uint64_t* at(int plane, int in, int ih, int iw) const {
        return planes.data() + plane * plane_stride() +
               ((static_cast<std::int64_t>(in) * h + ih) * w + iw) * words_per_pos;
    }
};

PackedTensor pack_activations(const QuantizedTensor& q);
QuantizedTensor unpack_activations(const PackedTensor& p);

// Binary conv weights as sign bitmasks (bit 1 = +1, bit 0 = -1) packed along
// the input-channel axis, plus the per-output-channel scale. The concatenated
// per-tap masks used by the conv kernel are precomputed at build time.
struct PackedWeights {
    int out_ch = 0, in_ch = 0, kh = 0, kw = 0;
    int words_per_tap = 0;   // ceil(in_ch / 64)
    int cat_words = 0;       // ceil(kh*kw*in_ch / 64)
    std::vector<std::uint64_t> sign;      // (out_ch, kh, kw, words_per_tap)
    std::vector<float> alpha;             // per output channel
    std::vector<std::uint64_t> pos_cat;   // (out_ch, cat_words)

    const std::uint64_t* sign_at(int oc, int ky, int kx) const {
        return sign.data() +
               ((static_cast<std::int64_t>(oc) * kh + ky) * kw + kx) * words_per_tap;
    }
};

// Binarizes float weights (O, I, KH, KW): alpha_c = mean |w_c| and the sign
// bitmask. per_channel=false uses one alpha for the whole kernel.
PackedWeights pack_weights(const Tensor& w, bool per_channel = true);
// Rebuild from serialized sign words and alphas.
PackedWeights make_packed_weights(int out_ch, int in_ch, int kh, int kw,
                                  std::vector<std::uint64_t> sign, std::vector<float> alpha);
// alpha_c * sign(w) as a dense tensor.
Tensor unpack_weights(const PackedWeights& w);

// Exact integer conv accumulators: acc = sum over taps and lanes of
// (+/-1) * code, prior to any scaling.
struct ConvAccum {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<std::int32_t> acc;
};

// Popcount convolution. Border padding contributes activation code 0. The
// activation zero_level must be 0 (the [0, hi) unsigned range used
// throughout), so dequantized outputs are alpha_c * scale * acc.
ConvAccum packed_conv2d(const PackedTensor& x, const PackedWeights& w, int stride, int pad);

// Maps accumulators back through the activation affine and weight scales.
Tensor accum_to_float(const ConvAccum& a, std::span<const float> alpha, float act_scale);

}  // namespace pixemb
