#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pixemb/quantize.hpp"
#include "pixemb/tape.hpp"
#include "pixemb/tensor.hpp"

namespace pixemb {

inline constexpr int kPixelValues = 256;

// 1-hot vector of length n with a 1 at position p.
std::vector<float> one_hot(int p, int n);

// Trainable d x 256 lookup table. One table is shared by the R, G and B
// components; column p is the embedding of pixel value p.
struct EmbeddingTable {
    int d = 8;
    QuantConfig quant;
    Tensor weights;  // (d, 256)

    void validate() const;
};

// Entries initialised uniformly in the quantizer's range so every level is
// reachable from the start.
EmbeddingTable make_embedding_table(int d, const QuantConfig& cfg, Rng& rng);

// Training-path pixel embedding: quantize_activation(E h(p)) per component,
// laid out as (N, 3d, H, W) with channels [c*d, (c+1)*d) holding component c
// in R, G, B order. Differentiable: gradients reach table columns through the
// gather scatter composed with the quantizer's STE.
Tensor embed_train(Tape& tape, const ImageBatch& image, const EmbeddingTable& table);

// Forward-only twin of embed_train (same values, no tape).
Tensor embed_forward(const ImageBatch& image, const EmbeddingTable& table);

// Inference-side table: the float table composed with the activation
// quantizer, 256 entries of d integer codes each.
struct MergedTable {
    int d = 0;
    int bits = 0;
    float scale = 1.0f;
    int zero_level = 0;
    std::vector<std::uint8_t> codes;  // 256 * d, entry-major

    std::span<const std::uint8_t> entry(int pixel) const {
        return {codes.data() + static_cast<std::size_t>(pixel) * d, static_cast<std::size_t>(d)};
    }
    float dequant(std::uint8_t code) const {
        return scale * (static_cast<float>(code) - static_cast<float>(zero_level));
    }
};

MergedTable merge_table(const EmbeddingTable& table);

// Pure lookup; no arithmetic. Output layout matches embed_train.
QuantizedTensor embed_infer(const ImageBatch& image, const MergedTable& merged);

// Bit-packed payload: entries in pixel-value order, each entry d codes in
// dimension order, Q bits per code little-endian within bytes, zero-padded to
// a byte boundary. Exactly ceil(256*d*Q/8) bytes.
std::vector<std::uint8_t> merged_payload(const MergedTable& merged);
MergedTable merged_from_payload(int d, int bits, float scale, int zero_level,
                                std::span<const std::uint8_t> payload);

}  // namespace pixemb
