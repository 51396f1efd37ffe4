#include "pixemb/embedding.hpp"

#include <cmath>

namespace pixemb {

std::vector<float> one_hot(int p, int n) {
    if (n < 1) {
        throw ValueError("one-hot: vector length must be positive");
    }
    if (p < 0 || p >= n) {
        throw IndexError("one-hot: index " + std::to_string(p) + " outside [0, " +
                         std::to_string(n) + ")");
    }
    std::vector<float> h(static_cast<std::size_t>(n), 0.0f);
    h[static_cast<std::size_t>(p)] = 1.0f;
    return h;
}

void EmbeddingTable::validate() const {
    quant.validate();
    if (d < 1 || weights.shape != std::vector<int>{d, kPixelValues}) {
        throw ShapeError("embedding table: expected shape (" + std::to_string(d) + ", 256), got " +
                         shape_to_string(weights.shape));
    }
}

EmbeddingTable make_embedding_table(int d, const QuantConfig& cfg, Rng& rng) {
    EmbeddingTable table;
    table.d = d;
    table.quant = cfg;
    table.weights = Tensor::zeros({d, kPixelValues});
    // Smooth random value-maps: one triangle wave per dimension with random
    // period, phase and orientation, plus light jitter. Neighbouring pixel
    // values start with similar embeddings (so convolutions see coherent
    // structure before the table has learned anything) and the full
    // quantizer range stays reachable in every dimension.
    const float lo = cfg.range_lo, hi = cfg.range_hi;
    auto ev = table.weights.values();
    for (int j = 0; j < d; ++j) {
        // Dimension 0 starts as the plain intensity ramp, so the embedding
        // initially carries at least the information a direct input
        // quantizer would; the other dimensions add diversity.
        const bool ramp = j == 0;
        const float period =
            ramp ? 510.0f : static_cast<float>(rng.uniform_int(384, 640));
        const float phase = ramp ? 0.0f : static_cast<float>(rng.uniform_int(0, 128));
        const bool rising = ramp || rng.bernoulli(0.5);
        for (int p = 0; p < kPixelValues; ++p) {
            float t = (static_cast<float>(p) + phase) / period;
            t -= std::floor(t);
            float tri = t < 0.5f ? 2.0f * t : 2.0f - 2.0f * t;
            if (!rising) tri = 1.0f - tri;
            if (!ramp) tri += rng.uniform(-0.03f, 0.03f);
            tri = std::min(1.0f, std::max(0.0f, tri));
            ev[static_cast<std::size_t>(j) * kPixelValues + p] = lo + tri * (hi - lo);
        }
    }
    table.validate();
    return table;
}

namespace {

void check_pixels(const ImageBatch& image) {
    if (image.c != 3) {
        throw ValueError("pixel embedding: expected 3 color components, got " +
                         std::to_string(image.c));
    }
    for (int v : image.pixels) {
        if (v < 0 || v >= kPixelValues) {
            throw ValueError("pixel embedding: pixel value " + std::to_string(v) +
                             " outside 0..255");
        }
    }
}

}  // namespace

Tensor embed_train(Tape& tape, const ImageBatch& image, const EmbeddingTable& table) {
    table.validate();
    check_pixels(image);
    const int n = image.n, h = image.h, w = image.w, d = table.d;

    // Index order (n, c, h, w) so that a reshape of the gathered (d, M)
    // block to (d, n, 3, h, w) lines up without data movement.
    std::vector<int> indices;
    indices.reserve(static_cast<std::size_t>(image.numel()));
    for (int in = 0; in < n; ++in) {
        for (int ic = 0; ic < 3; ++ic) {
            for (int ih = 0; ih < h; ++ih) {
                for (int iw = 0; iw < w; ++iw) {
                    indices.push_back(image.at(in, ih, iw, ic));
                }
            }
        }
    }
    Tensor gathered = tape.gather_columns(table.weights, indices);
    Tensor quantized = quantize_activation(tape, gathered, table.quant);
    Tensor grouped = tape.reshape(quantized, {d, n, 3, h, w});
    Tensor interleaved = tape.permute(grouped, {1, 2, 0, 3, 4});
    return tape.reshape(interleaved, {n, 3 * d, h, w});
}

Tensor embed_forward(const ImageBatch& image, const EmbeddingTable& table) {
    table.validate();
    check_pixels(image);
    const int n = image.n, h = image.h, w = image.w, d = table.d;
    Tensor out = Tensor::zeros({n, 3 * d, h, w});
    auto ov = out.values();
    const auto ev = table.weights.values();
    const auto plane = static_cast<std::int64_t>(h) * w;
    for (int in = 0; in < n; ++in) {
        for (int ih = 0; ih < h; ++ih) {
            for (int iw = 0; iw < w; ++iw) {
                const std::int64_t pos = static_cast<std::int64_t>(ih) * w + iw;
                for (int ic = 0; ic < 3; ++ic) {
                    const int p = image.at(in, ih, iw, ic);
                    for (int j = 0; j < d; ++j) {
                        ov[static_cast<std::size_t>(
                            (static_cast<std::int64_t>(in) * 3 * d + ic * d + j) * plane + pos)] =
                            quantize_value(ev[static_cast<std::size_t>(j) * kPixelValues + p],
                                           table.quant);
                    }
                }
            }
        }
    }
    return out;
}

MergedTable merge_table(const EmbeddingTable& table) {
    table.validate();
    MergedTable merged;
    merged.d = table.d;
    merged.bits = table.quant.activation_bits;
    merged.scale = table.quant.scale();
    merged.zero_level = static_cast<int>(std::round(-table.quant.range_lo / merged.scale));
    merged.codes.resize(static_cast<std::size_t>(kPixelValues) * table.d);
    const auto ev = table.weights.values();
    for (int p = 0; p < kPixelValues; ++p) {
        for (int j = 0; j < table.d; ++j) {
            merged.codes[static_cast<std::size_t>(p) * table.d + j] = static_cast<std::uint8_t>(
                quantize_code(ev[static_cast<std::size_t>(j) * kPixelValues + p], table.quant));
        }
    }
    return merged;
}

QuantizedTensor embed_infer(const ImageBatch& image, const MergedTable& merged) {
    check_pixels(image);
    if (merged.d < 1 || merged.codes.size() != static_cast<std::size_t>(kPixelValues) * merged.d) {
        throw ValueError("embed-infer: malformed merged table");
    }
    const int n = image.n, h = image.h, w = image.w, d = merged.d;
    QuantizedTensor out;
    out.shape = {n, 3 * d, h, w};
    out.bits = merged.bits;
    out.scale = merged.scale;
    out.zero_level = merged.zero_level;
    out.codes.resize(static_cast<std::size_t>(out.numel()));
    const auto plane = static_cast<std::int64_t>(h) * w;
    for (int in = 0; in < n; ++in) {
        for (int ih = 0; ih < h; ++ih) {
            for (int iw = 0; iw < w; ++iw) {
                const std::int64_t pos = static_cast<std::int64_t>(ih) * w + iw;
                for (int ic = 0; ic < 3; ++ic) {
                    const auto entry = merged.entry(image.at(in, ih, iw, ic));
                    for (int j = 0; j < d; ++j) {
                        out.codes[static_cast<std::size_t>(
                            (static_cast<std::int64_t>(in) * 3 * d + ic * d + j) * plane + pos)] =
                            entry[static_cast<std::size_t>(j)];
                    }
                }
            }
        }
    }
    return out;
}

std::vector<std::uint8_t> merged_payload(const MergedTable& merged) {
    const std::size_t total_bits =
        static_cast<std::size_t>(kPixelValues) * merged.d * merged.bits;
    std::vector<std::uint8_t> payload((total_bits + 7) / 8, 0);
    std::size_t bit = 0;
    for (const std::uint8_t code : merged.codes) {
        for (int q = 0; q < merged.bits; ++q, ++bit) {
            if (code & (1u << q)) {
                payload[bit >> 3] |= static_cast<std::uint8_t>(1u << (bit & 7));
            }
        }
    }
    return payload;
}

MergedTable merged_from_payload(int d, int bits, float scale, int zero_level,
                                std::span<const std::uint8_t> payload) {
    const std::size_t total_bits = static_cast<std::size_t>(kPixelValues) * d * bits;
    if (payload.size() != (total_bits + 7) / 8) {
        throw ValueError("merged table payload: expected " +
                         std::to_string((total_bits + 7) / 8) + " bytes, got " +
                         std::to_string(payload.size()));
    }
    MergedTable merged;
    merged.d = d;
    merged.bits = bits;
    merged.scale = scale;
    merged.zero_level = zero_level;
    merged.codes.resize(static_cast<std::size_t>(kPixelValues) * d);
    std::size_t bit = 0;
    for (auto& code : merged.codes) {
        unsigned value = 0;
        for (int q = 0; q < bits; ++q, ++bit) {
            if (payload[bit >> 3] & (1u << (bit & 7))) value |= 1u << q;
        }
        code = static_cast<std::uint8_t>(value);
    }
    return merged;
}

}  // namespace pixemb
