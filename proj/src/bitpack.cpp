#include "pixemb/bitpack.hpp"

#include <bit>
#include <limits>

#include "pixemb/kernels.hpp"

namespace pixemb {

PackedTensor pack_activations(const QuantizedTensor& q) {
    if (q.shape.size() != 4) {
        throw ShapeError("pack-activations: expected 4-d codes, got " + shape_to_string(q.shape));
    }
    PackedTensor p;
    p.n = q.shape[0];
    p.c = q.shape[1];
    p.h = q.shape[2];
    p.w = q.shape[3];
    p.bits = q.bits;
    p.scale = q.scale;
    p.zero_level = q.zero_level;
    p.words_per_pos = (p.c + 63) / 64;
    p.planes.assign(static_cast<std::size_t>(p.bits) * p.plane_stride(), 0);

    const unsigned max_code = (1u << q.bits) - 1;
    const auto plane = static_cast<std::int64_t>(p.h) * p.w;
    const auto plane_stride = p.plane_stride();
    const auto channel_words = static_cast<std::size_t>(p.words_per_pos);
    // Channel-major gather per position: the destination words stay in
    // registers while the lanes fill up.
    std::vector<std::uint64_t> words(static_cast<std::size_t>(p.bits) * channel_words);
    for (int in = 0; in < p.n; ++in) {
        const std::uint8_t* image =
            q.codes.data() + static_cast<std::int64_t>(in) * p.c * plane;
        for (std::int64_t pos = 0; pos < plane; ++pos) {
            std::fill(words.begin(), words.end(), 0);
            const std::uint8_t* src = image + pos;
            for (int ic = 0; ic < p.c; ++ic) {
                const unsigned code = src[static_cast<std::int64_t>(ic) * plane];
                if (code > max_code) {
                    throw ValueError("pack-activations: code " + std::to_string(code) +
                                     " exceeds " + std::to_string(max_code));
                }
                const int shift = ic & 63;
                const auto word = static_cast<std::size_t>(ic >> 6);
                for (int k = 0; k < p.bits; ++k) {
                    words[static_cast<std::size_t>(k) * channel_words + word] |=
                        static_cast<std::uint64_t>((code >> k) & 1u) << shift;
                }
            }
            const std::int64_t dst = (static_cast<std::int64_t>(in) * plane + pos) *
                                     p.words_per_pos;
            for (int k = 0; k < p.bits; ++k) {
                for (std::size_t wi = 0; wi < channel_words; ++wi) {
                    p.planes[static_cast<std::size_t>(k * plane_stride + dst) + wi] =
                        words[static_cast<std::size_t>(k) * channel_words + wi];
                }
            }
        }
    }
    return p;
}

QuantizedTensor unpack_activations(const PackedTensor& p) {
    QuantizedTensor q;
    q.shape = {p.n, p.c, p.h, p.w};
    q.bits = p.bits;
    q.scale = p.scale;
    q.zero_level = p.zero_level;
    q.codes.assign(static_cast<std::size_t>(q.numel()), 0);
    const auto plane = static_cast<std::int64_t>(p.h) * p.w;
    for (int in = 0; in < p.n; ++in) {
        for (std::int64_t pos = 0; pos < plane; ++pos) {
            const std::int64_t base =
                ((static_cast<std::int64_t>(in) * plane) + pos) * p.words_per_pos;
            for (int ic = 0; ic < p.c; ++ic) {
                unsigned code = 0;
                for (int k = 0; k < p.bits; ++k) {
                    const auto word =
                        p.planes[static_cast<std::size_t>(k * p.plane_stride() + base + (ic >> 6))];
                    if (word & (1ull << (ic & 63))) code |= 1u << k;
                }
                q.codes[static_cast<std::size_t>(
                    (static_cast<std::int64_t>(in) * p.c + ic) * plane + pos)] =
                    static_cast<std::uint8_t>(code);
            }
        }
    }
    return q;
}

namespace {

void build_cat_masks(PackedWeights& w) {
    const int taps = w.kh * w.kw;
    const std::int64_t cat_bits = static_cast<std::int64_t>(taps) * w.in_ch;
    w.cat_words = static_cast<int>((cat_bits + 63) / 64);
    w.pos_cat.assign(static_cast<std::size_t>(w.out_ch) * w.cat_words, 0);
    for (int oc = 0; oc < w.out_ch; ++oc) {
        std::uint64_t* cat = w.pos_cat.data() + static_cast<std::size_t>(oc) * w.cat_words;
        for (int t = 0; t < taps; ++t) {
            const std::uint64_t* src = w.sign_at(oc, t / w.kw, t % w.kw);
            for (int wi = 0; wi < w.words_per_tap; ++wi) {
                const std::int64_t off = static_cast<std::int64_t>(t) * w.in_ch + wi * 64;
                const int shift = static_cast<int>(off & 63);
                const auto idx = static_cast<std::size_t>(off >> 6);
                cat[idx] |= src[wi] << shift;
                if (shift != 0 && idx + 1 < static_cast<std::size_t>(w.cat_words)) {
                    cat[idx + 1] |= src[wi] >> (64 - shift);
                }
            }
        }
    }
}

}  // namespace

PackedWeights pack_weights(const Tensor& w, bool per_channel) {
    if (w.shape.size() != 4) {
        throw ShapeError("pack-weights: expected (out, in, kh, kw), got " +
                         shape_to_string(w.shape));
    }
    PackedWeights p;
    p.out_ch = w.shape[0];
    p.in_ch = w.shape[1];
    p.kh = w.shape[2];
    p.kw = w.shape[3];
    p.words_per_tap = (p.in_ch + 63) / 64;
    p.sign.assign(static_cast<std::size_t>(p.out_ch) * p.kh * p.kw * p.words_per_tap, 0);
    const auto alphas = weight_alphas(w, per_channel);
    p.alpha.resize(static_cast<std::size_t>(p.out_ch));
    for (int oc = 0; oc < p.out_ch; ++oc) {
        p.alpha[static_cast<std::size_t>(oc)] =
            per_channel ? alphas[static_cast<std::size_t>(oc)] : alphas[0];
    }
    const auto wv = w.values();
    for (int oc = 0; oc < p.out_ch; ++oc) {
        for (int ic = 0; ic < p.in_ch; ++ic) {
            for (int ky = 0; ky < p.kh; ++ky) {
                for (int kx = 0; kx < p.kw; ++kx) {
                    const auto v = wv[static_cast<std::size_t>(
                        ((static_cast<std::int64_t>(oc) * p.in_ch + ic) * p.kh + ky) * p.kw + kx)];
                    if (!(v < 0.0f)) {  // sign(0) = +1
                        p.sign[static_cast<std::size_t>(
                            (((static_cast<std::int64_t>(oc) * p.kh + ky) * p.kw + kx)) *
                                p.words_per_tap +
                            (ic >> 6))] |= 1ull << (ic & 63);
                    }
                }
            }
        }
    }
    build_cat_masks(p);
    return p;
}

PackedWeights make_packed_weights(int out_ch, int in_ch, int kh, int kw,
                                  std::vector<std::uint64_t> sign, std::vector<float> alpha) {
    PackedWeights p;
    p.out_ch = out_ch;
    p.in_ch = in_ch;
    p.kh = kh;
    p.kw = kw;
    p.words_per_tap = (in_ch + 63) / 64;
    const auto expect = static_cast<std::size_t>(out_ch) * kh * kw * p.words_per_tap;
    if (sign.size() != expect || alpha.size() != static_cast<std::size_t>(out_ch)) {
        throw ValueError("packed weights: section size mismatch");
    }
    p.sign = std::move(sign);
    p.alpha = std::move(alpha);
    build_cat_masks(p);
    return p;
}

Tensor unpack_weights(const PackedWeights& w) {
    Tensor t = Tensor::zeros({w.out_ch, w.in_ch, w.kh, w.kw});
    auto tv = t.values();
    for (int oc = 0; oc < w.out_ch; ++oc) {
        const float a = w.alpha[static_cast<std::size_t>(oc)];
        for (int ic = 0; ic < w.in_ch; ++ic) {
            for (int ky = 0; ky < w.kh; ++ky) {
                for (int kx = 0; kx < w.kw; ++kx) {
                    const bool positive = w.sign_at(oc, ky, kx)[ic >> 6] & (1ull << (ic & 63));
                    tv[static_cast<std::size_t>(
                        ((static_cast<std::int64_t>(oc) * w.in_ch + ic) * w.kh + ky) * w.kw + kx)] =
                        positive ? a : -a;
                }
            }
        }
    }
    return t;
}

ConvAccum packed_conv2d(const PackedTensor& x, const PackedWeights& w, int stride, int pad) {
    if (x.c != w.in_ch) {
        throw ShapeError("packed-conv2d: input channels " + std::to_string(x.c) +
                         " do not match weights " + std::to_string(w.in_ch));
    }
    if (x.zero_level != 0) {
        throw ValueError("packed-conv2d: nonzero activation zero level is not supported");
    }
    const auto g = kernels::conv_geom({x.n, x.c, x.h, x.w}, {w.out_ch, w.in_ch, w.kh, w.kw},
                                      stride, pad, "packed-conv2d");
    // Accumulator magnitude bound; int32 overflow would need > 2^31 taps*levels.
    const std::int64_t bound = static_cast<std::int64_t>((1 << x.bits) - 1) * x.c * w.kh * w.kw;
    if (bound > std::numeric_limits<std::int32_t>::max()) {
        throw ValueError("packed-conv2d: accumulator bound exceeds int32");
    }

    ConvAccum out;
    out.n = g.n;
    out.c = g.oc;
    out.h = g.oh;
    out.w = g.ow;
    out.acc.assign(static_cast<std::size_t>(g.out_numel()), 0);

    const int taps = w.kh * w.kw;
    const int cat_words = w.cat_words;
    const int bits = x.bits;

    // acc = sum_k 2^k (pop(a & pos) - pop(a & neg))
    //     = 2 * sum_k 2^k pop(a & pos) - T, with T independent of the output
    // channel. The receptive field is concatenated into one bit-run of in_ch
    // lanes per tap; out-of-bounds taps stay zero (padding is code 0).
    // Per (tap, word) placement in the concatenated bit-run.
    struct TapSlot {
        int dy, dx, wi, idx, shift;
    };
    std::vector<TapSlot> slots;
    slots.reserve(static_cast<std::size_t>(taps) * w.words_per_tap);
    for (int t = 0; t < taps; ++t) {
        for (int wi = 0; wi < w.words_per_tap; ++wi) {
            const std::int64_t off = static_cast<std::int64_t>(t) * w.in_ch + wi * 64;
            slots.push_back({t / w.kw - pad, t % w.kw - pad, wi, static_cast<int>(off >> 6),
                             static_cast<int>(off & 63)});
        }
    }

    auto kernel = [&]<int kBits, int kCatWords>() {
        const auto rows = static_cast<std::int64_t>(g.n) * g.oh;
        const int wpt = w.words_per_tap;
        parallel_for(rows, num_threads(), [&](std::int64_t lo, std::int64_t hi) {
            struct RowSlot {
                const std::uint64_t* src[3];  // one per plane, at iw = 0
                int dx, idx, shift;
            };
            std::vector<RowSlot> live;
            live.reserve(slots.size());
            for (std::int64_t row = lo; row < hi; ++row) {
                const int in = static_cast<int>(row / g.oh);
                const int oh = static_cast<int>(row % g.oh);
                live.clear();
                for (const auto& s : slots) {
                    const int ih = oh * stride + s.dy;
                    if (ih < 0 || ih >= x.h) continue;
                    RowSlot rs;
                    for (int k = 0; k < kBits; ++k) rs.src[k] = x.at(k, in, ih, 0) + s.wi;
                    rs.dx = s.dx;
                    rs.idx = s.idx;
                    rs.shift = s.shift;
                    live.push_back(rs);
                }
                std::int32_t* obase =
                    out.acc.data() + (static_cast<std::int64_t>(in) * g.oc * g.oh + oh) * g.ow;
                const std::int64_t oc_stride = static_cast<std::int64_t>(g.oh) * g.ow;
                std::uint64_t cat[kBits][kCatWords];
                for (int ow = 0; ow < g.ow; ++ow) {
                    for (int k = 0; k < kBits; ++k) {
                        for (int wi = 0; wi < kCatWords; ++wi) cat[k][wi] = 0;
                    }
                    const int iw0 = ow * stride;
                    for (const auto& rs : live) {
                        const int iw = iw0 + rs.dx;
                        if (iw < 0 || iw >= x.w) continue;
                        const std::int64_t word_off = static_cast<std::int64_t>(iw) * wpt;
                        for (int k = 0; k < kBits; ++k) {
                            const std::uint64_t v = rs.src[k][word_off];
                            cat[k][rs.idx] |= v << rs.shift;
                            if (rs.shift != 0 && rs.idx + 1 < kCatWords) {
                                cat[k][rs.idx + 1] |= v >> (64 - rs.shift);
                            }
                        }
                    }
                    std::int32_t t_total = 0;
                    for (int k = 0; k < kBits; ++k) {
                        std::int32_t tk = 0;
                        for (int wi = 0; wi < kCatWords; ++wi) tk += std::popcount(cat[k][wi]);
                        t_total += tk << k;
                    }
                    const std::uint64_t* mask = w.pos_cat.data();
                    std::int32_t* opos = obase + ow;
                    for (int oc = 0; oc < g.oc; ++oc, mask += cat_words) {
                        std::int32_t p_total = 0;
                        for (int k = 0; k < kBits; ++k) {
                            std::int32_t pk = 0;
                            for (int wi = 0; wi < kCatWords; ++wi) {
                                pk += std::popcount(cat[k][wi] & mask[wi]);
                            }
                            p_total += pk << k;
                        }
                        opos[oc * oc_stride] = 2 * p_total - t_total;
                    }
                }
            }
        });
    };

    // The trunk shapes all land in the small specializations.
    switch (bits * 100 + cat_words) {
        case 201: kernel.operator()<2, 1>(); break;
        case 202: kernel.operator()<2, 2>(); break;
        case 203: kernel.operator()<2, 3>(); break;
        case 204: kernel.operator()<2, 4>(); break;
        case 208: kernel.operator()<2, 8>(); break;
        case 209: kernel.operator()<2, 9>(); break;
        case 101: kernel.operator()<1, 1>(); break;
        case 102: kernel.operator()<1, 2>(); break;
        case 103: kernel.operator()<1, 3>(); break;
        case 104: kernel.operator()<1, 4>(); break;
        default: {
            // Generic fallback: same algorithm with runtime extents.
            const auto rows = static_cast<std::int64_t>(g.n) * g.oh;
            parallel_for(rows, num_threads(), [&](std::int64_t lo, std::int64_t hi) {
                std::vector<std::uint64_t> cat(static_cast<std::size_t>(bits) * cat_words);
                for (std::int64_t row = lo; row < hi; ++row) {
                    const int in = static_cast<int>(row / g.oh);
                    const int oh = static_cast<int>(row % g.oh);
                    for (int ow = 0; ow < g.ow; ++ow) {
                        std::fill(cat.begin(), cat.end(), 0);
                        for (int t = 0; t < taps; ++t) {
                            const int ih = oh * stride - pad + t / w.kw;
                            const int iw = ow * stride - pad + t % w.kw;
                            if (ih < 0 || ih >= x.h || iw < 0 || iw >= x.w) continue;
                            for (int k = 0; k < bits; ++k) {
                                const std::uint64_t* src = x.at(k, in, ih, iw);
                                std::uint64_t* dst =
                                    cat.data() + static_cast<std::size_t>(k) * cat_words;
                                for (int wi = 0; wi < w.words_per_tap; ++wi) {
                                    const std::int64_t off =
                                        static_cast<std::int64_t>(t) * w.in_ch + wi * 64;
                                    const int shift = static_cast<int>(off & 63);
                                    const auto idx = static_cast<std::size_t>(off >> 6);
                                    dst[idx] |= src[wi] << shift;
                                    if (shift != 0 && idx + 1 < static_cast<std::size_t>(cat_words)) {
                                        dst[idx + 1] |= src[wi] >> (64 - shift);
                                    }
                                }
                            }
                        }
                        std::int32_t t_total = 0;
                        for (int k = 0; k < bits; ++k) {
                            std::int32_t tk = 0;
                            const std::uint64_t* ck =
                                cat.data() + static_cast<std::size_t>(k) * cat_words;
                            for (int wi = 0; wi < cat_words; ++wi) tk += std::popcount(ck[wi]);
                            t_total += tk << k;
                        }
                        std::int32_t* orow = out.acc.data() +
                                             (static_cast<std::int64_t>(in) * g.oc * g.oh + oh) *
                                                 g.ow +
                                             ow;
                        const std::int64_t oc_stride = static_cast<std::int64_t>(g.oh) * g.ow;
                        for (int oc = 0; oc < g.oc; ++oc) {
                            const std::uint64_t* mask =
                                w.pos_cat.data() + static_cast<std::size_t>(oc) * cat_words;
                            std::int32_t p_total = 0;
                            for (int k = 0; k < bits; ++k) {
                                std::int32_t pk = 0;
                                const std::uint64_t* ck =
                                    cat.data() + static_cast<std::size_t>(k) * cat_words;
                                for (int wi = 0; wi < cat_words; ++wi) {
                                    pk += std::popcount(ck[wi] & mask[wi]);
                                }
                                p_total += pk << k;
                            }
                            orow[oc * oc_stride] = 2 * p_total - t_total;
                        }
                    }
                }
            });
        }
    }
    return out;
}

Tensor accum_to_float(const ConvAccum& a, std::span<const float> alpha, float act_scale) {
    if (alpha.size() != static_cast<std::size_t>(a.c)) {
        throw ShapeError("accum-to-float: expected " + std::to_string(a.c) + " scales, got " +
                         std::to_string(alpha.size()));
    }
    Tensor out = Tensor::zeros({a.n, a.c, a.h, a.w});
    auto ov = out.values();
    const auto plane = static_cast<std::int64_t>(a.h) * a.w;
    for (int in = 0; in < a.n; ++in) {
        for (int c = 0; c < a.c; ++c) {
            const float s = alpha[static_cast<std::size_t>(c)] * act_scale;
            const std::int64_t base = (static_cast<std::int64_t>(in) * a.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                ov[static_cast<std::size_t>(base + i)] =
                    s * static_cast<float>(a.acc[static_cast<std::size_t>(base + i)]);
            }
        }
    }
    return out;
}

}  // namespace pixemb
