#include "doctest.h"
#include "pixemb/bitpack.hpp"
#include "pixemb/kernels.hpp"
#include "support/oracles.hpp"

using namespace pixemb;

namespace {

QuantizedTensor random_codes(std::vector<int> shape, int bits, Rng& rng) {
    QuantizedTensor q;
    q.shape = std::move(shape);
    q.bits = bits;
    QuantConfig cfg;
    cfg.activation_bits = bits;
    q.scale = cfg.scale();
    q.zero_level = 0;
    q.codes.resize(static_cast<std::size_t>(q.numel()));
    for (auto& c : q.codes) {
        c = static_cast<std::uint8_t>(rng.uniform_int(0, (1 << bits) - 1));
    }
    return q;
}

Tensor random_weights(std::vector<int> shape, Rng& rng) {
    Tensor w = Tensor::zeros(std::move(shape));
    for (auto& v : *w.data) v = rng.uniform(-1.0f, 1.0f);
    return w;
}

std::vector<std::int8_t> signs_of(const Tensor& w) {
    std::vector<std::int8_t> s(static_cast<std::size_t>(w.numel()));
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = (*w.data)[i] < 0.0f ? -1 : 1;
    }
    return s;
}

}  // namespace

TEST_CASE("pack: single element, code 3, Q=2 sets planes 0 and 1 at lane 0") {
    QuantizedTensor q;
    q.shape = {1, 1, 1, 1};
    q.bits = 2;
    q.codes = {3};
    const auto p = pack_activations(q);
    REQUIRE(p.planes.size() == 2);
    CHECK(p.planes[0] == 1ull);
    CHECK(p.planes[1] == 1ull);
}

TEST_CASE("pack: all-zero codes give all-zero words") {
    Rng rng(61);
    auto q = random_codes({2, 7, 3, 3}, 2, rng);
    std::fill(q.codes.begin(), q.codes.end(), 0);
    const auto p = pack_activations(q);
    for (const auto w : p.planes) CHECK(w == 0ull);
}

TEST_CASE("pack rejects out-of-range codes") {
    QuantizedTensor q;
    q.shape = {1, 1, 1, 1};
    q.bits = 2;
    q.codes = {4};
    CHECK_THROWS_AS(pack_activations(q), ValueError);
}

TEST_CASE("pack/unpack round-trips across the 64-lane padding boundary") {
    Rng rng(62);
    for (const int c : {1, 63, 64, 65}) {
        for (const int bits : {1, 2, 3}) {
            const auto q = random_codes({2, c, 3, 2}, bits, rng);
            const auto p = pack_activations(q);
            // padded lanes stay zero
            if (c % 64 != 0) {
                const std::uint64_t valid_mask =
                    (c % 64 == 63) ? ~(1ull << 63) : ((1ull << (c % 64)) - 1);
                for (int k = 0; k < bits; ++k) {
                    for (std::int64_t pos = 0; pos < p.plane_stride(); pos += p.words_per_pos) {
                        const auto word =
                            p.planes[static_cast<std::size_t>(k * p.plane_stride() + pos +
                                                              p.words_per_pos - 1)];
                        CHECK((word & ~valid_mask) == 0ull);
                    }
                }
            }
            const auto back = unpack_activations(p);
            CHECK(back.codes == q.codes);
        }
    }
}

TEST_CASE("packed weights reproduce alpha * sign exactly") {
    Rng rng(63);
    Tensor w = random_weights({3, 70, 3, 3}, rng);
    w.at(0) = 0.0f;  // sign(0) = +1
    const auto packed = pack_weights(w);
    const auto dense = unpack_weights(packed);
    const auto alphas = weight_alphas(w);
    const std::int64_t per = w.numel() / 3;
    for (std::int64_t c = 0; c < 3; ++c) {
        for (std::int64_t i = 0; i < per; ++i) {
            const float expect =
                w.at(c * per + i) < 0.0f ? -alphas[static_cast<std::size_t>(c)]
                                         : alphas[static_cast<std::size_t>(c)];
            CHECK(dense.at(c * per + i) == expect);
        }
    }
}

TEST_CASE("packed_conv2d: 1x1 kernel identity case") {
    QuantizedTensor q;
    q.shape = {1, 1, 1, 1};
    q.bits = 2;
    QuantConfig cfg;
    q.scale = cfg.scale();
    q.codes = {3};  // value 1.0
    Tensor w = Tensor::from({1, 1, 1, 1}, {1.0f});
    const auto acc = packed_conv2d(pack_activations(q), pack_weights(w), 1, 0);
    REQUIRE(acc.acc.size() == 1);
    CHECK(acc.acc[0] == 3);
    const auto out = accum_to_float(acc, pack_weights(w).alpha, q.scale);
    CHECK(out.at(0) == 1.0f);
}

TEST_CASE("packed_conv2d: all-minus weights negate the all-plus output") {
    Rng rng(64);
    const auto q = random_codes({1, 5, 4, 4}, 2, rng);
    Tensor wp = Tensor::full({2, 5, 3, 3}, 0.5f);
    Tensor wm = Tensor::full({2, 5, 3, 3}, -0.5f);
    const auto packed = pack_activations(q);
    const auto acc_p = packed_conv2d(packed, pack_weights(wp), 1, 1);
    const auto acc_m = packed_conv2d(packed, pack_weights(wm), 1, 1);
    REQUIRE(acc_p.acc.size() == acc_m.acc.size());
    for (std::size_t i = 0; i < acc_p.acc.size(); ++i) {
        CHECK(acc_m.acc[i] == -acc_p.acc[i]);
    }
}

TEST_CASE("packed_conv2d equals the naive integer convolution") {
    Rng rng(65);
    for (const int c : {1, 7, 63, 64, 65}) {
        for (const int stride : {1, 2}) {
            for (const int bits : {1, 2, 3}) {
                const auto q = random_codes({2, c, 5, 6}, bits, rng);
                Tensor w = random_weights({3, c, 3, 3}, rng);
                const auto acc = packed_conv2d(pack_activations(q), pack_weights(w), stride, 1);
                const auto ref =
                    oracles::int_conv_ref(q.codes, q.shape, signs_of(w), w.shape, stride, 1);
                CHECK(acc.acc == ref);
            }
        }
    }
}

TEST_CASE("packed path equals the float training conv within 1e-5") {
    Rng rng(66);
    const auto q = random_codes({1, 24, 8, 8}, 2, rng);
    Tensor w = random_weights({16, 24, 3, 3}, rng);
    const auto packed_w = pack_weights(w);
    const auto acc = packed_conv2d(pack_activations(q), packed_w, 1, 1);
    const Tensor packed_out = accum_to_float(acc, packed_w.alpha, q.scale);

    // Training-graph route: dequantized activations through the float conv
    // with binarized weights.
    Tape tape;
    Tensor x = dequantize(q);
    auto wq = quantize_weight(tape, w);
    Tensor float_out = tape.conv2d(x, wq.y, 1, 1);

    REQUIRE(packed_out.numel() == float_out.numel());
    for (std::int64_t i = 0; i < packed_out.numel(); ++i) {
        CHECK(packed_out.at(i) == doctest::Approx(float_out.at(i)).epsilon(1e-5));
    }
}
