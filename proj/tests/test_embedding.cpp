#include <cmath>

#include "doctest.h"
#include "pixemb/embedding.hpp"
#include "support/oracles.hpp"

using namespace pixemb;

namespace {

EmbeddingTable random_table(int d, int bits, Rng& rng) {
    QuantConfig cfg;
    cfg.activation_bits = bits;
    return make_embedding_table(d, cfg, rng);
}

ImageBatch random_image(int n, int h, int w, Rng& rng) {
    ImageBatch b;
    b.n = n;
    b.h = h;
    b.w = w;
    b.pixels.resize(static_cast<std::size_t>(b.numel()));
    for (auto& p : b.pixels) p = rng.uniform_int(0, 255);
    return b;
}

// Independent route: e = E h(p) as an explicit matrix product, then the
// quantizer formula, written against the documented output layout.
std::vector<float> embed_ref(const ImageBatch& img, const EmbeddingTable& table) {
    const int d = table.d;
    std::vector<float> out(static_cast<std::size_t>(img.n) * 3 * d * img.h * img.w);
    const auto plane = static_cast<std::int64_t>(img.h) * img.w;
    for (int n = 0; n < img.n; ++n) {
        for (int y = 0; y < img.h; ++y) {
            for (int x = 0; x < img.w; ++x) {
                for (int c = 0; c < 3; ++c) {
                    const auto h = one_hot(img.at(n, y, x, c), kPixelValues);
                    for (int j = 0; j < d; ++j) {
                        double acc = 0.0;
                        for (int p = 0; p < kPixelValues; ++p) {
                            acc += table.weights.at(static_cast<std::int64_t>(j) * kPixelValues +
                                                    p) *
                                   h[static_cast<std::size_t>(p)];
                        }
                        out[static_cast<std::size_t>(
                            (static_cast<std::int64_t>(n) * 3 * d + c * d + j) * plane +
                            static_cast<std::int64_t>(y) * img.w + x)] =
                            quantize_value(static_cast<float>(acc), table.quant);
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace

TEST_CASE("one_hot basics") {
    CHECK(one_hot(1, 4) == std::vector<float>{0, 1, 0, 0});
    CHECK(one_hot(0, 2) == std::vector<float>{1, 0});
    const auto e255 = one_hot(255, 256);
    int ones = 0;
    for (std::size_t i = 0; i < e255.size(); ++i) {
        if (e255[i] != 0.0f) {
            ++ones;
            CHECK(i == 255);
            CHECK(e255[i] == 1.0f);
        }
    }
    CHECK(ones == 1);
    CHECK_THROWS_AS(one_hot(4, 4), IndexError);
    CHECK_THROWS_AS(one_hot(-1, 4), IndexError);
}

TEST_CASE("embed_train: zero column gives zero output, shape (n, 3d, h, w)") {
    Rng rng(41);
    auto table = random_table(4, 2, rng);
    for (int j = 0; j < 4; ++j) {
        table.weights.at(static_cast<std::int64_t>(j) * kPixelValues) = 0.0f;
    }
    ImageBatch img;
    img.n = 1;
    img.h = 1;
    img.w = 1;
    img.pixels = {0, 0, 0};
    Tape tape;
    Tensor out = embed_train(tape, img, table);
    CHECK(out.shape == std::vector<int>{1, 12, 1, 1});
    for (const float v : *out.data) CHECK(v == 0.0f);
}

TEST_CASE("embed_train: one shared table, identical blocks per component") {
    Rng rng(42);
    const auto table = random_table(6, 2, rng);
    ImageBatch img;
    img.n = 1;
    img.h = 1;
    img.w = 1;
    img.pixels = {5, 5, 5};
    Tape tape;
    Tensor out = embed_train(tape, img, table);
    REQUIRE(out.shape == std::vector<int>{1, 18, 1, 1});
    for (int j = 0; j < 6; ++j) {
        const float r = out.at(j);
        CHECK(out.at(6 + j) == r);
        CHECK(out.at(12 + j) == r);
    }
}

TEST_CASE("embed_train equals the explicit one-hot matrix product route") {
    Rng rng(43);
    for (int trial = 0; trial < 5; ++trial) {
        const auto table = random_table(4, 2, rng);
        const auto img = random_image(2, 2, 2, rng);
        Tape tape;
        Tensor out = embed_train(tape, img, table);
        const auto ref = embed_ref(img, table);
        REQUIRE(static_cast<std::size_t>(out.numel()) == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            CHECK(out.at(static_cast<std::int64_t>(i)) == ref[i]);
        }
    }
}

TEST_CASE("embed_train rejects out-of-range pixels") {
    Rng rng(44);
    const auto table = random_table(2, 2, rng);
    ImageBatch img;
    img.n = 1;
    img.h = 1;
    img.w = 1;
    img.pixels = {0, 300, 0};
    Tape tape;
    CHECK_THROWS_AS(embed_train(tape, img, table), ValueError);
    img.pixels = {0, -1, 0};
    CHECK_THROWS_AS(embed_train(tape, img, table), ValueError);
}

TEST_CASE("merge_table: all-zero table gives all-zero codes") {
    QuantConfig cfg;
    EmbeddingTable table;
    table.d = 3;
    table.quant = cfg;
    table.weights = Tensor::zeros({3, kPixelValues});
    const auto merged = merge_table(table);
    for (const auto code : merged.codes) CHECK(code == 0);
}

TEST_CASE("merge_table: 0.5 rounds away from zero to code 2") {
    QuantConfig cfg;  // Q=2, levels {0, 1/3, 2/3, 1}
    EmbeddingTable table;
    table.d = 1;
    table.quant = cfg;
    table.weights = Tensor::zeros({1, kPixelValues});
    table.weights.at(7) = 0.5f;
    const auto merged = merge_table(table);
    CHECK(merged.entry(7)[0] == 2);
}

TEST_CASE("merge exactness: infer lookup equals train forward bit-exactly") {
    Rng rng(45);
    for (const int d : {1, 4, 8}) {
        for (const int bits : {1, 2, 3}) {
            const auto table = random_table(d, bits, rng);
            const auto merged = merge_table(table);
            // All 256 pixel values in one sweep image.
            ImageBatch img;
            img.n = 1;
            img.h = 16;
            img.w = 16;
            img.pixels.resize(256 * 3);
            for (int p = 0; p < 256; ++p) {
                for (int c = 0; c < 3; ++c) img.pixels[static_cast<std::size_t>(p * 3 + c)] = p;
            }
            Tape tape;
            Tensor train_out = embed_train(tape, img, table);
            const auto infer_out = embed_infer(img, merged);
            REQUIRE(infer_out.shape == train_out.shape);
            for (std::int64_t i = 0; i < train_out.numel(); ++i) {
                const float dq = infer_out.dequant(infer_out.codes[static_cast<std::size_t>(i)]);
                CHECK(dq == train_out.at(i));  // bit-exact
            }
        }
    }
}

TEST_CASE("merged payload is exactly 256*d*Q bits, round-trips") {
    Rng rng(46);
    for (const int d : {1, 4, 8, 16}) {
        for (const int bits : {1, 2, 3}) {
            const auto table = random_table(d, bits, rng);
            const auto merged = merge_table(table);
            const auto payload = merged_payload(merged);
            CHECK(payload.size() == (static_cast<std::size_t>(256) * d * bits + 7) / 8);
            const auto back =
                merged_from_payload(d, bits, merged.scale, merged.zero_level, payload);
            CHECK(back.codes == merged.codes);
        }
    }
    // d=8, Q=2: 4096 bits = 512 bytes.
    Rng rng2(47);
    const auto t = random_table(8, 2, rng2);
    CHECK(merged_payload(merge_table(t)).size() == 512);
}

TEST_CASE("gradient reaches only the columns of pixel values present") {
    Rng rng(48);
    const auto table = random_table(3, 2, rng);
    ImageBatch img;
    img.n = 1;
    img.h = 2;
    img.w = 2;
    // values 10 and 20 only; 20 appears three times
    img.pixels = {10, 10, 10, 20, 20, 20, 20, 20, 20, 20, 20, 20};
    Tape tape;
    Tensor weights = table.weights;
    tape.leaf(weights);
    EmbeddingTable live = table;
    live.weights = weights;
    Tensor out = embed_train(tape, img, live);
    const int n = static_cast<int>(out.numel());
    std::vector<float> proj(static_cast<std::size_t>(n));
    for (auto& v : proj) v = rng.uniform(0.1f, 1.0f);
    Tensor loss = tape.matmul(tape.reshape(out, {1, n}), Tensor::from({n, 1}, proj));
    tape.backward(loss);
    const auto grad = tape.grad(weights.grad_id);
    for (int j = 0; j < 3; ++j) {
        for (int p = 0; p < kPixelValues; ++p) {
            const float g = grad[static_cast<std::size_t>(j) * kPixelValues +
                                 static_cast<std::size_t>(p)];
            if (p == 10 || p == 20) {
                CHECK(g != 0.0f);
            } else {
                CHECK(g == 0.0f);
            }
        }
    }
}

TEST_CASE("embed_infer repeats the entry across equal components") {
    Rng rng(49);
    const auto table = random_table(5, 2, rng);
    const auto merged = merge_table(table);
    ImageBatch img;
    img.n = 1;
    img.h = 1;
    img.w = 1;
    img.pixels = {77, 77, 77};
    const auto out = embed_infer(img, merged);
    REQUIRE(out.codes.size() == 15);
    for (int c = 0; c < 3; ++c) {
        for (int j = 0; j < 5; ++j) {
            CHECK(out.codes[static_cast<std::size_t>(c * 5 + j)] ==
                  merged.entry(77)[static_cast<std::size_t>(j)]);
        }
    }
}

TEST_CASE("embed_train/embed_infer composite STE gradient vs clamp surrogate") {
    // Table entries sit inside the clip region, away from its edges, so the
    // surrogate difference quotient is the gather scatter itself.
    Rng rng(50);
    QuantConfig cfg;
    EmbeddingTable table;
    table.d = 2;
    table.quant = cfg;
    table.weights = Tensor::zeros({2, kPixelValues});
    for (auto& v : *table.weights.data) v = rng.uniform(0.05f, 0.95f);

    ImageBatch img = random_image(1, 3, 3, rng);
    Tape tape;
    Tensor weights = table.weights;
    tape.leaf(weights);
    EmbeddingTable live = table;
    live.weights = weights;
    Tensor out = embed_train(tape, img, live);
    const int n = static_cast<int>(out.numel());
    std::vector<float> proj(static_cast<std::size_t>(n));
    for (auto& v : proj) v = rng.uniform(-1.0f, 1.0f);
    Tensor loss = tape.matmul(tape.reshape(out, {1, n}), Tensor::from({n, 1}, proj));
    tape.backward(loss);
    const auto grad = tape.grad(weights.grad_id);

    // Surrogate objective: same layout, quantizer replaced by its
    // straight-through clamp.
    auto surrogate = [&](const std::vector<float>& w) {
        double acc = 0.0;
        const auto plane = static_cast<std::int64_t>(img.h) * img.w;
        for (int y = 0; y < img.h; ++y) {
            for (int x = 0; x < img.w; ++x) {
                for (int c = 0; c < 3; ++c) {
                    const int p = img.at(0, y, x, c);
                    for (int j = 0; j < 2; ++j) {
                        const double v = std::min(
                            1.0, std::max(0.0, static_cast<double>(w[static_cast<std::size_t>(
                                                   j * kPixelValues + p)])));
                        acc += v * proj[static_cast<std::size_t>(
                                   (c * 2 + j) * plane + y * img.w + x)];
                    }
                }
            }
        }
        return acc;
    };
    const double h = 1e-3;
    std::vector<float> w0(*table.weights.data);
    for (std::size_t i = 0; i < w0.size(); ++i) {
        if (grad[i] == 0.0f) continue;  // untouched column
        auto wp = w0, wm = w0;
        wp[i] += static_cast<float>(h);
        wm[i] -= static_cast<float>(h);
        const double fd = (surrogate(wp) - surrogate(wm)) / (2.0 * h);
        CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-2));
    }
}
