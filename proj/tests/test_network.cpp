#include <cmath>
#include <set>

#include "doctest.h"
#include "pixemb/dataset.hpp"
#include "pixemb/network.hpp"

using namespace pixemb;

namespace {

ImageBatch small_batch(int n, std::uint64_t seed) {
    const auto data = make_synthetic(n, seed);
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    return data.batch(idx);
}

}  // namespace

TEST_CASE("preset names round-trip") {
    for (const auto p :
         {Preset::FpFirst, Preset::WqFirst, Preset::IwqFirst, Preset::PixembFirst}) {
        CHECK(preset_from_string(preset_name(p)) == p);
    }
    CHECK_THROWS_AS(preset_from_string("bogus"), ValueError);
}

TEST_CASE("build_model: pixemb first block is embed + 24-channel quant conv") {
    auto m = build_model(Preset::PixembFirst, 8, 10);
    REQUIRE(m.layers.size() >= 2);
    CHECK(m.layers[0].kind == LayerKind::PixelEmbed);
    CHECK(m.layers[0].out_ch == 24);
    CHECK(m.layers[1].kind == LayerKind::QuantConv);
    CHECK(m.params.at("first.conv.w").shape == std::vector<int>{16, 24, 3, 3});
    CHECK(m.params.at("embed.table").shape == std::vector<int>{8, 256});
}

TEST_CASE("build_model: fp first layer is a plain float conv") {
    auto m = build_model(Preset::FpFirst, 0, 10);
    CHECK(m.layers[0].kind == LayerKind::Conv);
    CHECK(m.params.at("first.conv.w").shape == std::vector<int>{16, 3, 3, 3});
    CHECK(m.params.count("embed.table") == 0);
}

TEST_CASE("build_model: trunk parameter shapes identical across presets") {
    const auto a = build_model(Preset::FpFirst, 0, 10);
    const auto b = build_model(Preset::WqFirst, 0, 10);
    const auto c = build_model(Preset::IwqFirst, 0, 10);
    const auto d = build_model(Preset::PixembFirst, 8, 10);
    auto trunk_shapes = [](const ModelGraph& m) {
        std::map<std::string, std::vector<int>> shapes;
        for (const auto& [name, t] : m.params) {
            if (name.rfind("first.", 0) == 0 || name.rfind("embed.", 0) == 0) continue;
            shapes[name] = t.shape;
        }
        return shapes;
    };
    const auto ref = trunk_shapes(a);
    CHECK(trunk_shapes(b) == ref);
    CHECK(trunk_shapes(c) == ref);
    CHECK(trunk_shapes(d) == ref);
}

TEST_CASE("fresh model loss is close to ln(num_classes)") {
    auto m = build_model(Preset::PixembFirst, 8, 10, {.seed = 3});
    const auto batch = small_batch(20, 3);
    std::vector<int> labels(20, 0);
    auto fwd = forward(m, batch, Mode::Train);
    Tensor loss = fwd.tape->softmax_cross_entropy(fwd.logits, labels);
    CHECK(loss.at(0) == doctest::Approx(std::log(10.0)).epsilon(0.25));
}

TEST_CASE("iwq first layer input equals quantize_activation(pixel/255)") {
    auto m = build_model(Preset::IwqFirst, 0, 10, {.seed = 5});
    // Indirect check through the packed path: first conv consumes exactly the
    // 2-bit codes of pixel/255. A pixel of 100 quantizes to code 1.
    CHECK(quantize_code(100.0f / 255.0f, m.act_q) == 1);
    CHECK(quantize_code(10.0f / 255.0f, m.act_q) == 0);
    CHECK(m.layers[0].kind == LayerKind::ActivationQuant);
    CHECK(m.layers[1].kind == LayerKind::QuantConv);
}

TEST_CASE("argmax: lowest index wins ties") {
    Tensor logits = Tensor::from({1, 3}, {3.0f, 7.0f, 7.0f});
    CHECK(argmax_classes(logits) == std::vector<int>{1});
    // invariance under a strictly increasing transform
    Tensor warped = Tensor::from({1, 3}, {std::exp(3.0f), std::exp(7.0f), std::exp(7.0f)});
    CHECK(argmax_classes(warped) == std::vector<int>{1});
}

TEST_CASE("forward: train and infer-float agree after batch-norm warmup") {
    auto m = build_model(Preset::PixembFirst, 4, 10, {.seed = 7});
    const auto batch = small_batch(32, 9);
    // A few train passes move the running statistics toward batch statistics.
    for (int i = 0; i < 12; ++i) forward(m, batch, Mode::Train);
    const auto train_fwd = forward(m, batch, Mode::Train);
    const auto infer_fwd = forward(m, batch, Mode::InferFloat);
    const auto a = argmax_classes(train_fwd.logits);
    const auto b = argmax_classes(infer_fwd.logits);
    int agree = 0;
    for (std::size_t i = 0; i < a.size(); ++i) agree += a[i] == b[i];
    CHECK(agree >= static_cast<int>(a.size() * 3 / 4));
}

TEST_CASE("infer-packed unsupported for fp-first") {
    auto m = build_model(Preset::FpFirst, 0, 10, {.seed = 11});
    const auto batch = small_batch(2, 13);
    CHECK_THROWS_WITH_AS(forward(m, batch, Mode::InferPacked),
                         doctest::Contains("fp-first"), ValueError);
}

TEST_CASE("infer-float and infer-packed produce matching logits") {
    // Code flips at exact requantization boundaries can differ between the
    // two float summation orders, so prediction-level identity is checked on
    // converged models by the acceptance suite; here the logits of a fresh
    // model must match tightly and predictions may differ only sparsely.
    for (const auto preset : {Preset::PixembFirst, Preset::IwqFirst, Preset::WqFirst}) {
        auto m = build_model(preset, 8, 10, {.seed = 17});
        const auto batch = small_batch(64, 19);
        for (int i = 0; i < 6; ++i) forward(m, batch, Mode::Train);  // warm bn stats
        const auto f = forward(m, batch, Mode::InferFloat);
        const auto p = forward(m, batch, Mode::InferPacked);
        const auto fa = argmax_classes(f.logits);
        const auto pa = argmax_classes(p.logits);
        int agree = 0;
        for (std::size_t i = 0; i < fa.size(); ++i) agree += fa[i] == pa[i];
        CHECK(agree >= 48);
        for (std::int64_t i = 0; i < f.logits.numel(); ++i) {
            CHECK(f.logits.at(i) == doctest::Approx(p.logits.at(i)).epsilon(5e-2).scale(1.0));
        }
    }
}

TEST_CASE("packed quantized head yields integer logits matching accumulators") {
    auto m = build_model(Preset::PixembFirst, 4, 10, {.seed = 23});
    const auto batch = small_batch(4, 29);
    const auto fwd = forward(m, batch, Mode::InferPacked);
    REQUIRE(fwd.int_logits.size() == static_cast<std::size_t>(fwd.logits.numel()));
    // argmax over integer accumulators equals argmax over float logits
    for (int i = 0; i < 4; ++i) {
        int best = 0;
        for (int j = 1; j < 10; ++j) {
            if (fwd.int_logits[static_cast<std::size_t>(i * 10 + j)] >
                fwd.int_logits[static_cast<std::size_t>(i * 10 + best)]) {
                best = j;
            }
        }
        CHECK(argmax_classes(fwd.logits)[static_cast<std::size_t>(i)] == best);
    }
}

TEST_CASE("pixemb channel count entering conv1 is exactly 3d") {
    for (const int d : {1, 4, 8, 16}) {
        auto m = build_model(Preset::PixembFirst, d, 10);
        CHECK(m.params.at("first.conv.w").shape[1] == 3 * d);
    }
}
