#include "doctest.h"
#include "pixemb/dataset.hpp"
#include "pixemb/model_io.hpp"
#include "pixemb/trainer.hpp"

using namespace pixemb;

namespace {

ModelGraph trained_model(Preset preset, int d, std::uint64_t seed) {
    auto model = build_model(preset, d, 10, {.seed = seed});
    const auto data = make_synthetic(64, seed);
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.total_steps = 4;
    cfg.seed = seed;
    train(model, data, Dataset{}, cfg);
    return model;
}

ImageBatch probe_batch() {
    const auto data = make_synthetic(8, 123);
    std::vector<int> idx = {0, 1, 2, 3, 4, 5, 6, 7};
    return data.batch(idx);
}

}  // namespace

TEST_CASE("train checkpoint: save-load-save is byte identical") {
    const auto model = trained_model(Preset::PixembFirst, 8, 31);
    const auto bytes = save_checkpoint(model);
    auto ck = load_checkpoint(bytes);
    REQUIRE(ck.mode == kModeTrain);
    REQUIRE(ck.model.has_value());
    const auto again = save_checkpoint(*ck.model);
    CHECK(bytes == again);
}

TEST_CASE("train checkpoint reproduces forward outputs bit-exactly") {
    auto model = trained_model(Preset::PixembFirst, 8, 33);
    const auto bytes = save_checkpoint(model);
    auto ck = load_checkpoint(bytes);
    auto batch = probe_batch();
    const auto a = forward(model, batch, Mode::InferFloat);
    const auto b = forward(*ck.model, batch, Mode::InferFloat);
    CHECK(*a.logits.data == *b.logits.data);
}

TEST_CASE("infer checkpoint round-trips and reproduces the packed path") {
    for (const auto preset : {Preset::PixembFirst, Preset::IwqFirst, Preset::WqFirst}) {
        const auto model = trained_model(preset, 8, 35);
        const auto packed = compile_packed(model);
        const auto bytes = save_checkpoint(packed);
        auto ck = load_checkpoint(bytes);
        REQUIRE(ck.mode == kModeInfer);
        REQUIRE(ck.packed.has_value());
        CHECK(save_checkpoint(*ck.packed) == bytes);
        auto batch = probe_batch();
        const auto a = forward_packed(packed, batch);
        const auto b = forward_packed(*ck.packed, batch);
        CHECK(*a.logits.data == *b.logits.data);
    }
}

TEST_CASE("fp-first saves an infer file with a flagged float first layer") {
    const auto model = trained_model(Preset::FpFirst, 0, 37);
    const auto packed = compile_packed(model);
    const auto bytes = save_checkpoint(packed);
    auto ck = load_checkpoint(bytes);
    REQUIRE(ck.packed.has_value());
    CHECK(ck.packed->first_dense_w.shape == std::vector<int>{16, 3, 3, 3});
    auto batch = probe_batch();
    CHECK_THROWS_AS(forward_packed(*ck.packed, batch), ValueError);
}

TEST_CASE("merged table section payload: d=8, Q=2 is 512 bytes") {
    const auto model = trained_model(Preset::PixembFirst, 8, 39);
    const auto packed = compile_packed(model);
    CHECK(merged_payload(packed.table).size() == 512);
    // and the d/Q grid
    Rng rng(40);
    for (const int d : {1, 4, 8, 16}) {
        for (const int bits : {1, 2, 3}) {
            QuantConfig cfg;
            cfg.activation_bits = bits;
            const auto table = make_embedding_table(d, cfg, rng);
            CHECK(merged_payload(merge_table(table)).size() ==
                  (static_cast<std::size_t>(256) * d * bits + 7) / 8);
        }
    }
}

TEST_CASE("corrupted magic fails at offset 0") {
    const auto model = trained_model(Preset::IwqFirst, 0, 41);
    auto bytes = save_checkpoint(model);
    bytes[0] = 'X';
    try {
        load_checkpoint(bytes);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.offset() == 0);
    }
}

TEST_CASE("version mismatch and truncation produce distinct offsets") {
    const auto model = trained_model(Preset::IwqFirst, 0, 43);
    auto bytes = save_checkpoint(model);
    auto bad_version = bytes;
    bad_version[4] = 9;
    try {
        load_checkpoint(bad_version);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.offset() == 4);
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
    auto truncated = bytes;
    truncated.resize(bytes.size() / 2);
    CHECK_THROWS_AS(load_checkpoint(truncated), ParseError);
    auto trailing = bytes;
    trailing.push_back(0);
    try {
        load_checkpoint(trailing);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.offset() == bytes.size());
    }
}
