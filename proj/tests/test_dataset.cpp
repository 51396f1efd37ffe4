#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "pixemb/dataset.hpp"

using namespace pixemb;

TEST_CASE("synthetic dataset is deterministic and balanced") {
    const auto a = make_synthetic(100, 7);
    const auto b = make_synthetic(100, 7);
    CHECK(a.pixels == b.pixels);
    CHECK(a.labels == b.labels);
    const auto c = make_synthetic(100, 8);
    CHECK(a.pixels != c.pixels);

    std::vector<int> counts(10, 0);
    for (const int l : a.labels) ++counts[static_cast<std::size_t>(l)];
    for (const int n : counts) CHECK(n == 10);
}

TEST_CASE("cifar file round-trip through the binary batch format") {
    const auto data = make_synthetic(30, 3);
    const auto dir = std::filesystem::temp_directory_path() / "pixemb_ds_test";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "data_batch_1.bin").string();
    write_cifar_file(data, path);
    CHECK(std::filesystem::file_size(path) == 30u * 3073u);

    const auto back = load_cifar_file(path);
    CHECK(back.pixels == data.pixels);
    CHECK(back.labels == data.labels);

    const auto via_dir = load_cifar_dir(dir.string());
    CHECK(via_dir.labels == data.labels);
    std::filesystem::remove_all(dir);
}

TEST_CASE("two-byte label records use the fine label") {
    // One record: coarse label 3, fine label 7, zero pixels.
    std::vector<std::uint8_t> bytes(3074, 0);
    bytes[0] = 3;
    bytes[1] = 7;
    const auto dir = std::filesystem::temp_directory_path() / "pixemb_ds_test2";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "train.bin").string();
    {
        FILE* f = std::fopen(path.c_str(), "wb");
        REQUIRE(f != nullptr);
        std::fwrite(bytes.data(), 1, bytes.size(), f);
        std::fclose(f);
    }
    const auto data = load_cifar_file(path);
    REQUIRE(data.size() == 1);
    CHECK(data.labels[0] == 7);
    std::filesystem::remove_all(dir);
}

TEST_CASE("malformed record size is rejected") {
    const auto dir = std::filesystem::temp_directory_path() / "pixemb_ds_test3";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "bad.bin").string();
    {
        FILE* f = std::fopen(path.c_str(), "wb");
        REQUIRE(f != nullptr);
        const char junk[100] = {};
        std::fwrite(junk, 1, sizeof(junk), f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_cifar_file(path), ValueError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("per-class subsetting and splits are stratified") {
    const auto data = make_synthetic(200, 5);
    const auto sub = data.take_per_class(5);
    CHECK(sub.size() == 50);
    const auto [train, val] = data.split_per_class(12, 4);
    CHECK(train.size() == 120);
    CHECK(val.size() == 40);
    std::vector<int> counts(10, 0);
    for (const int l : val.labels) ++counts[static_cast<std::size_t>(l)];
    for (const int n : counts) CHECK(n == 4);
}

TEST_CASE("synthetic foreground bands share one 2-bit quantization cell") {
    // The band midpoints quantize identically at 2 bits; a learned table can
    // still tell them apart because the raw values differ.
    const auto data = make_synthetic(60, 11);
    auto code_of = [](int pixel) {
        return static_cast<int>(std::lround(static_cast<double>(pixel) / 255.0 * 3.0));
    };
    CHECK(code_of(60) == code_of(110));
}
