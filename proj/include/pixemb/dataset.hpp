#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pixemb/common.hpp"
#include "pixemb/tensor.hpp"

namespace pixemb {

// In-memory labelled image set, NHWC uint8.
struct Dataset {
    int h = 32, w = 32, c = 3;
    int num_classes = 0;
    std::vector<std::uint8_t> pixels;
    std::vector<int> labels;

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t image_bytes() const { return static_cast<std::int64_t>(h) * w * c; }

    ImageBatch batch(std::span<const int> indices) const;
    std::vector<int> batch_labels(std::span<const int> indices) const;

    // First k examples of each class, in original order.
    Dataset take_per_class(int k) const;
    // Stratified split: first train_per_class of each class go to train, the
    // next val_per_class to val.
    std::pair<Dataset, Dataset> split_per_class(int train_per_class, int val_per_class) const;
};

// CIFAR binary batch format: records of label byte(s) + 3072 pixel bytes
// (channel-planar R, G, B). 3073-byte records carry one label byte; 3074-byte
// records carry coarse+fine labels and the fine label is used.
Dataset load_cifar_file(const std::string& path);
// Loads and concatenates every *.bin under dir, sorted by filename.
Dataset load_cifar_dir(const std::string& path);
// Writes 3073-byte records.
void write_cifar_file(const Dataset& data, const std::string& path);

// Deterministic 10-class synthetic set, CIFAR-sized. Classes combine one of
// five glyph shapes with one of two foreground intensity bands; both bands
// fall inside a single 2-bit uniform-quantization cell of the 0..255 range,
// so plain input quantization erases the band distinction while a learned
// per-value embedding (or a float first layer) can recover it.
Dataset make_synthetic(int n_images, std::uint64_t seed);

}  // namespace pixemb
