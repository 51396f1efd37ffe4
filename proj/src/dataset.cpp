#include "pixemb/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace pixemb {

ImageBatch Dataset::batch(std::span<const int> indices) const {
    ImageBatch b;
    b.n = static_cast<int>(indices.size());
    b.h = h;
    b.w = w;
    b.c = c;
    b.pixels.resize(static_cast<std::size_t>(b.numel()));
    const auto stride = image_bytes();
    std::size_t out = 0;
    for (const int idx : indices) {
        const auto* src = pixels.data() + static_cast<std::int64_t>(idx) * stride;
        for (std::int64_t i = 0; i < stride; ++i) {
            b.pixels[out++] = src[i];
        }
    }
    return b;
}

std::vector<int> Dataset::batch_labels(std::span<const int> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (const int idx : indices) out.push_back(labels[static_cast<std::size_t>(idx)]);
    return out;
}

Dataset Dataset::take_per_class(int k) const {
    Dataset out;
    out.h = h;
    out.w = w;
    out.c = c;
    out.num_classes = num_classes;
    std::vector<int> taken(static_cast<std::size_t>(num_classes), 0);
    const auto stride = image_bytes();
    for (std::int64_t i = 0; i < size(); ++i) {
        const int label = labels[static_cast<std::size_t>(i)];
        if (taken[static_cast<std::size_t>(label)] >= k) continue;
        ++taken[static_cast<std::size_t>(label)];
        out.labels.push_back(label);
        const auto* src = pixels.data() + i * stride;
        out.pixels.insert(out.pixels.end(), src, src + stride);
    }
    return out;
}

std::pair<Dataset, Dataset> Dataset::split_per_class(int train_per_class,
                                                     int val_per_class) const {
    Dataset train, val;
    for (Dataset* d : {&train, &val}) {
        d->h = h;
        d->w = w;
        d->c = c;
        d->num_classes = num_classes;
    }
    std::vector<int> seen(static_cast<std::size_t>(num_classes), 0);
    const auto stride = image_bytes();
    for (std::int64_t i = 0; i < size(); ++i) {
        const int label = labels[static_cast<std::size_t>(i)];
        auto& count = seen[static_cast<std::size_t>(label)];
        Dataset* dst = nullptr;
        if (count < train_per_class) {
            dst = &train;
        } else if (count < train_per_class + val_per_class) {
            dst = &val;
        }
        ++count;
        if (!dst) continue;
        dst->labels.push_back(label);
        const auto* src = pixels.data() + i * stride;
        dst->pixels.insert(dst->pixels.end(), src, src + stride);
    }
    return {std::move(train), std::move(val)};
}

namespace {

constexpr std::int64_t kPlane = 1024;  // 32*32
constexpr std::int64_t kImageBytes = 3 * kPlane;

void append_records(Dataset& data, std::span<const std::uint8_t> bytes,
                    const std::string& path) {
    // Prefer the single-label layout when a file size divides both ways.
    std::int64_t record = 0;
    int label_bytes = 0;
    if (bytes.size() % (kImageBytes + 1) == 0) {
        record = kImageBytes + 1;
        label_bytes = 1;
    } else if (bytes.size() % (kImageBytes + 2) == 0) {
        record = kImageBytes + 2;
        label_bytes = 2;
    } else {
        throw ValueError("cifar loader: " + path + " is not a whole number of 3073/3074-byte records");
    }
    const auto count = static_cast<std::int64_t>(bytes.size()) / record;
    for (std::int64_t r = 0; r < count; ++r) {
        const auto* rec = bytes.data() + r * record;
        // Fine label is the last label byte.
        data.labels.push_back(rec[label_bytes - 1]);
        const auto* planes = rec + label_bytes;
        const auto base = data.pixels.size();
        data.pixels.resize(base + static_cast<std::size_t>(kImageBytes));
        for (std::int64_t pos = 0; pos < kPlane; ++pos) {
            for (int ch = 0; ch < 3; ++ch) {
                data.pixels[base + static_cast<std::size_t>(pos * 3 + ch)] =
                    planes[ch * kPlane + pos];
            }
        }
    }
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValueError("cannot open " + path);
    }
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> bytes(size);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!in) {
        throw ValueError("failed to read " + path);
    }
    return bytes;
}

}  // namespace

Dataset load_cifar_file(const std::string& path) {
    Dataset data;
    const auto bytes = read_file(path);
    append_records(data, bytes, path);
    int max_label = 0;
    for (int l : data.labels) max_label = std::max(max_label, l);
    data.num_classes = max_label + 1;
    return data;
}

Dataset load_cifar_dir(const std::string& path) {
    namespace fs = std::filesystem;
    if (fs::is_regular_file(path)) {
        return load_cifar_file(path);
    }
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(path)) {
        if (entry.is_regular_file() && entry.path().extension() == ".bin") {
            files.push_back(entry.path().string());
        }
    }
    if (files.empty()) {
        throw ValueError("no .bin files under " + path);
    }
    std::sort(files.begin(), files.end());
    Dataset data;
    for (const auto& f : files) {
        append_records(data, read_file(f), f);
    }
    int max_label = 0;
    for (int l : data.labels) max_label = std::max(max_label, l);
    data.num_classes = max_label + 1;
    return data;
}

void write_cifar_file(const Dataset& data, const std::string& path) {
    if (data.h != 32 || data.w != 32 || data.c != 3) {
        throw ValueError("cifar writer: only 32x32x3 images are supported");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ValueError("cannot open " + path + " for writing");
    }
    std::vector<std::uint8_t> rec(static_cast<std::size_t>(kImageBytes) + 1);
    for (std::int64_t i = 0; i < data.size(); ++i) {
        rec[0] = static_cast<std::uint8_t>(data.labels[static_cast<std::size_t>(i)]);
        const auto* src = data.pixels.data() + i * kImageBytes;
        for (std::int64_t pos = 0; pos < kPlane; ++pos) {
            for (int ch = 0; ch < 3; ++ch) {
                rec[static_cast<std::size_t>(1 + ch * kPlane + pos)] = src[pos * 3 + ch];
            }
        }
        out.write(reinterpret_cast<const char*>(rec.data()),
                  static_cast<std::streamsize>(rec.size()));
    }
}

namespace {

// Foreground intensity bands. Both lie inside the second cell of the 2-bit
// uniform quantizer over 0..255 (codes change at 43/128/213), so after plain
// input quantization the two bands are indistinguishable. The background is
// kept brighter than the cell so the glyph mask itself survives quantization.
constexpr int kBandLo[2] = {50, 100};
constexpr int kBandHi[2] = {76, 124};
constexpr int kCellLo = 45;
constexpr int kCellHi = 126;
constexpr int kBackgroundLo = 150;
constexpr float kPixelNoise = 3.0f;

bool in_shape(int shape, int dy, int dx, int r) {
    const int d2 = dy * dy + dx * dx;
    switch (shape) {
        case 0: return d2 <= r * r;                                      // disk
        case 1: return d2 <= r * r && d2 >= (r - 3) * (r - 3);           // ring
        case 2: return std::abs(dy) <= 3 && std::abs(dx) <= r + 2;       // horizontal bar
        case 3: return std::abs(dx) <= 3 && std::abs(dy) <= r + 2;       // vertical bar
        default: return std::abs(dy) + std::abs(dx) <= r;                // diamond
    }
}

}  // namespace

Dataset make_synthetic(int n_images, std::uint64_t seed) {
    Dataset data;
    data.num_classes = 10;
    data.pixels.resize(static_cast<std::size_t>(n_images) * kImageBytes);
    data.labels.resize(static_cast<std::size_t>(n_images));
    Rng rng(seed * 0x9e3779b97f4a7c15ull + 0x5851f42d4c957f2dull);

    std::uint8_t grid[3][5][5];
    for (int i = 0; i < n_images; ++i) {
        const int label = static_cast<int>(static_cast<std::uint32_t>(i) % 10);
        const int shape = label / 2;
        const int band = label % 2;
        data.labels[static_cast<std::size_t>(i)] = label;

        const int backdrop = rng.uniform_int(kBackgroundLo, 235);
        for (auto& ch : grid) {
            for (auto& row : ch) {
                for (auto& v : row) {
                    v = static_cast<std::uint8_t>(backdrop + rng.uniform_int(-8, 8));
                }
            }
        }
        const int cy = 16 + rng.uniform_int(-3, 3);
        const int cx = 16 + rng.uniform_int(-3, 3);
        const int r = rng.uniform_int(9, 11);
        const float base = static_cast<float>(rng.uniform_int(kBandLo[band], kBandHi[band]));
        float ch_off[3];
        for (auto& o : ch_off) o = static_cast<float>(rng.uniform_int(-3, 3));

        auto* img = data.pixels.data() + static_cast<std::int64_t>(i) * kImageBytes;
        for (int y = 0; y < 32; ++y) {
            for (int x = 0; x < 32; ++x) {
                const bool fg = in_shape(shape, y - cy, x - cx, r);
                for (int ch = 0; ch < 3; ++ch) {
                    float v;
                    if (fg) {
                        v = base + ch_off[ch] + rng.normal(0.0f, kPixelNoise);
                        v = std::min(static_cast<float>(kCellHi),
                                     std::max(static_cast<float>(kCellLo), v));
                    } else {
                        // Bilinear over the 5x5 control grid (8 px per cell).
                        const int gy = y / 8, gx = x / 8;
                        const float fy = static_cast<float>(y % 8) / 8.0f;
                        const float fx = static_cast<float>(x % 8) / 8.0f;
                        const float a = static_cast<float>(grid[ch][gy][gx]);
                        const float b = static_cast<float>(grid[ch][gy][gx + 1]);
                        const float c0 = static_cast<float>(grid[ch][gy + 1][gx]);
                        const float d = static_cast<float>(grid[ch][gy + 1][gx + 1]);
                        v = a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c0 * fy * (1 - fx) +
                            d * fy * fx;
                    }
                    img[(y * 32 + x) * 3 + ch] =
                        static_cast<std::uint8_t>(std::lround(std::min(255.0f, std::max(0.0f, v))));
                }
            }
        }
    }
    return data;
}

}  // namespace pixemb
