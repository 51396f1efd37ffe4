#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "pixemb/common.hpp"

namespace pixemb {

// Dense row-major float32 tensor. `grad_id` links the tensor to a node of the
// tape it was produced on (or registered with); -1 means no tape attachment.
// `tape_serial` records which tape the id belongs to, so tensors outliving
// their (single-use) tape degrade to plain constants instead of aliasing
// nodes of a newer tape.
struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<float>> data;
    int grad_id = -1;
    std::int64_t tape_serial = -1;

    Tensor() : data(std::make_shared<std::vector<float>>()) {}

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, float value);
    static Tensor from(std::vector<int> shape, std::vector<float> values);

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int e : shape) n *= e;
        return n;
    }

    std::span<float> values() { return {data->data(), data->size()}; }
    std::span<const float> values() const { return {data->data(), data->size()}; }

    float& at(std::int64_t i) { return (*data)[static_cast<std::size_t>(i)]; }
    float at(std::int64_t i) const { return (*data)[static_cast<std::size_t>(i)]; }

    // Deep copy; the result is detached from any tape.
    Tensor clone() const;
};

bool same_shape(const Tensor& a, const Tensor& b);

// A batch of 8-bit images, NHWC with c == 3, values expected in 0..255.
// Values are stored as int so that out-of-range input is representable and
// can be rejected by the consuming operation.
struct ImageBatch {
    int n = 0;
    int h = 0;
    int w = 0;
    int c = 3;
    std::vector<int> pixels;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * h * w * c;
    }

    int at(int in, int ih, int iw, int ic) const {
        return pixels[static_cast<std::size_t>(((static_cast<std::int64_t>(in) * h + ih) * w + iw) * c + ic)];
    }
    int& at(int in, int ih, int iw, int ic) {
        return pixels[static_cast<std::size_t>(((static_cast<std::int64_t>(in) * h + ih) * w + iw) * c + ic)];
    }
};

}  // namespace pixemb
