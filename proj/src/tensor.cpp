#include "pixemb/tensor.hpp"

namespace pixemb {

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<float>>(static_cast<std::size_t>(t.numel()), 0.0f);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, float value) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : *t.data) v = value;
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> values) {
    Tensor t;
    t.shape = std::move(shape);
    if (static_cast<std::int64_t>(values.size()) != t.numel()) {
        throw ShapeError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_to_string(t.shape));
    }
    t.data = std::make_shared<std::vector<float>>(std::move(values));
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<float>>(*data);
    t.grad_id = -1;
    t.tape_serial = -1;
    return t;
}

bool same_shape(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape;
}

}  // namespace pixemb
