#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pixemb/tensor.hpp"

namespace pixemb {

class Tape;

struct TapeNode {
    std::string kind;
    std::vector<int> inputs;
    std::vector<int> shape;
    std::shared_ptr<std::vector<float>> value;
    // Accumulates input gradients given this node's output gradient.
    // Empty for leaves.
    std::function<void(Tape&, const TapeNode&, int)> backward;
};

// Per-channel batch-norm state carried across steps.
struct BnState {
    std::vector<float> running_mean;
    std::vector<float> running_var;
};

// Reverse-mode tape. Single use: build one forward graph, call backward()
// once, read gradients, discard. Node ids are append-ordered, so every input
// id of a node is smaller than the node's own id.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers a tensor as a leaf; sets t.grad_id.
    int leaf(Tensor& t);

    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& x, float factor);
    Tensor relu(const Tensor& x);
    Tensor max_pool(const Tensor& x, int kernel, int stride);
    Tensor mean_pool(const Tensor& x, int kernel, int stride);
    Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      BnState& state, float momentum, float eps);
    // Mean cross-entropy over the batch; returns a scalar.
    Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);
    // matrix is (d, n); returns (d, indices.size()) selecting columns.
    Tensor gather_columns(const Tensor& matrix, const std::vector<int>& indices);
    Tensor reshape(const Tensor& x, std::vector<int> shape);
    Tensor permute(const Tensor& x, const std::vector<int>& axes);

    // Extension point for ops with non-standard backward rules (quantizers).
    Tensor custom(std::string kind, const std::vector<Tensor>& inputs, Tensor value,
                  std::function<void(Tape&, const TapeNode&, int)> backward);

    // loss must be a scalar produced on this tape.
    void backward(const Tensor& loss);

    // Gradient of a node after backward(); zeros for unreachable nodes.
    std::span<const float> grad(int node_id);

    // Mutable gradient buffer, zero-initialised on first access. Used by
    // backward closures to accumulate input gradients.
    std::span<float> grad_buffer(int node_id);

    std::size_t size() const { return nodes_.size(); }
    const TapeNode& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::int64_t serial() const { return serial_; }

private:
    friend struct TapeNode;
    int push(TapeNode node);
    // Returns the node id for an op input, registering a leaf on the fly for
    // tensors that are not yet attached.
    int input_id(const Tensor& t);

    std::vector<TapeNode> nodes_;
    std::vector<std::vector<float>> grads_;
    std::int64_t serial_ = next_serial();
    bool backward_done_ = false;

    static std::int64_t next_serial();
};

}  // namespace pixemb
