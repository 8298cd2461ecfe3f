#pragma once

// Tape-free reverse-mode differentiation over Tensor values. Each op records its
// parents and a closure that pushes the output gradient back to them; `backward`
// walks the graph in reverse topological order. Leaves created with
// `Var::parameter` accumulate gradients across calls until `zero_grad`.

#include <functional>
#include <memory>
#include <vector>

#include "pcstyle/tensor.hpp"

namespace pcstyle::ad {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad();
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    static Var parameter(Tensor value) { return Var(std::move(value), true); }

    [[nodiscard]] bool defined() const noexcept { return node_ != nullptr; }
    [[nodiscard]] const Tensor& value() const { return node_->value; }
    /// Direct access for optimizers and loaders; only meaningful on leaves.
    [[nodiscard]] Tensor& mutable_value() { return node_->value; }
    [[nodiscard]] const Shape& shape() const { return node_->value.shape(); }
    [[nodiscard]] double item() const { return node_->value.item(); }
    [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    /// Gradient accumulated by `backward`; zeros of the value's shape if none reached this node.
    [[nodiscard]] Tensor grad() const;
    void zero_grad();

    [[nodiscard]] const std::shared_ptr<Node>& node() const noexcept { return node_; }

private:
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    std::shared_ptr<Node> node_;

    friend Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);
};

/// Builds an op node. The closure receives the output node; parents are in `out.parents`.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

inline Var constant(Tensor value) { return Var(std::move(value), false); }

/// Seeds d(root)/d(root) = 1 and propagates. `root` must hold a single element.
void backward(const Var& root);

// Elementwise (shapes must match exactly).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var square(const Var& a);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Shape shape);

// Matrices: [rows, cols].
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
/// x[N, in] * w[out, in]^T + bias[out]; `bias` may be undefined.
Var linear(const Var& x, const Var& w, const Var& bias);
Var add_row(const Var& a, const Var& row);
Var sub_row(const Var& a, const Var& row);
Var col_mean(const Var& a);
/// Column-wise max over rows; ties resolve to the lowest row.
Var max_rows(const Var& a);
Var concat_cols(const Var& a, const Var& b);
Var broadcast_rows(const Var& row, int n);

// Vectors (any shape, treated as flat).
Var dot(const Var& a, const Var& b);
Var l2_norm(const Var& a);
Var normalize(const Var& a);
Var mse(const Var& a, const Tensor& target);
Var l1(const Var& a, const Tensor& target);
/// Scalar s -> 0 if s <= tau else s.
Var reject_at_or_below(const Var& s, double tau);

// Images: [C, H, W].
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad);
/// w is [C_in, C_out, k, k]; output size (H-1)*stride - 2*pad + k + output_pad.
Var conv_transpose2d(const Var& x, const Var& w, const Var& bias, int stride, int pad, int output_pad);
Var avg_pool2(const Var& x);
Var concat_channels(const Var& a, const Var& b);

/// Per output pixel, up to four (source pixel, weight) taps applied to every channel.
struct SampleMap {
    int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
    std::vector<int> index;      // 4 per output pixel, -1 = unused tap
    std::vector<double> weight;  // 4 per output pixel
};

SampleMap bilinear_resize_map(int in_h, int in_w, int out_h, int out_w);
Var resample(const Var& x, const SampleMap& map);

/// Sparse linear gather from point rows into a channel-first map:
/// out[c, p] = sum_e weight[e] * x[index[e], c] for e in [offset[p], offset[p+1]).
struct BlendPlan {
    int height = 0, width = 0;
    std::vector<int> offset;  // height*width + 1
    std::vector<int> index;
    std::vector<double> weight;
};

Var sparse_blend(const Var& points, const BlendPlan& plan);

/// Joint RGB histogram with `bins` linear (tent) bins per channel, normalized by pixel count.
Var soft_histogram(const Var& image, int bins);

}  // namespace pcstyle::ad
