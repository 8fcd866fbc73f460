#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations on tensors that
// require gradients record a backward closure and their parents; backward()
// on a scalar loss sorts the reachable nodes topologically and replays them
// in reverse exactly once. The recorded graph is released afterwards, so a
// second backward on the same loss throws GraphError.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bob {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

namespace detail {
struct Node;
}

/// Boolean tensor used for attention and padding masks (true = masked).
struct BoolTensor {
    Shape shape;
    std::vector<std::uint8_t> data;

    BoolTensor() = default;
    BoolTensor(Shape s, bool fill);
    BoolTensor(Shape s, std::vector<std::uint8_t> values);

    std::size_t numel() const { return data.size(); }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> data() const;
    /// Direct write access, for parameter initialisation and optimiser updates.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t flat_index) const { return data()[flat_index]; }

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();
    /// Drops the gradient buffer entirely so has_grad() reports false.
    void clear_grad();

    /// A new leaf sharing no graph history, with a copy of the values.
    Tensor detach() const;
    bool is_leaf() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Operations. Binary elementwise ops broadcast numpy-style (right aligned).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// a [..., m, k] times b [k, n], or batched a [..., m, k] times b [..., k, n]
/// with identical leading dimensions. transpose_b multiplies by b's last two
/// axes swapped, so b is then [..., n, k].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor relu(const Tensor& x);
/// tanh approximation.
Tensor gelu(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

/// Normalises over the last axis; gain and bias have that axis' length.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Positions where mask is true take `value`; no gradient flows through them.
Tensor masked_fill(const Tensor& x, const BoolTensor& mask, double value);

/// Gathers rows of a [rows, width] table; result shape is index_shape + [width].
Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& index_shape);

/// Fused softmax cross entropy. logits [n, v]; targets of length n, where a
/// negative target is ignored (loss 0, no gradient). Returns per-token losses [n].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

/// Per-token unlikelihood -log(1 - p(target)) with p clamped to at most
/// 1 - 1e-7. Same target convention as cross_entropy. Returns [n].
Tensor unlikelihood(const Tensor& logits, std::span<const int> targets);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
/// Slice [start, start + length) along `axis`.
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Inverted dropout. Identity when probability is 0.
Tensor dropout(const Tensor& x, double probability, Rng& rng);

/// Accumulates d(loss)/d(leaf) into every requires_grad ancestor of `loss`.
void backward(const Tensor& loss);

// Random helpers with a fixed, library-independent mapping from engine output.
double uniform01(Rng& rng);
double standard_normal(Rng& rng);

}  // namespace bob
