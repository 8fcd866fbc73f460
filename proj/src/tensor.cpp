#include "bob/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <cblas.h>

namespace bob {

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool consumed = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) {
            grad.assign(value.size(), 0.0);
        }
        return grad;
    }
};

}  // namespace detail

using detail::Node;

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ", ";
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

BoolTensor::BoolTensor(Shape s, bool fill) : shape(std::move(s)), data(shape_numel(shape), fill ? 1 : 0) {}

BoolTensor::BoolTensor(Shape s, std::vector<std::uint8_t> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("mask data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
    }
}

namespace {

std::shared_ptr<Node> make_leaf(const Shape& shape, std::vector<double> values, bool requires_grad) {
    for (auto d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("data length " + std::to_string(values.size()) + " does not match shape " +
                             shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return node;
}

// Creates an op result. The backward closure is only kept when some parent
// needs a gradient.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    const bool needs = std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

const Node& checked(const Tensor& t) {
    if (!t.defined()) throw std::logic_error("operation on an undefined tensor");
    return *t.node();
}

// Flat index into `in` for every element of `out`, numpy broadcasting rules.
std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in) {
    const std::size_t n = shape_numel(out);
    std::vector<std::size_t> index(n);
    const std::size_t in_n = shape_numel(in);
    // Suffix fast path: in equals the trailing dims of out.
    bool suffix = in.size() <= out.size() &&
                  std::equal(in.begin(), in.end(), out.end() - static_cast<std::ptrdiff_t>(in.size()));
    if (suffix) {
        for (std::size_t i = 0; i < n; ++i) index[i] = i % in_n;
        return index;
    }
    const std::size_t rank = out.size();
    std::vector<std::size_t> in_stride(rank, 0);
    std::size_t stride = 1;
    for (std::size_t k = 0; k < in.size(); ++k) {
        const std::size_t axis_in = in.size() - 1 - k;
        const std::size_t axis_out = rank - 1 - k;
        in_stride[axis_out] = in[axis_in] == 1 ? 0 : stride;
        stride *= in[axis_in];
    }
    std::vector<std::size_t> counter(rank, 0);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < n; ++i) {
        index[i] = offset;
        for (std::size_t axis = rank; axis-- > 0;) {
            ++counter[axis];
            offset += in_stride[axis];
            if (counter[axis] < out[axis]) break;
            offset -= in_stride[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    return index;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t k = 0; k < rank; ++k) {
        const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
        const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        out[rank - 1 - k] = std::max(da, db);
    }
    return out;
}

struct BlasDims {
    blasint m, k, n;
};

BlasDims blas_dims(std::size_t m, std::size_t k, std::size_t n) {
    constexpr auto limit = static_cast<std::size_t>(std::numeric_limits<blasint>::max());
    if (m > limit || k > limit || n > limit) throw DimensionError("matmul: dimension exceeds the BLAS index range");
    return {static_cast<blasint>(m), static_cast<blasint>(k), static_cast<blasint>(n)};
}

// Row-major kernels accumulating into c.
// c[m x n] += a[m x k] * b[k x n]
void mm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    const auto [M, K, N] = blas_dims(m, k, n);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, M, N, K, 1.0, a, K, b, N, 1.0, c, N);
}

// c[m x n] += a[m x k] * b[n x k]^T
void mm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    const auto [M, K, N] = blas_dims(m, k, n);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, M, N, K, 1.0, a, K, b, K, 1.0, c, N);
}

// c[m x n] += a[k x m]^T * b[k x n]
void mm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    const auto [M, K, N] = blas_dims(m, k, n);
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, M, N, K, 1.0, a, M, b, N, 1.0, c, N);
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t length = 1;
    std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size()) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                             shape_str(shape));
    }
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.length = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

enum class BinaryKind { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
    const Node& na = checked(a);
    const Node& nb = checked(b);
    Shape out_shape = broadcast_shape(na.shape, nb.shape, name);
    const std::size_t n = shape_numel(out_shape);
    const bool same_a = na.shape == out_shape;
    const bool same_b = nb.shape == out_shape;
    std::vector<std::size_t> ia = same_a ? std::vector<std::size_t>{} : broadcast_index(out_shape, na.shape);
    std::vector<std::size_t> ib = same_b ? std::vector<std::size_t>{} : broadcast_index(out_shape, nb.shape);
    std::vector<double> out(n);
    const double* va = na.value.data();
    const double* vb = nb.value.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = va[same_a ? i : ia[i]];
        const double y = vb[same_b ? i : ib[i]];
        switch (kind) {
            case BinaryKind::add: out[i] = x + y; break;
            case BinaryKind::sub: out[i] = x - y; break;
            case BinaryKind::mul: out[i] = x * y; break;
        }
    }
    auto pa = a.node();
    auto pb = b.node();
    return make_result(std::move(out_shape), std::move(out), {pa, pb},
                       [pa, pb, kind, ia = std::move(ia), ib = std::move(ib), same_a, same_b](Node& self) {
                           const std::size_t n = self.grad.size();
                           if (pa->requires_grad) {
                               auto& ga = pa->grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) {
                                   double g = self.grad[i];
                                   if (kind == BinaryKind::mul) g *= pb->value[same_b ? i : ib[i]];
                                   ga[same_a ? i : ia[i]] += g;
                               }
                           }
                           if (pb->requires_grad) {
                               auto& gb = pb->grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) {
                                   double g = self.grad[i];
                                   if (kind == BinaryKind::sub) g = -g;
                                   if (kind == BinaryKind::mul) g *= pa->value[same_a ? i : ia[i]];
                                   gb[same_b ? i : ib[i]] += g;
                               }
                           }
                       });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return Tensor(make_leaf(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad));
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    return Tensor(make_leaf(shape, std::vector<double>(shape_numel(shape), value), requires_grad));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
    return Tensor(make_leaf(shape, std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(make_leaf({1}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return checked(*this).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return checked(*this).value.size(); }

std::span<const double> Tensor::data() const { return checked(*this).value; }

std::span<double> Tensor::mutable_data() {
    checked(*this);
    return node_->value;
}

double Tensor::item() const {
    const Node& n = checked(*this);
    if (n.value.size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(n.shape));
    return n.value[0];
}

bool Tensor::requires_grad() const { return checked(*this).requires_grad; }

bool Tensor::has_grad() const { return !checked(*this).grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(*this).grad; }

std::span<double> Tensor::mutable_grad() {
    checked(*this);
    return node_->grad_buffer();
}

void Tensor::zero_grad() {
    checked(*this);
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
    checked(*this);
    node_->grad.clear();
    node_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const {
    const Node& n = checked(*this);
    return Tensor(make_leaf(n.shape, n.value, false));
}

bool Tensor::is_leaf() const { return !checked(*this).backward_fn; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::mul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
    const Node& na = checked(a);
    std::vector<double> out(na.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] * factor;
    auto pa = a.node();
    return make_result(na.shape, std::move(out), {pa}, [pa, factor](Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
}

Tensor relu(const Tensor& x) {
    const Node& nx = checked(x);
    std::vector<double> out(nx.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = nx.value[i] > 0.0 ? nx.value[i] : 0.0;
    auto px = x.node();
    return make_result(nx.shape, std::move(out), {px}, [px](Node& self) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (px->value[i] > 0.0) g[i] += self.grad[i];
        }
    });
}

Tensor gelu(const Tensor& x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    const Node& nx = checked(x);
    std::vector<double> out(nx.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = nx.value[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v)));
    }
    auto px = x.node();
    return make_result(nx.shape, std::move(out), {px}, [px](Node& self) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = px->value[i];
            const double t = std::tanh(c * (v + k * v * v * v));
            const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
            g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
        }
    });
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
    const Node& na = checked(a);
    const Node& nb = checked(b);
    const Shape& sa = na.shape;
    const Shape& sb = nb.shape;
    auto mismatch = [&]() {
        return DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb) +
                              (transpose_b ? " (b transposed)" : ""));
    };
    if (sa.size() < 2 || sb.size() < 2) throw mismatch();
    const std::size_t m = sa[sa.size() - 2];
    const std::size_t k = sa.back();
    const std::size_t kb = transpose_b ? sb.back() : sb[sb.size() - 2];
    const std::size_t n = transpose_b ? sb[sb.size() - 2] : sb.back();
    if (k != kb) throw mismatch();

    std::size_t batch = 1;
    bool shared_b = sb.size() == 2;
    if (!shared_b) {
        if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) throw mismatch();
    }
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];

    Shape out_shape(sa.begin(), sa.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);

    std::vector<double> out(batch * m * n, 0.0);
    if (shared_b) {
        // Collapse leading dims into rows.
        if (transpose_b) {
            mm_nt(batch * m, k, n, na.value.data(), nb.value.data(), out.data());
        } else {
            mm_nn(batch * m, k, n, na.value.data(), nb.value.data(), out.data());
        }
    } else {
        for (std::size_t t = 0; t < batch; ++t) {
            const double* pa = na.value.data() + t * m * k;
            const double* pb = nb.value.data() + t * k * n;
            double* pc = out.data() + t * m * n;
            if (transpose_b) {
                mm_nt(m, k, n, pa, pb, pc);
            } else {
                mm_nn(m, k, n, pa, pb, pc);
            }
        }
    }

    auto pa = a.node();
    auto pb = b.node();
    return make_result(std::move(out_shape), std::move(out), {pa, pb},
                       [pa, pb, batch, m, k, n, shared_b, transpose_b](Node& self) {
                           const std::size_t rows = shared_b ? batch * m : m;
                           const std::size_t reps = shared_b ? 1 : batch;
                           for (std::size_t t = 0; t < reps; ++t) {
                               const double* gc = self.grad.data() + t * rows * n;
                               const double* va = pa->value.data() + t * rows * k;
                               const double* vb = pb->value.data() + (shared_b ? 0 : t * k * n);
                               if (pa->requires_grad) {
                                   double* ga = pa->grad_buffer().data() + t * rows * k;
                                   if (transpose_b) {
                                       mm_nn(rows, n, k, gc, vb, ga);  // dA = dC * B, B is [n x k]
                                   } else {
                                       mm_nt(rows, n, k, gc, vb, ga);  // dA = dC * B^T
                                   }
                               }
                               if (pb->requires_grad) {
                                   double* gb = pb->grad_buffer().data() + (shared_b ? 0 : t * k * n);
                                   if (transpose_b) {
                                       mm_tn(n, rows, k, gc, va, gb);  // dB = dC^T * A
                                   } else {
                                       mm_tn(k, rows, n, va, gc, gb);  // dB = A^T * dC
                                   }
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// softmax family

Tensor softmax(const Tensor& x, std::size_t axis) {
    const Node& nx = checked(x);
    const AxisSplit s = split_axis(nx.shape, axis, "softmax");
    std::vector<double> out(nx.value.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.length * s.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < s.length; ++j) mx = std::max(mx, nx.value[base + j * s.inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < s.length; ++j) {
                const double e = std::exp(nx.value[base + j * s.inner] - mx);
                out[base + j * s.inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < s.length; ++j) out[base + j * s.inner] /= total;
        }
    }
    auto px = x.node();
    return make_result(nx.shape, std::move(out), {px}, [px, s](Node& self) {
        auto& g = px->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t in = 0; in < s.inner; ++in) {
                const std::size_t base = o * s.length * s.inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < s.length; ++j) {
                    const std::size_t idx = base + j * s.inner;
                    dot += self.grad[idx] * self.value[idx];
                }
                for (std::size_t j = 0; j < s.length; ++j) {
                    const std::size_t idx = base + j * s.inner;
                    g[idx] += self.value[idx] * (self.grad[idx] - dot);
                }
            }
        }
    });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
    const Node& nx = checked(x);
    const AxisSplit s = split_axis(nx.shape, axis, "log_softmax");
    std::vector<double> out(nx.value.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.length * s.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < s.length; ++j) mx = std::max(mx, nx.value[base + j * s.inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < s.length; ++j) total += std::exp(nx.value[base + j * s.inner] - mx);
            const double lse = mx + std::log(total);
            for (std::size_t j = 0; j < s.length; ++j) out[base + j * s.inner] = nx.value[base + j * s.inner] - lse;
        }
    }
    auto px = x.node();
    return make_result(nx.shape, std::move(out), {px}, [px, s](Node& self) {
        auto& g = px->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t in = 0; in < s.inner; ++in) {
                const std::size_t base = o * s.length * s.inner + in;
                double gsum = 0.0;
                for (std::size_t j = 0; j < s.length; ++j) gsum += self.grad[base + j * s.inner];
                for (std::size_t j = 0; j < s.length; ++j) {
                    const std::size_t idx = base + j * s.inner;
                    g[idx] += self.grad[idx] - std::exp(self.value[idx]) * gsum;
                }
            }
        }
    });
}

namespace {

void check_token_inputs(const Node& logits, std::span<const int> targets, const char* op) {
    if (logits.shape.size() != 2) throw DimensionError(std::string(op) + ": logits must be [n, v], got " + shape_str(logits.shape));
    if (targets.size() != logits.shape[0]) {
        throw DimensionError(std::string(op) + ": " + std::to_string(targets.size()) + " targets for logits " +
                             shape_str(logits.shape));
    }
    for (int t : targets) {
        if (t >= static_cast<int>(logits.shape[1])) {
            throw DimensionError(std::string(op) + ": target id " + std::to_string(t) + " outside vocabulary of " +
                                 std::to_string(logits.shape[1]));
        }
    }
}

// Softmax of one row into `probs`.
void row_softmax(const double* row, std::size_t v, double* probs) {
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
        probs[j] = std::exp(row[j] - mx);
        total += probs[j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[j] /= total;
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    const Node& nl = checked(logits);
    check_token_inputs(nl, targets, "cross_entropy");
    const std::size_t n = nl.shape[0];
    const std::size_t v = nl.shape[1];
    std::vector<double> out(n, 0.0);
    std::vector<double> probs(n * v, 0.0);
    std::vector<int> tgt(targets.begin(), targets.end());
    for (std::size_t i = 0; i < n; ++i) {
        if (tgt[i] < 0) continue;
        const double* row = nl.value.data() + i * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double total = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            probs[i * v + j] = std::exp(row[j] - mx);
            total += probs[i * v + j];
        }
        for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= total;
        out[i] = mx + std::log(total) - row[tgt[i]];
    }
    auto pl = logits.node();
    return make_result({n}, std::move(out), {pl}, [pl, tgt = std::move(tgt), probs = std::move(probs), v](Node& self) {
        auto& g = pl->grad_buffer();
        for (std::size_t i = 0; i < tgt.size(); ++i) {
            if (tgt[i] < 0) continue;
            const double gi = self.grad[i];
            for (std::size_t j = 0; j < v; ++j) g[i * v + j] += gi * probs[i * v + j];
            g[i * v + static_cast<std::size_t>(tgt[i])] -= gi;
        }
    });
}

Tensor unlikelihood(const Tensor& logits, std::span<const int> targets) {
    constexpr double ceiling = 1.0 - 1e-7;
    const Node& nl = checked(logits);
    check_token_inputs(nl, targets, "unlikelihood");
    const std::size_t n = nl.shape[0];
    const std::size_t v = nl.shape[1];
    std::vector<double> out(n, 0.0);
    std::vector<double> probs(n * v, 0.0);
    std::vector<int> tgt(targets.begin(), targets.end());
    for (std::size_t i = 0; i < n; ++i) {
        if (tgt[i] < 0) continue;
        row_softmax(nl.value.data() + i * v, v, probs.data() + i * v);
        const double p = std::min(probs[i * v + static_cast<std::size_t>(tgt[i])], ceiling);
        out[i] = -std::log1p(-p);
    }
    auto pl = logits.node();
    return make_result({n}, std::move(out), {pl}, [pl, tgt = std::move(tgt), probs = std::move(probs), v](Node& self) {
        auto& g = pl->grad_buffer();
        for (std::size_t i = 0; i < tgt.size(); ++i) {
            if (tgt[i] < 0) continue;
            const std::size_t t = static_cast<std::size_t>(tgt[i]);
            const double pt = probs[i * v + t];
            if (pt > ceiling) continue;  // clamped: flat
            // d/dz_j [-log(1 - p_t)] = p_t (delta_jt - p_j) / (1 - p_t)
            const double coef = self.grad[i] * pt / (1.0 - pt);
            for (std::size_t j = 0; j < v; ++j) g[i * v + j] -= coef * probs[i * v + j];
            g[i * v + t] += coef;
        }
    });
}

// ---------------------------------------------------------------------------
// layer_norm

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const Node& nx = checked(x);
    const Node& ng = checked(gain);
    const Node& nb = checked(bias);
    if (nx.shape.empty()) throw DimensionError("layer_norm: scalar input");
    const std::size_t width = nx.shape.back();
    if (ng.value.size() != width || nb.value.size() != width) {
        throw DimensionError("layer_norm: input " + shape_str(nx.shape) + " with gain " + shape_str(ng.shape) +
                             " and bias " + shape_str(nb.shape));
    }
    const std::size_t rows = nx.value.size() / width;
    std::vector<double> out(nx.value.size());
    std::vector<double> normed(nx.value.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = nx.value.data() + r * width;
        double mu = 0.0;
        for (std::size_t j = 0; j < width; ++j) mu += row[j];
        mu /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(width);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < width; ++j) {
            const double xh = (row[j] - mu) * is;
            normed[r * width + j] = xh;
            out[r * width + j] = xh * ng.value[j] + nb.value[j];
        }
    }
    auto px = x.node();
    auto pg = gain.node();
    auto pb = bias.node();
    return make_result(nx.shape, std::move(out), {px, pg, pb},
                       [px, pg, pb, width, rows, normed = std::move(normed), inv_std = std::move(inv_std)](Node& self) {
                           const double w = static_cast<double>(width);
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* gy = self.grad.data() + r * width;
                               const double* xh = normed.data() + r * width;
                               if (pg->requires_grad) {
                                   auto& gg = pg->grad_buffer();
                                   for (std::size_t j = 0; j < width; ++j) gg[j] += gy[j] * xh[j];
                               }
                               if (pb->requires_grad) {
                                   auto& gb = pb->grad_buffer();
                                   for (std::size_t j = 0; j < width; ++j) gb[j] += gy[j];
                               }
                               if (px->requires_grad) {
                                   double* gx = px->grad_buffer().data() + r * width;
                                   double m1 = 0.0;
                                   double m2 = 0.0;
                                   for (std::size_t j = 0; j < width; ++j) {
                                       const double d = gy[j] * pg->value[j];
                                       m1 += d;
                                       m2 += d * xh[j];
                                   }
                                   m1 /= w;
                                   m2 /= w;
                                   for (std::size_t j = 0; j < width; ++j) {
                                       const double d = gy[j] * pg->value[j];
                                       gx[j] += inv_std[r] * (d - m1 - xh[j] * m2);
                                   }
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// masking, gathering, shape ops

Tensor masked_fill(const Tensor& x, const BoolTensor& mask, double value) {
    const Node& nx = checked(x);
    const Shape out = broadcast_shape(nx.shape, mask.shape, "masked_fill");
    if (out != nx.shape) {
        throw DimensionError("masked_fill: mask " + shape_str(mask.shape) + " does not broadcast to " +
                             shape_str(nx.shape));
    }
    std::vector<std::size_t> idx = broadcast_index(nx.shape, mask.shape);
    std::vector<std::uint8_t> hit(nx.value.size());
    std::vector<double> values(nx.value.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        hit[i] = mask.data[idx[i]];
        values[i] = hit[i] ? value : nx.value[i];
    }
    auto px = x.node();
    return make_result(nx.shape, std::move(values), {px}, [px, hit = std::move(hit)](Node& self) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!hit[i]) g[i] += self.grad[i];
        }
    });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& index_shape) {
    const Node& nt = checked(table);
    if (nt.shape.size() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(nt.shape));
    if (shape_numel(index_shape) != ids.size()) {
        throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids for index shape " +
                             shape_str(index_shape));
    }
    const std::size_t rows = nt.shape[0];
    const std::size_t width = nt.shape[1];
    std::vector<int> idx(ids.begin(), ids.end());
    std::vector<double> out(idx.size() * width);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= rows) {
            throw DimensionError("embedding: id " + std::to_string(idx[i]) + " outside table " + shape_str(nt.shape));
        }
        std::copy_n(nt.value.data() + static_cast<std::size_t>(idx[i]) * width, width, out.data() + i * width);
    }
    Shape out_shape = index_shape;
    out_shape.push_back(width);
    auto pt = table.node();
    return make_result(std::move(out_shape), std::move(out), {pt}, [pt, idx = std::move(idx), width](Node& self) {
        auto& g = pt->grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            double* dst = g.data() + static_cast<std::size_t>(idx[i]) * width;
            const double* src = self.grad.data() + i * width;
            for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
        }
    });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    const Node& nx = checked(x);
    if (shape_numel(shape) != nx.value.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(nx.shape) + " as " + shape_str(shape));
    }
    auto px = x.node();
    return make_result(shape, nx.value, {px}, [px](Node& self) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
    const Node& nx = checked(x);
    const std::size_t rank = nx.shape.size();
    if (axis0 >= rank || axis1 >= rank) {
        throw DimensionError("transpose: axes " + std::to_string(axis0) + "," + std::to_string(axis1) +
                             " invalid for " + shape_str(nx.shape));
    }
    Shape out_shape = nx.shape;
    std::swap(out_shape[axis0], out_shape[axis1]);
    // Map each output element to its source offset.
    std::vector<std::size_t> in_stride(rank);
    std::size_t stride = 1;
    for (std::size_t a = rank; a-- > 0;) {
        in_stride[a] = stride;
        stride *= nx.shape[a];
    }
    std::vector<std::size_t> src_stride = in_stride;
    std::swap(src_stride[axis0], src_stride[axis1]);
    const std::size_t n = nx.value.size();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < n; ++i) {
        src[i] = offset;
        for (std::size_t a = rank; a-- > 0;) {
            ++counter[a];
            offset += src_stride[a];
            if (counter[a] < out_shape[a]) break;
            offset -= src_stride[a] * counter[a];
            counter[a] = 0;
        }
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = nx.value[src[i]];
    auto px = x.node();
    return make_result(std::move(out_shape), std::move(out), {px}, [px, src = std::move(src)](Node& self) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
    });
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    const Node& nx = checked(x);
    const AxisSplit s = split_axis(nx.shape, axis, "narrow");
    if (length == 0 || start + length > s.length) {
        throw DimensionError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") outside axis " + std::to_string(axis) + " of " + shape_str(nx.shape));
    }
    Shape out_shape = nx.shape;
    out_shape[axis] = length;
    std::vector<double> out(s.outer * length * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(nx.value.data() + (o * s.length + start) * s.inner, length * s.inner,
                    out.data() + o * length * s.inner);
    }
    auto px = x.node();
    return make_result(std::move(out_shape), std::move(out), {px}, [px, s, start, length](Node& self) {
        auto& g = px->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o) {
            const double* src = self.grad.data() + o * length * s.inner;
            double* dst = g.data() + (o * s.length + start) * s.inner;
            for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
        }
    });
}

Tensor sum(const Tensor& x) {
    const Node& nx = checked(x);
    double total = 0.0;
    for (double v : nx.value) total += v;
    auto px = x.node();
    return make_result({1}, {total}, {px}, [px](Node& self) {
        auto& g = px->grad_buffer();
        for (double& gi : g) gi += self.grad[0];
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor dropout(const Tensor& x, double probability, Rng& rng) {
    if (probability <= 0.0) return x;
    if (probability >= 1.0) throw std::invalid_argument("dropout probability must be below 1");
    const Node& nx = checked(x);
    const double keep_scale = 1.0 / (1.0 - probability);
    std::vector<double> factor(nx.value.size());
    std::vector<double> out(nx.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        factor[i] = uniform01(rng) < probability ? 0.0 : keep_scale;
        out[i] = nx.value[i] * factor[i];
    }
    auto px = x.node();
    return make_result(nx.shape, std::move(out), {px}, [px, factor = std::move(factor)](Node& self) {
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor[i];
    });
}

// ---------------------------------------------------------------------------
// backward

void backward(const Tensor& loss) {
    const Node& root = checked(loss);
    if (root.value.size() != 1) throw DimensionError("backward: loss must be scalar, got " + shape_str(root.shape));
    if (root.consumed) throw GraphError("backward: graph already consumed; run a new forward pass");
    if (!root.requires_grad) throw GraphError("backward: loss does not depend on any tensor requiring grad");

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    Node* start = loss.node().get();
    stack.emplace_back(start, 0);
    seen.insert(start);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && !seen.count(parent)) {
                if (parent->consumed) throw GraphError("backward: graph already consumed; run a new forward pass");
                seen.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    Node& top = *loss.node();
    top.grad_buffer();
    top.grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    // Release the tape: interior nodes drop closures, parents and gradients.
    for (Node* node : order) {
        if (node->backward_fn) {
            node->backward_fn = nullptr;
            node->parents.clear();
            node->consumed = true;
            if (node != &top) {
                node->grad.clear();
                node->grad.shrink_to_fit();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// random helpers

double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double standard_normal(Rng& rng) {
    double u1 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace bob
