#pragma once

// Shared test helpers: random tensors, central-difference gradient checks,
// and small fixtures.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "bob/model.hpp"
#include "bob/tensor.hpp"

namespace bob::test {

inline Tensor random_tensor(const Shape& shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = scale * standard_normal(rng);
    return Tensor::from(shape, std::move(v), requires_grad);
}

inline Shape random_shape(Rng& rng, std::size_t rank, std::size_t max_dim = 5) {
    Shape s(rank);
    for (auto& d : s) d = 1 + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(max_dim));
    return s;
}

inline std::size_t random_index(Rng& rng, std::size_t n) {
    return std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
}

/// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

struct GradCheck {
    double max_error = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

/// Compares backward() against central differences for every element of
/// every input. `loss` must rebuild the graph from the inputs on each call.
inline GradCheck check_gradients(std::vector<Tensor> inputs, const std::function<Tensor()>& loss, double h = 1e-5,
                                 double floor = 1e-6) {
    for (auto& t : inputs) t.zero_grad();
    backward(loss());
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) {
        if (t.has_grad()) analytic.emplace_back(t.grad().begin(), t.grad().end());
        else analytic.emplace_back(t.numel(), 0.0);
    }

    GradCheck out;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto values = inputs[i].mutable_data();
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double saved = values[k];
            values[k] = saved + h;
            const double up = loss().item();
            values[k] = saved - h;
            const double down = loss().item();
            values[k] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double err = relative_error(analytic[i][k], numeric, floor);
            ++out.checked;
            if (err > out.max_error) {
                out.max_error = err;
                out.worst = "input " + std::to_string(i) + "[" + std::to_string(k) + "] analytic " +
                            std::to_string(analytic[i][k]) + " numeric " + std::to_string(numeric);
            }
        }
    }
    return out;
}

/// Scalar projection of an arbitrary output so every element gets a
/// distinct, generic upstream gradient.
inline Tensor project(const Tensor& out, std::uint64_t seed) {
    Rng rng(seed);
    return sum(mul(out, random_tensor(out.shape(), rng, false)));
}

inline ModelConfig tiny_config(std::size_t layers = 1, std::size_t hidden = 4, std::size_t heads = 2,
                               std::size_t vocab = 7) {
    ModelConfig c;
    c.num_layers = layers;
    c.hidden_size = hidden;
    c.num_heads = heads;
    c.ffn_size = 2 * hidden;
    c.vocab_size = vocab;
    c.max_len = 16;
    c.dropout = 0.0;
    c.init_std = 0.5;
    return c;
}

}  // namespace bob::test
