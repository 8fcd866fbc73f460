#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "bob/tensor.hpp"
#include "oracle.hpp"
#include "support.hpp"

using namespace bob;
using bob::test::check_gradients;
using bob::test::project;
using bob::test::random_shape;
using bob::test::random_tensor;

namespace {

constexpr int trials = 50;
constexpr double op_tolerance = 1e-4;

void expect_abs(std::span<const double> got, const std::vector<double>& want, double tol) {
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= tol);
}

}  // namespace

TEST_CASE("matmul examples") {
    const auto id = Tensor::from({2, 2}, {1, 0, 0, 1});
    const auto m = Tensor::from({2, 2}, {1.5, -2, 3, 4});
    expect_abs(matmul(id, m).data(), {1.5, -2, 3, 4}, 0.0);
    CHECK(matmul(Tensor::from({1, 1}, {2}), Tensor::from({1, 1}, {3})).item() == 6.0);

    Rng rng(1);
    const auto a = random_tensor({3, 4}, rng, false);
    const auto b = random_tensor({4, 2}, rng, false);
    const auto want = oracle::matmul(oracle::to_mat(a, 3, 4), oracle::to_mat(b, 4, 2));
    expect_abs(matmul(a, b).data(), oracle::flatten(want), 1e-12);

    CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), DimensionError);
    try {
        matmul(a, Tensor::zeros({3, 2}));
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[3, 4]") != std::string::npos);
        CHECK(msg.find("[3, 2]") != std::string::npos);
    }
}

TEST_CASE("matmul batched and transposed forms agree with loops") {
    Rng rng(2);
    const auto a = random_tensor({2, 3, 4}, rng, false);
    const auto b = random_tensor({2, 5, 4}, rng, false);
    const auto c = matmul(a, b, true);
    REQUIRE(c.shape() == Shape{2, 3, 5});
    for (std::size_t n = 0; n < 2; ++n) {
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 5; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < 4; ++k) acc += a.at(n * 12 + i * 4 + k) * b.at(n * 20 + j * 4 + k);
                CHECK(std::abs(c.at(n * 15 + i * 5 + j) - acc) < 1e-12);
            }
        }
    }
}

TEST_CASE("softmax examples and properties") {
    expect_abs(softmax(Tensor::from({3}, {0, 0, 0}), 0).data(), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    expect_abs(softmax(Tensor::from({3}, {1, 2, 3}), 0).data(), {std::exp(1.0) / z, std::exp(2.0) / z, std::exp(3.0) / z},
               1e-12);

    Rng rng(3);
    for (int t = 0; t < trials; ++t) {
        const auto x = random_tensor(random_shape(rng, 2), rng, false, 3.0);
        const auto s = softmax(x, 1);
        const auto shifted = softmax(add(x, Tensor::scalar(7.25)), 1);
        const std::size_t rows = x.dim(0), cols = x.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                const double v = s.at(r * cols + c);
                CHECK(v > 0.0);
                CHECK(v <= 1.0);
                total += v;
                CHECK(std::abs(v - shifted.at(r * cols + c)) < 1e-12);
            }
            CHECK(std::abs(total - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("log_softmax matches log of softmax") {
    Rng rng(4);
    const auto x = random_tensor({3, 5}, rng, false, 4.0);
    const auto a = log_softmax(x, 1);
    const auto b = softmax(x, 1);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(std::abs(a.at(i) - std::log(b.at(i))) < 1e-12);
}

TEST_CASE("layer_norm examples") {
    const auto ones = Tensor::full({4}, 1.0);
    const auto zeros = Tensor::zeros({4});
    expect_abs(layer_norm(Tensor::full({2, 4}, 3.5), ones, zeros).data(), std::vector<double>(8, 0.0), 0.0);

    Rng rng(5);
    const auto x = random_tensor({3, 4}, rng, false);
    const auto bias = random_tensor({4}, rng, false);
    const auto y = layer_norm(x, Tensor::zeros({4}), bias);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 4; ++c) CHECK(y.at(r * 4 + c) == bias.at(c));
    }

    const auto gain = random_tensor({4}, rng, false);
    const auto got = layer_norm(x, gain, bias);
    const auto want = oracle::layer_norm(oracle::to_mat(x, 3, 4), oracle::to_vec(gain), oracle::to_vec(bias));
    expect_abs(got.data(), oracle::flatten(want), 1e-10);
}

TEST_CASE("masked_fill examples") {
    Rng rng(6);
    const auto x = random_tensor({3, 3}, rng, false);
    expect_abs(masked_fill(x, BoolTensor({3, 3}, false), -1e9).data(), {x.data().begin(), x.data().end()}, 0.0);

    const auto all = softmax(masked_fill(x, BoolTensor({3, 3}, true), -1e9), 1);
    for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(all.at(i) - 1.0 / 3.0) < 1e-12);

    BoolTensor causal({3, 3}, false);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = i + 1; j < 3; ++j) causal.data[i * 3 + j] = 1;
    }
    const auto w = softmax(masked_fill(x, causal, -1e9), 1);
    for (std::size_t i = 0; i < 3; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < 3; ++j) {
            if (j > i) CHECK(w.at(i * 3 + j) < 1e-30);
            else CHECK(w.at(i * 3 + j) > 0.0);
            row += w.at(i * 3 + j);
        }
        CHECK(std::abs(row - 1.0) < 1e-12);
    }
    CHECK(w.at(0) == 1.0);

    CHECK_THROWS_AS(masked_fill(x, BoolTensor({2, 3}, false), -1e9), DimensionError);
}

TEST_CASE("masked entries receive no gradient") {
    auto x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
    BoolTensor mask({2, 2}, std::vector<std::uint8_t>{0, 1, 1, 0});
    backward(sum(masked_fill(x, mask, -1e9)));
    expect_abs(x.grad(), {1, 0, 0, 1}, 0.0);
}

TEST_CASE("backward examples") {
    auto x = Tensor::from({2, 3}, {1, -2, 3, 0.5, 4, -1}, true);
    backward(sum(x));
    expect_abs(x.grad(), std::vector<double>(6, 1.0), 0.0);

    auto y = Tensor::from({3}, {1.5, -2, 0.25}, true);
    backward(sum(mul(y, y)));
    expect_abs(y.grad(), {3.0, -4.0, 0.5}, 1e-15);
}

TEST_CASE("backward errors") {
    auto x = Tensor::from({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(mul(x, x)), DimensionError);

    const auto loss = sum(mul(x, x));
    backward(loss);
    CHECK_THROWS_AS(backward(loss), GraphError);

    CHECK_THROWS_AS(backward(sum(Tensor::from({2}, {1, 2}))), GraphError);
}

TEST_CASE("gradients accumulate across separate graphs") {
    auto x = Tensor::from({2}, {1, 2}, true);
    backward(sum(x));
    backward(sum(scale(x, 2.0)));
    expect_abs(x.grad(), {3, 3}, 0.0);
}

TEST_CASE("embedding gathers rows and scatters gradients") {
    auto table = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    const std::vector<int> ids{2, 0, 2};
    const auto out = embedding(table, ids, {3});
    expect_abs(out.data(), {5, 6, 1, 2, 5, 6}, 0.0);
    backward(sum(out));
    expect_abs(table.grad(), {1, 1, 0, 0, 2, 2}, 0.0);
    const std::vector<int> bad{3};
    CHECK_THROWS_AS(embedding(table, bad, {1}), DimensionError);
}

TEST_CASE("cross_entropy and unlikelihood values") {
    const auto uniform = Tensor::zeros({2, 4});
    const std::vector<int> targets{1, 3};
    const auto ce = cross_entropy(uniform, targets);
    CHECK(std::abs(ce.at(0) - std::log(4.0)) < 1e-12);
    CHECK(std::abs(ce.at(1) - std::log(4.0)) < 1e-12);

    // p = 0.5 for the target
    const auto half = Tensor::from({1, 2}, {0, 0});
    const std::vector<int> t0{0};
    CHECK(std::abs(unlikelihood(half, t0).item() - std::log(2.0)) < 1e-12);

    // p -> 1: clamp ceiling
    const auto sure = Tensor::from({1, 2}, {60, -60});
    CHECK(std::abs(unlikelihood(sure, t0).item() + std::log(1e-7)) < 1e-9);

    // p -> 0: loss -> 0
    const auto never = Tensor::from({1, 2}, {-60, 60});
    CHECK(unlikelihood(never, t0).item() < 1e-40);

    const std::vector<int> ignored{-1, 2};
    const auto masked = cross_entropy(Tensor::zeros({2, 3}), ignored);
    CHECK(masked.at(0) == 0.0);
    CHECK(std::abs(masked.at(1) - std::log(3.0)) < 1e-12);

    const std::vector<int> out_of_range{5};
    CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 3}), out_of_range), DimensionError);
}

TEST_CASE("unlikelihood is increasing in the target probability") {
    Rng rng(7);
    for (int t = 0; t < trials; ++t) {
        const std::size_t v = 2 + bob::test::random_index(rng, 5);
        auto logits = random_tensor({1, v}, rng, false);
        const int target = static_cast<int>(bob::test::random_index(rng, v));
        const std::vector<int> tg{target};
        const double before = unlikelihood(logits, tg).item();
        auto raised = logits.detach();
        raised.mutable_data()[static_cast<std::size_t>(target)] += 0.1 + uniform01(rng);
        CHECK(unlikelihood(raised, tg).item() > before);
    }
}

TEST_CASE("shape ops") {
    const auto x = Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5});
    expect_abs(reshape(x, {3, 2}).data(), {0, 1, 2, 3, 4, 5}, 0.0);
    expect_abs(transpose(x, 0, 1).data(), {0, 3, 1, 4, 2, 5}, 0.0);
    expect_abs(narrow(x, 1, 1, 2).data(), {1, 2, 4, 5}, 0.0);
    CHECK_THROWS_AS(reshape(x, {4, 2}), DimensionError);
    CHECK_THROWS_AS(narrow(x, 1, 2, 2), DimensionError);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), DimensionError);
}

TEST_CASE("dropout is deterministic and inverted") {
    const auto x = Tensor::full({1000}, 1.0);
    Rng a(11), b(11);
    const auto da = dropout(x, 0.25, a);
    const auto db = dropout(x, 0.25, b);
    double total = 0.0;
    for (std::size_t i = 0; i < 1000; ++i) {
        CHECK(da.at(i) == db.at(i));
        CHECK((da.at(i) == 0.0 || std::abs(da.at(i) - 1.0 / 0.75) < 1e-15));
        total += da.at(i);
    }
    CHECK(std::abs(total / 1000.0 - 1.0) < 0.1);
    Rng c(1);
    CHECK(dropout(x, 0.0, c).node() == x.node());
}

TEST_CASE("identical inputs give bit-identical outputs and gradients") {
    auto run = []() {
        Rng rng(99);
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({4, 4}, rng);
        auto g = random_tensor({4}, rng);
        auto z = random_tensor({4}, rng);
        const auto out = softmax(layer_norm(matmul(a, b), g, z), 1);
        backward(project(out, 5));
        std::vector<double> v(out.data().begin(), out.data().end());
        v.insert(v.end(), a.grad().begin(), a.grad().end());
        v.insert(v.end(), b.grad().begin(), b.grad().end());
        return v;
    };
    CHECK(run() == run());
}

// ---------------------------------------------------------------------------
// Finite-difference checks, one suite per op.

namespace {

void run_trials(const char* name, const std::function<void(Rng&, std::uint64_t)>& trial) {
    Rng rng(std::hash<std::string>{}(name));
    for (int t = 0; t < trials; ++t) trial(rng, static_cast<std::uint64_t>(t));
}

void require_grad_ok(const bob::test::GradCheck& r) {
    INFO(r.worst);
    CHECK(r.checked > 0);
    CHECK(r.max_error < op_tolerance);
}

// Broadcast partner for `s`: some axes collapsed to 1, maybe fewer leading axes.
Shape broadcast_partner(const Shape& s, Rng& rng) {
    Shape out = s;
    for (auto& d : out) {
        if (uniform01(rng) < 0.4) d = 1;
    }
    if (out.size() > 1 && uniform01(rng) < 0.3) out.erase(out.begin());
    return out;
}

}  // namespace

TEST_CASE("gradient check: add, sub, mul with broadcasting") {
    run_trials("binary", [](Rng& rng, std::uint64_t seed) {
        const Shape s = random_shape(rng, 1 + bob::test::random_index(rng, 3));
        auto a = random_tensor(s, rng);
        auto b = random_tensor(broadcast_partner(s, rng), rng);
        require_grad_ok(check_gradients({a, b}, [&] { return project(add(a, b), seed); }));
        require_grad_ok(check_gradients({a, b}, [&] { return project(sub(b, a), seed); }));
        require_grad_ok(check_gradients({a, b}, [&] { return project(mul(a, b), seed); }));
        require_grad_ok(check_gradients({a}, [&] { return project(scale(a, -1.7), seed); }));
    });
}

TEST_CASE("gradient check: matmul") {
    run_trials("matmul", [](Rng& rng, std::uint64_t seed) {
        const std::size_t m = 1 + bob::test::random_index(rng, 5), k = 1 + bob::test::random_index(rng, 5),
                          n = 1 + bob::test::random_index(rng, 5), batch = 1 + bob::test::random_index(rng, 3);
        auto a = random_tensor({batch, m, k}, rng);
        auto shared = random_tensor({k, n}, rng);
        auto batched = random_tensor({batch, k, n}, rng);
        auto bt = random_tensor({batch, n, k}, rng);
        require_grad_ok(check_gradients({a, shared}, [&] { return project(matmul(a, shared), seed); }));
        require_grad_ok(check_gradients({a, batched}, [&] { return project(matmul(a, batched), seed); }));
        require_grad_ok(check_gradients({a, bt}, [&] { return project(matmul(a, bt, true), seed); }));
    });
}

TEST_CASE("gradient check: relu and gelu") {
    run_trials("activations", [](Rng& rng, std::uint64_t seed) {
        auto x = random_tensor(random_shape(rng, 2), rng);
        // keep relu inputs away from the kink
        for (double& v : x.mutable_data()) {
            if (std::abs(v) < 1e-2) v += 0.05;
        }
        require_grad_ok(check_gradients({x}, [&] { return project(relu(x), seed); }));
        require_grad_ok(check_gradients({x}, [&] { return project(gelu(x), seed); }));
    });
}

TEST_CASE("gradient check: softmax and log_softmax") {
    run_trials("softmax", [](Rng& rng, std::uint64_t seed) {
        const std::size_t rank = 1 + bob::test::random_index(rng, 3);
        auto x = random_tensor(random_shape(rng, rank), rng, true, 2.0);
        const std::size_t axis = bob::test::random_index(rng, rank);
        require_grad_ok(check_gradients({x}, [&] { return project(softmax(x, axis), seed); }));
        require_grad_ok(check_gradients({x}, [&] { return project(log_softmax(x, axis), seed); }));
    });
}

TEST_CASE("gradient check: layer_norm") {
    run_trials("layer_norm", [](Rng& rng, std::uint64_t seed) {
        Shape s = random_shape(rng, 1 + bob::test::random_index(rng, 3));
        s.back() = std::max<std::size_t>(2, s.back());
        auto x = random_tensor(s, rng);
        auto g = random_tensor({s.back()}, rng);
        auto b = random_tensor({s.back()}, rng);
        require_grad_ok(check_gradients({x, g, b}, [&] { return project(layer_norm(x, g, b), seed); }));
    });
}

TEST_CASE("gradient check: masked_fill") {
    run_trials("masked_fill", [](Rng& rng, std::uint64_t seed) {
        const Shape s = random_shape(rng, 2);
        auto x = random_tensor(s, rng);
        BoolTensor mask(s, false);
        for (auto& m : mask.data) m = uniform01(rng) < 0.3;
        require_grad_ok(check_gradients({x}, [&] { return project(softmax(masked_fill(x, mask, -1e9), 1), seed); }));
    });
}

TEST_CASE("gradient check: embedding") {
    run_trials("embedding", [](Rng& rng, std::uint64_t seed) {
        const std::size_t rows = 1 + bob::test::random_index(rng, 5), width = 1 + bob::test::random_index(rng, 5);
        auto table = random_tensor({rows, width}, rng);
        const std::size_t n = 1 + bob::test::random_index(rng, 6);
        std::vector<int> ids(n);
        for (auto& id : ids) id = static_cast<int>(bob::test::random_index(rng, rows));
        require_grad_ok(check_gradients({table}, [&] { return project(embedding(table, ids, {n}), seed); }));
    });
}

TEST_CASE("gradient check: cross_entropy and unlikelihood") {
    run_trials("token_losses", [](Rng& rng, std::uint64_t seed) {
        const std::size_t n = 1 + bob::test::random_index(rng, 5), v = 2 + bob::test::random_index(rng, 4);
        auto logits = random_tensor({n, v}, rng, true, 1.5);
        std::vector<int> targets(n);
        for (auto& t : targets) t = uniform01(rng) < 0.2 ? -1 : static_cast<int>(bob::test::random_index(rng, v));
        require_grad_ok(check_gradients({logits}, [&] { return project(cross_entropy(logits, targets), seed); }));
        require_grad_ok(check_gradients({logits}, [&] { return project(unlikelihood(logits, targets), seed); }));
    });
}

TEST_CASE("gradient check: reshape, transpose, narrow, sum, mean") {
    run_trials("shape_ops", [](Rng& rng, std::uint64_t seed) {
        const Shape s = random_shape(rng, 3);
        auto x = random_tensor(s, rng);
        const std::size_t a0 = bob::test::random_index(rng, 3), a1 = bob::test::random_index(rng, 3);
        const std::size_t axis = bob::test::random_index(rng, 3);
        const std::size_t start = bob::test::random_index(rng, s[axis]);
        const std::size_t len = 1 + bob::test::random_index(rng, s[axis] - start);
        require_grad_ok(check_gradients({x}, [&] { return project(reshape(x, {s[0] * s[1], s[2]}), seed); }));
        require_grad_ok(check_gradients({x}, [&] { return project(transpose(x, a0, a1), seed); }));
        require_grad_ok(check_gradients({x}, [&] { return project(narrow(x, axis, start, len), seed); }));
        require_grad_ok(check_gradients({x}, [&] { return mul(sum(x), mean(x)); }));
    });
}

TEST_CASE("gradient check: dropout with a fixed mask") {
    run_trials("dropout", [](Rng& rng, std::uint64_t seed) {
        auto x = random_tensor(random_shape(rng, 2), rng);
        const std::uint64_t mask_seed = seed + 1000;
        require_grad_ok(check_gradients({x}, [&] {
            Rng r(mask_seed);
            return project(dropout(x, 0.3, r), seed);
        }));
    });
}

TEST_CASE("gradient check: composite graph") {
    run_trials("composite", [](Rng& rng, std::uint64_t seed) {
        const std::size_t t = 1 + bob::test::random_index(rng, 4), h = 2 + bob::test::random_index(rng, 3);
        auto x = random_tensor({t, h}, rng);
        auto w = random_tensor({h, h}, rng);
        auto g = random_tensor({h}, rng);
        auto b = random_tensor({h}, rng);
        std::vector<int> targets(t);
        for (auto& id : targets) id = static_cast<int>(bob::test::random_index(rng, h));
        require_grad_ok(check_gradients({x, w, g, b}, [&] {
            const auto hid = layer_norm(add(x, gelu(matmul(x, w))), g, b);
            const auto scores = softmax(matmul(hid, hid, true), 1);
            return add(mean(cross_entropy(matmul(scores, hid), targets)), scale(project(hid, seed), 0.1));
        }));
    });
}
