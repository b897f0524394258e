#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "msp/tensor.hpp"

using namespace msp;

namespace {

Tensor rand_tensor(Rng& rng, int r, int c, bool requires_grad = true) {
    Tensor t = Tensor::zeros({r, c}, requires_grad);
    for (float& v : t.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return t;
}

// scalar readout used by all finite-difference probes
Tensor weighted_sum(const Tensor& t, const Tensor& w) { return sum_all(mul(t, w)); }

// Probe an op under several independent readout directions and keep the best
// error: a wrong backward fails under every direction, while one unlucky
// direction can cancel a coordinate's gradient below the f32 noise floor.
double fd_probe(const std::function<Tensor(const Tensor&, const Tensor&)>& f, Tensor x, int wr,
                int wc, Rng& rng, double eps) {
    double best = 1e300;
    for (int attempt = 0; attempt < 4 && best >= 5e-3; ++attempt) {
        const Tensor w = rand_tensor(rng, wr, wc, false);
        best = std::min(
            best, finite_difference_check([&](const Tensor& t) { return f(t, w); }, x, eps));
    }
    return best;
}

}  // namespace

TEST_CASE("matmul with identity returns the input") {
    const Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    const Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    const Tensor r = matmul(a, eye);
    REQUIRE(r.data() == std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("softmax of zero logits is uniform") {
    const Tensor r = softmax_lastdim(Tensor::zeros({1, 4}));
    for (float v : r.data()) REQUIRE(v == Catch::Approx(0.25).margin(1e-7));
}

TEST_CASE("tanh value and derivative at zero") {
    Tensor x = Tensor::zeros({1, 1}, true);
    Tensor y = tanh(x);
    REQUIRE(y.item() == 0.0f);
    backward(y);
    REQUIRE(x.grad()[0] == Catch::Approx(1.0));
}

TEST_CASE("backward through a bilinear form") {
    Tensor x = Tensor::from_data({1, 2}, {1, 2}, true);
    Tensor y = Tensor::from_data({1, 2}, {3, 4});
    Tensor loss = sum_all(mul(x, y));
    REQUIRE(loss.item() == Catch::Approx(11.0));
    backward(loss);
    REQUIRE(x.grad()[0] == Catch::Approx(3.0));
    REQUIRE(x.grad()[1] == Catch::Approx(4.0));
}

TEST_CASE("cross entropy gradient at uniform logits is softmax minus onehot") {
    Tensor logits = Tensor::zeros({1, 2}, true);
    Tensor loss = cross_entropy_logits(logits, {0});
    REQUIRE(loss.item() == Catch::Approx(std::log(2.0)));
    backward(loss);
    REQUIRE(logits.grad()[0] == Catch::Approx(-0.5));
    REQUIRE(logits.grad()[1] == Catch::Approx(0.5));
}

TEST_CASE("finite differences on a quadratic are nearly exact") {
    Tensor x = Tensor::from_data({1, 2}, {1, -2}, true);
    auto f = [](const Tensor& t) { return sum_all(mul(t, t)); };
    REQUIRE(finite_difference_check(f, x, 1e-3) <= 1e-4);
}

TEST_CASE("finite difference check rejects eps of zero") {
    Tensor x = Tensor::from_data({1, 2}, {1, -2}, true);
    auto f = [](const Tensor& t) { return sum_all(mul(t, t)); };
    REQUIRE_THROWS_AS(finite_difference_check(f, x, 0.0), std::invalid_argument);
}

TEST_CASE("gradient check across every op kind") {
    // 100 seeded trials spread over the op surface; dims <= 5, values in [-1, 1]
    Rng rng(12345);
    const double tol = 1e-2;
    const double eps = 3e-3;
    for (int trial = 0; trial < 100; ++trial) {
        const int m = 1 + rng.uniform_int(4);
        const int k = 1 + rng.uniform_int(4);
        const int n = 1 + rng.uniform_int(4);

        {  // matmul, both arguments
            Tensor a = rand_tensor(rng, m, k);
            Tensor b = rand_tensor(rng, k, n);
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(matmul(t, b), w);
                    }, a, m, n, rng, eps) < tol);
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(matmul(a, t), w);
                    }, b, m, n, rng, eps) < tol);
        }
        {  // add (same shape and row-bias forms), mul, tanh, scale
            Tensor a = rand_tensor(rng, m, n);
            Tensor b = rand_tensor(rng, m, n);
            Tensor bias = rand_tensor(rng, 1, n);
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(add(t, b), w);
                    }, a, m, n, rng, eps) < tol);
            if (m > 1)
                REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                            return weighted_sum(add(a, t), w);
                        }, bias, m, n, rng, eps) < tol);
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(mul(t, b), w);
                    }, a, m, n, rng, eps) < tol);
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(tanh(t), w);
                    }, a, m, n, rng, eps) < tol);
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(scale(t, 1.7f), w);
                    }, a, m, n, rng, eps) < tol);
        }
        {  // softmax rows
            Tensor a = rand_tensor(rng, m, n);
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(softmax_lastdim(t), w);
                    }, a, m, n, rng, eps) < tol);
        }
        {  // layernorm: x, gamma, beta. Width 2 is excluded (normalizing two
           // values collapses to a sign function whose true x-gradient is
           // eps-order), and rows with near-zero variance sit next to the
           // rsqrt(var + eps) singularity; both break central differences.
            const int d = 3 + rng.uniform_int(3);
            Tensor x = rand_tensor(rng, m, d);
            for (int i = 0; i < m; ++i) {
                auto row_var = [&]() {
                    double mean = 0.0, var = 0.0;
                    for (int j = 0; j < d; ++j) mean += x.at(i, j);
                    mean /= d;
                    for (int j = 0; j < d; ++j) var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
                    return var / d;
                };
                while (row_var() < 0.05)
                    for (int j = 0; j < d; ++j)
                        x.data()[static_cast<size_t>(i) * d + j] =
                            static_cast<float>(rng.uniform(-1.0, 1.0));
            }
            Tensor g = rand_tensor(rng, 1, d);
            Tensor b = rand_tensor(rng, 1, d);
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(layernorm(t, g, b), w);
                    }, x, m, d, rng, eps) < tol);
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(layernorm(x, t, b), w);
                    }, g, m, d, rng, eps) < tol);
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(layernorm(x, g, t), w);
                    }, b, m, d, rng, eps) < tol);
        }
        {  // embedding lookup with repeated ids
            Tensor table = rand_tensor(rng, 4, n);
            std::vector<int> ids = {0, 2, 2, 3};
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(embedding_lookup(t, ids), w);
                    }, table, 4, n, rng, eps) < tol);
        }
        {  // slice / concat / transpose
            Tensor a = rand_tensor(rng, 3, 4);
            Tensor b = rand_tensor(rng, 2, 4);
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(slice(t, 1, 3, 1, 3), w);
                    }, a, 2, 2, rng, eps) < tol);
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(concat_axis({t, b}, 0), w);
                    }, a, 5, 4, rng, eps) < tol);
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(transpose(t), w);
                    }, a, 4, 3, rng, eps) < tol);
        }
        {  // cross entropy from logits
            Tensor logits = rand_tensor(rng, m, 2 + rng.uniform_int(3));
            std::vector<int> targets(static_cast<size_t>(m));
            for (auto& t : targets) t = rng.uniform_int(logits.cols());
            REQUIRE(fd_probe([&](const Tensor& t, const Tensor& w) {
                        return weighted_sum(cross_entropy_logits(t, targets), w);
                    }, logits, 1, m, rng, eps) < tol);
        }
    }
}

TEST_CASE("softmax rows sum to one and stay positive") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const int m = 1 + rng.uniform_int(5), n = 1 + rng.uniform_int(5);
        Tensor x = rand_tensor(rng, m, n, false);
        Tensor y = softmax_lastdim(x);
        for (int i = 0; i < m; ++i) {
            double sum = 0.0;
            for (int j = 0; j < n; ++j) {
                REQUIRE(y.at(i, j) > 0.0f);
                sum += y.at(i, j);
            }
            REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
        }
    }
}

TEST_CASE("a tensor used twice accumulates both path gradients") {
    Rng rng(11);
    Tensor x = rand_tensor(rng, 2, 3);
    Tensor a = rand_tensor(rng, 2, 3, false);
    Tensor b = rand_tensor(rng, 2, 3, false);

    // two-path graph: sum(x*a) + sum(x*b)
    Tensor loss = add(sum_all(mul(x, a)), sum_all(mul(x, b)));
    backward(loss);
    const std::vector<float> both = x.grad();

    // single-use rewrite: sum(x*(a+b))
    Tensor x2 = x.detached(true);
    Tensor loss2 = sum_all(mul(x2, add(a, b)));
    backward(loss2);
    for (size_t i = 0; i < both.size(); ++i)
        REQUIRE(both[i] == Catch::Approx(x2.grad()[i]).margin(1e-5));
}

TEST_CASE("backward contract errors") {
    Tensor x = Tensor::from_data({1, 2}, {1, 2}, true);
    Tensor y = mul(x, x);
    REQUIRE_THROWS_AS(backward(y), ShapeError);  // non-scalar

    Tensor loss = sum_all(mul(x, x));
    backward(loss);
    REQUIRE_THROWS_AS(backward(loss), std::logic_error);  // second sweep
}

TEST_CASE("shape mismatches are rejected") {
    const Tensor a = Tensor::zeros({2, 3});
    const Tensor b = Tensor::zeros({2, 2});
    REQUIRE_THROWS_AS(matmul(a, b), ShapeError);
    REQUIRE_THROWS_AS(add(a, b), ShapeError);
    REQUIRE_THROWS_AS(mul(a, b), ShapeError);
    REQUIRE_THROWS_AS(slice(a, 0, 3, 0, 2), ShapeError);
    REQUIRE_THROWS_AS(concat_axis({a, b}, 0), ShapeError);
    REQUIRE_THROWS_AS(embedding_lookup(a, {5}), ShapeError);
    REQUIRE_THROWS_AS(cross_entropy_logits(a, {0}), ShapeError);
}

TEST_CASE("non-finite forward values are an error") {
    const Tensor big = Tensor::full({1, 2}, 3e38f);
    REQUIRE_THROWS_AS(add(big, big), NumericError);
    REQUIRE_THROWS_AS(scale(big, 1e10f), NumericError);
}

TEST_CASE("scalar reductions carry an f64 readout") {
    const Tensor x = Tensor::from_data({1, 3}, {1e-4f, 1.0f, -1.0f});
    const Tensor s = sum_all(x);
    REQUIRE(s.item_f64() == Catch::Approx(1e-4).epsilon(1e-6));
}
