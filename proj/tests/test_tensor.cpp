// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "minivlm/gradcheck.hpp"
#include "minivlm/rng.hpp"
#include "minivlm/tensor.hpp"

using namespace minivlm;

namespace {

template <class Real>
Tensor<Real> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<Real> t = Tensor<Real>::zeros(std::move(shape));
    for (auto& v : t.data) v = static_cast<Real>(rng.uniform(lo, hi));
    return t;
}

}  // namespace

TEST_CASE("matmul identity and hand-evaluated cases") {
    auto I = Tensor<double>::identity(2);
    Tensor<double> b({2, 2}, {3, 4, 5, 6});
    auto c = matmul(I, b);
    REQUIRE(c.data == std::vector<double>{3, 4, 5, 6});

    Tensor<double> a({1, 2}, {1, 2});
    Tensor<double> col({2, 1}, {3, 4});
    auto d = matmul(a, col);
    REQUIRE(d.shape == Shape{1, 1});
    REQUIRE(d.data[0] == 11.0);  // 1*3 + 2*4
}

TEST_CASE("matmul rejects mismatched inner extents") {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({4, 2});
    REQUIRE_THROWS_AS(matmul(a, b), ShapeMismatch);
}

TEST_CASE("conv2x2_s2 averaging kernel and window sums") {
    auto x = Tensor<double>::full({1, 2, 2}, 1.0);
    auto w = Tensor<double>::full({1, 1, 2, 2}, 0.25);
    auto b = Tensor<double>::zeros({1});
    auto y = conv2x2_s2(x, w, b);
    REQUIRE(y.shape == Shape{1, 1, 1});
    REQUIRE(y.data[0] == Catch::Approx(1.0));

    std::vector<double> vals(16);
    for (int i = 0; i < 16; ++i) vals[i] = i + 1;
    Tensor<double> x2({1, 4, 4}, vals);
    auto w2 = Tensor<double>::full({1, 1, 2, 2}, 1.0);
    auto y2 = conv2x2_s2(x2, w2, b);
    REQUIRE(y2.shape == Shape{1, 2, 2});
    // direct window sums: 1+2+5+6, 3+4+7+8, 9+10+13+14, 11+12+15+16
    REQUIRE(y2.data == std::vector<double>{14, 22, 46, 54});
}

TEST_CASE("conv2x2_s2 rejects odd grids") {
    auto x = Tensor<double>::zeros({1, 3, 4});
    auto w = Tensor<double>::zeros({1, 1, 2, 2});
    auto b = Tensor<double>::zeros({1});
    REQUIRE_THROWS_AS(conv2x2_s2(x, w, b), OddGrid);
}

TEST_CASE("conv2x2_s2 output extents are exactly halved") {
    Rng rng(7);
    for (int it = 0; it < 10; ++it) {
        std::size_t c = 1 + rng.below(3), h = 2 * (1 + rng.below(5)), w = 2 * (1 + rng.below(5));
        std::size_t co = 1 + rng.below(3);
        auto x = random_tensor<double>({c, h, w}, rng);
        auto k = random_tensor<double>({co, c, 2, 2}, rng);
        auto b = random_tensor<double>({co}, rng);
        auto y = conv2x2_s2(x, k, b);
        REQUIRE(y.shape == Shape{co, h / 2, w / 2});
        REQUIRE(y.numel() * 4 == co * h * w);
    }
}

TEST_CASE("swiglu zero input, scalar evaluation, closed gate") {
    auto z = Tensor<double>::zeros({1, 1});
    auto one = Tensor<double>::full({1, 1}, 1.0);
    auto y0 = swiglu(z, one, one, one);
    REQUIRE(y0.data[0] == 0.0);

    auto x = Tensor<double>::full({1, 1}, 1.0);
    auto y1 = swiglu(x, one, one, one);
    // swish(1) * 1 = sigmoid(1) = 0.7310586
    REQUIRE(y1.data[0] == Catch::Approx(0.7310586).epsilon(1e-6));

    auto zero_w = Tensor<double>::zeros({1, 1});
    auto y2 = swiglu(x, zero_w, one, one);
    REQUIRE(y2.data[0] == 0.0);
}

TEST_CASE("softmax symmetry, closed-form ratio, overflow stability") {
    Tensor<double> a({2}, {0, 0});
    auto sa = softmax(a, 0);
    REQUIRE(sa.data[0] == Catch::Approx(0.5));
    REQUIRE(sa.data[1] == Catch::Approx(0.5));

    Tensor<double> b({2}, {std::log(2.0), 0});
    auto sb = softmax(b, 0);
    REQUIRE(sb.data[0] == Catch::Approx(2.0 / 3.0));
    REQUIRE(sb.data[1] == Catch::Approx(1.0 / 3.0));

    Tensor<double> c({2}, {1000, 0});
    auto sc = softmax(c, 0);
    REQUIRE(std::isfinite(sc.data[0]));
    REQUIRE(sc.data[0] == Catch::Approx(1.0));
    REQUIRE(sc.data[1] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("softmax rejects non-finite input") {
    Tensor<double> a({2}, {std::nan(""), 0});
    REQUIRE_THROWS_AS(softmax(a, 0), NonFiniteInput);
}

TEST_CASE("softmax rows are non-negative and sum to one for large magnitudes") {
    Rng rng(11);
    for (int it = 0; it < 20; ++it) {
        auto x = random_tensor<double>({4, 7}, rng, -1e4, 1e4);
        auto s = softmax(x, 1);
        for (std::size_t i = 0; i < 4; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < 7; ++j) {
                REQUIRE(s.at(i, j) >= 0.0);
                sum += s.at(i, j);
            }
            REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
        }
    }
}

TEST_CASE("softmax along axis 0 matches axis-1 of the transpose") {
    Rng rng(12);
    auto x = random_tensor<double>({3, 5}, rng);
    auto s0 = softmax(x, 0);
    auto st = transpose2(softmax(transpose2(x), 1));
    for (std::size_t i = 0; i < x.numel(); ++i)
        REQUIRE(s0.data[i] == Catch::Approx(st.data[i]).margin(1e-12));
}

TEST_CASE("backward: linear, quadratic, and unused leaves") {
    Tape<double> tape;
    Tensor<double> x0({3}, {1, 2, 3});
    auto x = tape.watch(x0);
    auto loss = sum_all(x);
    tape.backward(loss);
    REQUIRE(tape.grad(x) == std::vector<double>{1, 1, 1});

    Tape<double> t2;
    auto x2 = t2.watch(x0);
    auto unused = t2.watch(Tensor<double>::full({2}, 5.0));
    auto loss2 = sum_all(mul(x2, x2));
    t2.backward(loss2);
    REQUIRE(t2.grad(x2) == std::vector<double>{2, 4, 6});  // d(x^2)/dx = 2x
    REQUIRE(t2.grad(unused) == std::vector<double>{0, 0});
}

TEST_CASE("backward requires a scalar loss") {
    Tape<double> tape;
    auto x = tape.watch(Tensor<double>::full({2}, 1.0));
    auto y = mul(x, x);
    REQUIRE_THROWS_AS(tape.backward(y), NotScalarLoss);
}

TEST_CASE("backward is bit-deterministic across runs") {
    Rng rng(21);
    auto a0 = random_tensor<double>({4, 3}, rng);
    auto b0 = random_tensor<double>({3, 5}, rng);
    auto run = [&](std::vector<double>& ga, std::vector<double>& gb) {
        Tape<double> tape;
        auto a = tape.watch(a0);
        auto b = tape.watch(b0);
        auto loss = sum_all(swish(matmul(a, b)));
        tape.backward(loss);
        ga = tape.grad(a);
        gb = tape.grad(b);
    };
    std::vector<double> ga1, gb1, ga2, gb2;
    run(ga1, gb1);
    run(ga2, gb2);
    REQUIRE(std::memcmp(ga1.data(), ga2.data(), ga1.size() * sizeof(double)) == 0);
    REQUIRE(std::memcmp(gb1.data(), gb2.data(), gb1.size() * sizeof(double)) == 0);
}

TEST_CASE("grad_check: every primitive beats 1e-4") {
    Rng rng(33);
    const double tol = 1e-4;

    SECTION("matmul") {
        auto a = random_tensor<double>({3, 4}, rng);
        auto b = random_tensor<double>({4, 2}, rng);
        auto err = grad_check<double>(
            [](Tape<double>&, const std::vector<Tensor<double>>& in) {
                return sum_all(matmul(in[0], in[1]));
            },
            {a, b});
        REQUIRE(err < tol);
    }
    SECTION("conv2x2_s2") {
        auto x = random_tensor<double>({2, 4, 6}, rng);
        auto w = random_tensor<double>({3, 2, 2, 2}, rng);
        auto b = random_tensor<double>({3}, rng);
        auto err = grad_check<double>(
            [](Tape<double>&, const std::vector<Tensor<double>>& in) {
                return sum_all(swish(conv2x2_s2(in[0], in[1], in[2])));
            },
            {x, w, b});
        REQUIRE(err < tol);
    }
    SECTION("swiglu") {
        auto x = random_tensor<double>({3, 4}, rng);
        auto w = random_tensor<double>({4, 5}, rng);
        auto v = random_tensor<double>({4, 5}, rng);
        auto w2 = random_tensor<double>({5, 2}, rng);
        auto err = grad_check<double>(
            [](Tape<double>&, const std::vector<Tensor<double>>& in) {
                return sum_all(swiglu(in[0], in[1], in[2], in[3]));
            },
            {x, w, v, w2});
        REQUIRE(err < tol);
    }
    SECTION("softmax") {
        auto x = random_tensor<double>({3, 5}, rng);
        auto err = grad_check<double>(
            [](Tape<double>&, const std::vector<Tensor<double>>& in) {
                auto s = softmax(in[0], 1);
                return sum_all(mul(s, s));  // non-linear readout so the gradient is informative
            },
            {x});
        REQUIRE(err < tol);
    }
    SECTION("causal_softmax") {
        auto x = random_tensor<double>({4, 4}, rng);
        auto err = grad_check<double>(
            [](Tape<double>&, const std::vector<Tensor<double>>& in) {
                auto s = causal_softmax(in[0]);
                return sum_all(mul(s, s));
            },
            {x});
        REQUIRE(err < tol);
    }
    SECTION("layer_norm_rows") {
        auto x = random_tensor<double>({3, 6}, rng);
        auto g = random_tensor<double>({6}, rng, 0.5, 1.5);
        auto err = grad_check<double>(
            [](Tape<double>&, const std::vector<Tensor<double>>& in) {
                return sum_all(swish(layer_norm_rows(in[0], in[1])));
            },
            {x, g});
        REQUIRE(err < tol);
    }
    SECTION("rms_norm_rows") {
        auto x = random_tensor<double>({3, 6}, rng);
        auto g = random_tensor<double>({6}, rng, 0.5, 1.5);
        auto err = grad_check<double>(
            [](Tape<double>&, const std::vector<Tensor<double>>& in) {
                return sum_all(swish(rms_norm_rows(in[0], in[1])));
            },
            {x, g});
        REQUIRE(err < tol);
    }
    SECTION("routed_linear") {
        auto x = random_tensor<double>({5, 3}, rng);
        auto wm = random_tensor<double>({3, 4}, rng);
        auto wa = random_tensor<double>({3, 4}, rng);
        std::vector<bool> route = {false, true, true, false, true};
        auto err = grad_check<double>(
            [route](Tape<double>&, const std::vector<Tensor<double>>& in) {
                return sum_all(swish(routed_linear(in[0], route, in[1], in[2])));
            },
            {x, wm, wa});
        REQUIRE(err < tol);
    }
    SECTION("embed, bias, gelu, transpose, slices, concat") {
        auto table = random_tensor<double>({7, 4}, rng);
        auto bias = random_tensor<double>({4}, rng);
        std::vector<int> ids = {3, 0, 6, 3};
        auto err = grad_check<double>(
            [ids](Tape<double>&, const std::vector<Tensor<double>>& in) {
                auto e = add_bias(embed_rows(in[0], ids), in[1]);
                auto g = gelu(transpose2(e));
                auto s = slice_cols(transpose2(g), 1, 2);
                return sum_all(mul(concat_cols<double>({s, s}), concat_cols<double>({s, s})));
            },
            {table, bias});
        REQUIRE(err < tol);
    }
    SECTION("masked cross entropy") {
        auto logits = random_tensor<double>({4, 6}, rng);
        std::vector<int> targets = {1, 2, 0, 5};
        std::vector<bool> mask = {false, true, true, false};
        auto err = grad_check<double>(
            [targets, mask](Tape<double>&, const std::vector<Tensor<double>>& in) {
                return masked_cross_entropy(in[0], targets, mask);
            },
            {logits});
        REQUIRE(err < tol);
    }
    SECTION("constant function has zero error") {
        auto x = random_tensor<double>({3}, rng);
        auto err = grad_check<double>(
            [](Tape<double>&, const std::vector<Tensor<double>>&) {
                return Tensor<double>::scalar(2.5);
            },
            {x});
        REQUIRE(err == 0.0);
    }
}

TEST_CASE("causal_softmax rows sum to one over the prefix") {
    Rng rng(44);
    auto x = random_tensor<double>({6, 6}, rng, -3, 3);
    auto s = causal_softmax(x);
    for (std::size_t i = 0; i < 6; ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < 6; ++j) {
            if (j > i) REQUIRE(s.at(i, j) == 0.0);
            sum += s.at(i, j);
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("masked cross entropy of uniform logits is log V") {
    auto logits = Tensor<double>::zeros({3, 8});
    std::vector<int> targets = {1, 5, 7};
    std::vector<bool> mask = {true, true, true};
    auto loss = masked_cross_entropy(logits, targets, mask);
    REQUIRE(loss.data[0] == Catch::Approx(std::log(8.0)));

    std::vector<bool> none = {false, false, false};
    REQUIRE_THROWS_AS(masked_cross_entropy(logits, targets, none), EmptyTarget);
}

TEST_CASE("tensor invariants are enforced") {
    REQUIRE_THROWS_AS(Tensor<double>({2, 2}, {1, 2, 3}), ShapeMismatch);
    REQUIRE_THROWS_AS(Tensor<double>({0}, {}), ShapeMismatch);
}
