#include <doctest.h>

#include <cmath>
#include <cstring>

#include "difct/tensor.hpp"
#include "support.hpp"

using namespace difct;
using difct::testing::GradCheck;
using difct::testing::random_tensor;

TEST_CASE("conv2d box-sum identity on all-ones 3x3") {
    auto x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
    auto w = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
    auto b = Tensor<float>::zeros({1});
    auto y = conv2d(x, w, b, 1, 1);
    REQUIRE(y.shape() == std::vector<int64_t>{1, 1, 3, 3});
    CHECK(y.values()[4] == doctest::Approx(9.0f));   // center
    CHECK(y.values()[0] == doctest::Approx(4.0f));   // corner
    CHECK(y.values()[1] == doctest::Approx(6.0f));   // edge
}

TEST_CASE("conv2d 1x1 identity kernel") {
    auto x = random_tensor<float>({2, 1, 4, 5}, 3);
    auto w = Tensor<float>::full({1, 1, 1, 1}, 1.0f);
    auto b = Tensor<float>::zeros({1});
    auto y = conv2d(x, w, b, 1, 0);
    REQUIRE(y.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(y.values()[size_t(i)] == x.values()[size_t(i)]);
}

TEST_CASE("conv2d shape errors name the offending axis") {
    auto x = Tensor<float>::zeros({1, 3, 8, 8});
    auto w = Tensor<float>::zeros({4, 2, 3, 3});
    auto b = Tensor<float>::zeros({4});
    CHECK_THROWS_AS(conv2d(x, w, b, 1, 1), InvalidArgumentError);
    CHECK_THROWS_WITH_AS(conv2d(x, w, b, 1, 1),
                         doctest::Contains("channel axis 1"), InvalidArgumentError);
}

TEST_CASE("conv2d gradient vs finite differences (64-bit)") {
    auto x = random_tensor<double>({2, 3, 8, 8}, 11, true);
    auto w = random_tensor<double>({4, 3, 3, 3}, 12, true, -0.5, 0.5);
    auto b = random_tensor<double>({4}, 13, true, -0.1, 0.1);
    GradCheck gc;
    const double v = gc.run([&] { return sum(mul(conv2d(x, w, b, 1, 1), conv2d(x, w, b, 1, 1))); },
                            {x, w, b}, {"input", "weight", "bias"});
    INFO(gc.worst);
    CHECK(v < 1.0);
}

TEST_CASE("conv2d strided gradient") {
    auto x = random_tensor<double>({1, 2, 9, 9}, 21, true);
    auto w = random_tensor<double>({3, 2, 3, 3}, 22, true);
    auto b = random_tensor<double>({3}, 23, true);
    GradCheck gc;
    const double v =
        gc.run([&] { return sum(conv2d(x, w, b, 2, 1)); }, {x, w, b}, {"input", "weight", "bias"});
    INFO(gc.worst);
    CHECK(v < 1.0);
}

TEST_CASE("conv2d and linear are linear maps for zero bias") {
    auto x1 = random_tensor<float>({1, 2, 6, 6}, 31);
    auto x2 = random_tensor<float>({1, 2, 6, 6}, 32);
    auto w = random_tensor<float>({3, 2, 3, 3}, 33);
    auto b = Tensor<float>::zeros({3});
    const float a = 0.7f, c = -1.3f;
    std::vector<float> mixed(x1.values());
    for (size_t i = 0; i < mixed.size(); ++i) mixed[i] = a * mixed[i] + c * x2.values()[i];
    auto ym = conv2d(Tensor<float>::from_data(x1.shape(), mixed), w, b, 1, 1);
    auto y1 = conv2d(x1, w, b, 1, 1);
    auto y2 = conv2d(x2, w, b, 1, 1);
    for (int64_t i = 0; i < ym.numel(); ++i)
        CHECK(ym.values()[size_t(i)] ==
              doctest::Approx(a * y1.values()[size_t(i)] + c * y2.values()[size_t(i)])
                  .epsilon(1e-5));

    auto lw = random_tensor<float>({4, 5}, 34);
    auto lb = Tensor<float>::zeros({4});
    auto v1 = random_tensor<float>({7, 5}, 35);
    auto v2 = random_tensor<float>({7, 5}, 36);
    std::vector<float> vm(v1.values());
    for (size_t i = 0; i < vm.size(); ++i) vm[i] = a * vm[i] + c * v2.values()[i];
    auto lm = linear(Tensor<float>::from_data(v1.shape(), vm), lw, lb);
    auto l1 = linear(v1, lw, lb);
    auto l2 = linear(v2, lw, lb);
    for (int64_t i = 0; i < lm.numel(); ++i)
        CHECK(lm.values()[size_t(i)] ==
              doctest::Approx(a * l1.values()[size_t(i)] + c * l2.values()[size_t(i)])
                  .epsilon(1e-5));
}

TEST_CASE("linear identity and constant broadcast") {
    auto x = random_tensor<float>({3, 4}, 41);
    std::vector<float> eye(16, 0.0f);
    for (int i = 0; i < 4; ++i) eye[size_t(i * 4 + i)] = 1.0f;
    auto w = Tensor<float>::from_data({4, 4}, eye);
    auto b = Tensor<float>::zeros({4});
    auto y = linear(x, w, b);
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(y.values()[size_t(i)] == doctest::Approx(x.values()[size_t(i)]));

    auto wz = Tensor<float>::zeros({2, 4});
    auto bz = Tensor<float>::from_data({2}, {0.5f, -1.5f});
    auto yz = linear(x, wz, bz);
    for (int64_t r = 0; r < 3; ++r) {
        CHECK(yz.values()[size_t(r * 2 + 0)] == doctest::Approx(0.5f));
        CHECK(yz.values()[size_t(r * 2 + 1)] == doctest::Approx(-1.5f));
    }
}

TEST_CASE("linear gradient check 5x7") {
    auto x = random_tensor<double>({5, 7}, 51, true);
    auto w = random_tensor<double>({3, 7}, 52, true);
    auto b = random_tensor<double>({3}, 53, true);
    GradCheck gc;
    const double v = gc.run([&] { return sum(mul(linear(x, w, b), linear(x, w, b))); }, {x, w, b},
                            {"input", "weight", "bias"});
    INFO(gc.worst);
    CHECK(v < 1.0);
}

TEST_CASE("linear axis mismatch error") {
    auto x = Tensor<float>::zeros({5, 7});
    auto w = Tensor<float>::zeros({3, 6});
    auto b = Tensor<float>::zeros({3});
    CHECK_THROWS_AS(linear(x, w, b), InvalidArgumentError);
}

TEST_CASE("grid_sample exact at integer pixels, mean at midpoints, zero outside") {
    const int64_t C = 3, H = 4, W = 5;
    auto f = random_tensor<float>({1, C, H, W}, 61);
    auto at = [&](int64_t c, int64_t y, int64_t x) {
        return f.values()[size_t((c * H + y) * W + x)];
    };
    auto coords = Tensor<float>::from_data({1, 3, 2}, {2.0f, 1.0f,      // integer pixel (2,1)
                                                       2.5f, 1.0f,      // midpoint between x=2,3
                                                       -10.0f, -10.0f});
    auto out = grid_sample_bilinear(f, coords);
    REQUIRE(out.shape() == std::vector<int64_t>{1, 3, C});
    for (int64_t c = 0; c < C; ++c) {
        CHECK(out.values()[size_t(0 * C + c)] == at(c, 1, 2));  // exact, no tolerance
        CHECK(out.values()[size_t(1 * C + c)] ==
              doctest::Approx(0.5f * (at(c, 1, 2) + at(c, 1, 3))));
        CHECK(out.values()[size_t(2 * C + c)] == 0.0f);
    }
}

TEST_CASE("grid_sample rejects non-finite coordinates") {
    auto f = Tensor<float>::zeros({1, 1, 4, 4});
    auto coords = Tensor<float>::from_data({1, 1, 2}, {std::nanf(""), 1.0f});
    CHECK_THROWS_AS(grid_sample_bilinear(f, coords), InvalidArgumentError);
}

TEST_CASE("grid_sample feature gradient") {
    auto f = random_tensor<double>({2, 3, 6, 6}, 71, true);
    auto coords = random_tensor<double>({2, 5, 2}, 72, false, -0.5, 5.5);
    GradCheck gc;
    const double v = gc.run(
        [&] {
            auto s = grid_sample_bilinear(f, coords);
            return sum(mul(s, s));
        },
        {f}, {"features"});
    INFO(gc.worst);
    CHECK(v < 1.0);
}

TEST_CASE("backward: sum gives ones, sum of squares gives 2x") {
    auto x = Tensor<float>::from_data({4}, {1.0f, -2.0f, 3.0f, 0.5f}, true);
    backward(sum(x));
    REQUIRE(x.has_grad());
    for (float g : x.grad()) CHECK(g == 1.0f);

    auto y = Tensor<float>::from_data({4}, {1.0f, -2.0f, 3.0f, 0.5f}, true);
    backward(sum(mul(y, y)));
    for (size_t i = 0; i < 4; ++i)
        CHECK(y.grad()[i] == doctest::Approx(2.0f * y.values()[i]));
}

TEST_CASE("backward accumulates additively over reuse and calls") {
    auto x = Tensor<float>::from_data({2}, {1.0f, 2.0f}, true);
    backward(sum(add(x, x)));
    CHECK(x.grad()[0] == 2.0f);
    CHECK(x.grad()[1] == 2.0f);
    backward(sum(x));  // second independent graph accumulates
    CHECK(x.grad()[0] == 3.0f);
}

TEST_CASE("backward rejects non-scalar loss") {
    auto x = Tensor<float>::zeros({3}, true);
    CHECK_THROWS_AS(backward(relu(x)), InvalidArgumentError);
}

TEST_CASE("pooling, upsample, concat forward semantics") {
    auto x = Tensor<float>::from_data({1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    CHECK(max_pool2d(x).values()[0] == 4.0f);
    CHECK(avg_pool2d(x).values()[0] == doctest::Approx(2.5f));

    auto up = upsample2x_nearest(x);
    REQUIRE(up.shape() == std::vector<int64_t>{1, 1, 4, 4});
    CHECK(up.values()[0] == 1.0f);
    CHECK(up.values()[1] == 1.0f);
    CHECK(up.values()[5] == 1.0f);
    CHECK(up.values()[15] == 4.0f);

    auto y = Tensor<float>::full({1, 2, 2, 2}, 7.0f);
    auto cat = concat_channels(x, y);
    REQUIRE(cat.shape() == std::vector<int64_t>{1, 3, 2, 2});
    CHECK(cat.values()[0] == 1.0f);
    CHECK(cat.values()[4] == 7.0f);
}

TEST_CASE("pool/upsample/concat/reduce gradients") {
    auto x = random_tensor<double>({2, 3, 4, 4}, 81, true);
    GradCheck gc;
    SUBCASE("max_pool2d") {
        const double v = gc.run([&] { return sum(mul(max_pool2d(x), max_pool2d(x))); }, {x});
        INFO(gc.worst);
        CHECK(v < 1.0);
    }
    SUBCASE("avg_pool2d") {
        const double v = gc.run([&] { return sum(mul(avg_pool2d(x), avg_pool2d(x))); }, {x});
        CHECK(v < 1.0);
    }
    SUBCASE("upsample2x") {
        const double v =
            gc.run([&] { return sum(mul(upsample2x_nearest(x), upsample2x_nearest(x))); }, {x});
        CHECK(v < 1.0);
    }
    SUBCASE("concat") {
        auto y = random_tensor<double>({2, 2, 4, 4}, 82, true);
        const double v = gc.run(
            [&] {
                auto c = concat_channels(x, y);
                return sum(mul(c, c));
            },
            {x, y});
        CHECK(v < 1.0);
    }
    SUBCASE("relu") {
        const double v = gc.run([&] { return sum(mul(relu(x), relu(x))); }, {x});
        CHECK(v < 1.0);
    }
    SUBCASE("reduce_max axis 1") {
        const double v = gc.run(
            [&] {
                auto r = reduce_max(x, 1);
                return sum(mul(r, r));
            },
            {x});
        CHECK(v < 1.0);
    }
    SUBCASE("reduce_mean axis 0") {
        const double v = gc.run(
            [&] {
                auto r = reduce_mean(x, 0);
                return sum(mul(r, r));
            },
            {x});
        CHECK(v < 1.0);
    }
    SUBCASE("permute+reshape") {
        const double v = gc.run(
            [&] {
                auto p = reshape(permute(x, {2, 0, 3, 1}), {8, 12});
                return sum(mul(p, p));
            },
            {x});
        CHECK(v < 1.0);
    }
    SUBCASE("mse") {
        auto t = random_tensor<double>({2, 3, 4, 4}, 83);
        const double v = gc.run([&] { return mse_loss(x, t); }, {x});
        CHECK(v < 1.0);
    }
}

TEST_CASE("reductions and permute forward semantics") {
    auto x = Tensor<float>::from_data({2, 3}, {1, 5, 2, 4, 0, 3});
    auto mx = reduce_max(x, 0);
    REQUIRE(mx.shape() == std::vector<int64_t>{3});
    CHECK(mx.values() == std::vector<float>{4, 5, 3});
    auto mn = reduce_mean(x, 1);
    CHECK(mn.values()[0] == doctest::Approx(8.0f / 3));
    CHECK(mn.values()[1] == doctest::Approx(7.0f / 3));

    auto p = permute(x, {1, 0});
    REQUIRE(p.shape() == std::vector<int64_t>{3, 2});
    CHECK(p.values() == std::vector<float>{1, 4, 5, 0, 2, 3});
}

TEST_CASE("mse_loss value and zero on identical inputs") {
    auto a = Tensor<float>::from_data({2}, {1.0f, 3.0f});
    auto b = Tensor<float>::from_data({2}, {0.0f, 1.0f});
    CHECK(mse_loss(a, b).item() == doctest::Approx(2.5f));
    CHECK(mse_loss(a, a).item() == 0.0f);
}

TEST_CASE("sgd momentum: v <- m*v + g; theta <- theta - lr*v") {
    auto p = Tensor<float>::from_data({1}, {1.0f}, true);
    SgdMomentum<float> opt(0.9f);
    std::vector<Tensor<float>> params{p};

    backward(scale(sum(p), 3.0f));  // g = 3
    sgd_step(std::span<Tensor<float>>(params), opt, 0.1f);
    CHECK(p.values()[0] == doctest::Approx(1.0f - 0.1f * 3.0f));

    p.zero_grad();
    backward(scale(sum(p), 2.0f));  // g = 2, v = 0.9*3 + 2 = 4.7
    sgd_step(std::span<Tensor<float>>(params), opt, 0.1f);
    CHECK(p.values()[0] == doctest::Approx(0.7f - 0.1f * 4.7f));
}

TEST_CASE("single-threaded forward is bit-identical across runs") {
    const int prev = max_threads();
    set_max_threads(1);
    auto x = random_tensor<float>({2, 3, 16, 16}, 91);
    auto w = random_tensor<float>({5, 3, 3, 3}, 92);
    auto b = random_tensor<float>({5}, 93);
    auto y1 = conv2d(x, w, b, 1, 1);
    auto y2 = conv2d(x, w, b, 1, 1);
    CHECK(std::memcmp(y1.data(), y2.data(), size_t(y1.numel()) * sizeof(float)) == 0);
    set_max_threads(prev);
}

TEST_CASE("no-grad mode records no graph") {
    auto x = Tensor<float>::from_data({2}, {1.0f, 2.0f}, true);
    NoGradGuard ng;
    auto y = sum(x);
    CHECK_FALSE(y.requires_grad());
}
