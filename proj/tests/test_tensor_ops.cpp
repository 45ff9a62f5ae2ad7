#include <doctest.h>

#include <cmath>

#include "oar/ops.hpp"

using namespace oar;

namespace {

Tensor filled(std::vector<int> shape, std::vector<float> vals) {
    return Tensor(std::move(shape), std::move(vals));
}

}  // namespace

TEST_CASE("tensor rejects data/shape mismatch") {
    CHECK_THROWS_AS(Tensor({2, 2}, {1.f, 2.f, 3.f}), ShapeError);
}

TEST_CASE("conv2d identity 1x1 kernel") {
    Tensor x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor k({1, 1, 1, 1}, {1.f});
    Tensor y = conv2d(x, k, {0.f}, 1, 0);
    CHECK((y.shape == std::vector<int>{1, 3, 3}));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.data[i] == x.data[i]);
}

TEST_CASE("conv2d 3x3 ones over constant input sums to 9") {
    Tensor x({1, 3, 3});
    x.fill(1.f);
    Tensor k({1, 1, 3, 3});
    k.fill(1.f);
    Tensor y = conv2d(x, k, {0.f}, 1, 0);
    CHECK((y.shape == std::vector<int>{1, 1, 1}));
    CHECK(y.data[0] == doctest::Approx(9.0));
}

TEST_CASE("conv2d shape formula: 8x8 k3 s2 p1 -> 4x4") {
    Tensor x({1, 8, 8});
    Tensor k({2, 1, 3, 3});
    Tensor y = conv2d(x, k, {}, 2, 1);
    CHECK((y.shape == std::vector<int>{2, 4, 4}));
}

TEST_CASE("conv2d channel mismatch names both shapes") {
    Tensor x({3, 4, 4});
    Tensor k({2, 4, 3, 3});
    try {
        conv2d(x, k, {}, 1, 1);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[3,4,4]") != std::string::npos);
        CHECK(msg.find("[2,4,3,3]") != std::string::npos);
    }
}

TEST_CASE("conv2d/pool2d shape contracts over a grid sweep") {
    for (int h = 1; h <= 16; h += 3) {
        for (int w = 1; w <= 16; w += 3) {
            for (int k = 1; k <= 5; k += 2) {
                for (int stride = 1; stride <= 3; ++stride) {
                    for (int pad = 0; pad <= 2; ++pad) {
                        const int oh = conv_out_dim(h, k, stride, pad);
                        const int ow = conv_out_dim(w, k, stride, pad);
                        Tensor x({1, h, w});
                        Tensor kr({1, 1, k, k});
                        if (oh < 1 || ow < 1) {
                            CHECK_THROWS_AS(conv2d(x, kr, {}, stride, pad), ShapeError);
                            continue;
                        }
                        Tensor y = conv2d(x, kr, {}, stride, pad);
                        CHECK((y.shape == std::vector<int>{1, oh, ow}));
                        if (k <= h && k <= w) {
                            Tensor p = pool2d(PoolKind::Max, x, k, stride, false);
                            CHECK((p.shape == std::vector<int>{1, (h - k) / stride + 1, (w - k) / stride + 1}));
                        }
                    }
                }
            }
        }
    }
}

TEST_CASE("affine zero weights returns bias") {
    Tensor x({3}, {5.f, -1.f, 2.f});
    Tensor w({2, 3});
    Tensor y = affine(x, w, {0.5f, -0.5f});
    CHECK(y.data[0] == doctest::Approx(0.5));
    CHECK(y.data[1] == doctest::Approx(-0.5));
}

TEST_CASE("affine identity weights return input") {
    Tensor x({3}, {5.f, -1.f, 2.f});
    Tensor w({3, 3});
    for (int i = 0; i < 3; ++i) w.data[static_cast<std::size_t>(i) * 3 + i] = 1.f;
    Tensor y = affine(x, w, {});
    for (int i = 0; i < 3; ++i) CHECK(y.data[static_cast<std::size_t>(i)] == x.data[static_cast<std::size_t>(i)]);
}

TEST_CASE("affine random case matches double-precision dot product oracle") {
    Rng rng(7);
    Tensor x({4});
    for (auto& v : x.data) v = static_cast<float>(rng.uniform(-1, 1));
    Tensor w({3, 4});
    for (auto& v : w.data) v = static_cast<float>(rng.uniform(-1, 1));
    std::vector<float> b = {0.1f, -0.2f, 0.3f};
    Tensor y = affine(x, w, b);
    for (int i = 0; i < 3; ++i) {
        double acc = static_cast<double>(b[static_cast<std::size_t>(i)]);
        for (int j = 0; j < 4; ++j) {
            acc += static_cast<double>(w.data[static_cast<std::size_t>(i) * 4 + j]) *
                   static_cast<double>(x.data[static_cast<std::size_t>(j)]);
        }
        CHECK(std::abs(static_cast<double>(y.data[static_cast<std::size_t>(i)]) - acc) < 1e-6);
    }
}

TEST_CASE("affine dimension mismatch rejected") {
    Tensor x({5});
    Tensor w({2, 4});
    CHECK_THROWS_AS(affine(x, w, {}), ShapeError);
}

TEST_CASE("activations") {
    Tensor x({1}, {0.f});
    CHECK(apply_activation(Activation::Sigmoid, x).data[0] == doctest::Approx(0.5));

    Tensor r({4}, {-2.f, -0.5f, 0.f, 3.f});
    Tensor rr = apply_activation(Activation::Relu, r);
    CHECK(rr.data[0] == 0.f);
    CHECK(rr.data[1] == 0.f);
    CHECK(rr.data[2] == 0.f);
    CHECK(rr.data[3] == 3.f);

    Tensor c({5});
    c.fill(2.5f);
    Tensor sm = apply_activation(Activation::Softmax, c);
    for (float v : sm.data) CHECK(v == doctest::Approx(0.2));

    Tensor two({2}, {0.f, std::log(3.f)});
    Tensor sm2 = apply_activation(Activation::Softmax, two);
    CHECK(std::abs(sm2.data[0] - 0.25) < 1e-7);
    CHECK(std::abs(sm2.data[1] - 0.75) < 1e-7);

    CHECK_THROWS_AS(apply_activation(Activation::Softmax, Tensor({0})), ShapeError);
}

TEST_CASE("softmax always yields a valid ProbDist") {
    Rng rng(123);
    for (int rep = 0; rep < 50; ++rep) {
        const int n = 2 + static_cast<int>(rng.next_below(10));
        Tensor x({n});
        for (auto& v : x.data) v = static_cast<float>(rng.uniform(-30, 30));
        Tensor p = apply_activation(Activation::Softmax, x);
        ProbDist d(std::vector<double>(p.data.begin(), p.data.end()));
        CHECK(d.size() == static_cast<std::size_t>(n));
    }
}

TEST_CASE("pool2d basics") {
    Tensor c({1, 4, 4});
    c.fill(3.25f);
    Tensor mx = pool2d(PoolKind::Max, c, 2, 2, false);
    for (float v : mx.data) CHECK(v == 3.25f);

    Tensor x({1, 2, 2}, {1, 3, 5, 7});
    Tensor mean = pool2d(PoolKind::Mean, x, 2, 2, false);
    CHECK((mean.shape == std::vector<int>{1, 1, 1}));
    CHECK(mean.data[0] == doctest::Approx(4.0));

    Tensor big({1, 5, 5});
    Tensor same = pool2d(PoolKind::Mean, big, 3, 1, true);
    CHECK((same.shape == std::vector<int>{1, 5, 5}));

    CHECK_THROWS_AS(pool2d(PoolKind::Max, x, 5, 1, false), ShapeError);
}

TEST_CASE("same-padded pooling keeps constants constant at borders") {
    Tensor c({1, 5, 5});
    c.fill(0.7f);
    Tensor mean = pool2d(PoolKind::Mean, c, 3, 1, true);
    Tensor mx = pool2d(PoolKind::Max, c, 3, 1, true);
    for (std::size_t i = 0; i < mean.size(); ++i) {
        CHECK(mean.data[i] == doctest::Approx(0.7f));
        CHECK(mx.data[i] == doctest::Approx(0.7f));
    }
}

TEST_CASE("forward passes are deterministic") {
    Rng rng(9);
    Tensor x({3, 6, 6});
    for (auto& v : x.data) v = static_cast<float>(rng.uniform(-1, 1));
    Tensor k({4, 3, 3, 3});
    for (auto& v : k.data) v = static_cast<float>(rng.uniform(-1, 1));
    Tensor a = conv2d(x, k, {}, 2, 1);
    Tensor b = conv2d(x, k, {}, 2, 1);
    CHECK(a.data == b.data);
}
