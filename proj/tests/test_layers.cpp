#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "unet3p/layers.hpp"
#include "unet3p/tensor.hpp"

using namespace unet3p;

namespace {
struct GuardOn {
    GuardOn() { set_finite_check(true); }
} g_guard_on;

TensorPtr rand4(std::vector<std::int64_t> shape, std::uint64_t seed, double lo = -1.0,
                double hi = 1.0) {
    return Tensor::uniform(std::move(shape), seed, lo, hi);
}
}  // namespace

TEST_CASE("conv2d: 3x3 ones kernel sums a 3x3 ones input") {
    auto x = Tensor::full({1, 1, 3, 3}, 1.0);
    auto w = Tensor::full({1, 1, 3, 3}, 1.0);
    auto y = conv2d_op(x, w, nullptr, 1, 0);
    REQUIRE(y->shape == std::vector<std::int64_t>{1, 1, 1, 1});
    CHECK(y->value() == 9.0);
}

TEST_CASE("conv2d: identity 1x1 kernel reproduces the input") {
    auto x = rand4({2, 1, 4, 4}, 3);
    auto w = Tensor::full({1, 1, 1, 1}, 1.0);
    auto y = conv2d_op(x, w, nullptr, 1, 0);
    CHECK(y->data == x->data);
}

TEST_CASE("conv2d: geometry and channel errors") {
    auto x = rand4({1, 2, 4, 4}, 4);
    auto w3 = Tensor::zeros({1, 3, 3, 3});
    CHECK_THROWS_AS(conv2d_op(x, w3, nullptr, 1, 1), ShapeError);
    auto w5 = Tensor::zeros({1, 2, 5, 5});
    CHECK_THROWS_AS(conv2d_op(x, w5, nullptr, 1, 0), GeometryError);
}

TEST_CASE("conv2d: same padding preserves dims for odd kernels") {
    for (std::int64_t k : {1, 3, 5}) {
        auto x = rand4({1, 1, 8, 8}, 5 + static_cast<std::uint64_t>(k));
        auto w = Tensor::zeros({2, 1, k, k});
        auto y = conv2d_op(x, w, nullptr, 1, Conv2d::same_padding(k));
        CHECK(y->dim(2) == 8);
        CHECK(y->dim(3) == 8);
    }
}

TEST_CASE("conv2d gradcheck on random 2x3x8x8 with 4 filters") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto x = rand4({2, 3, 8, 8}, mix_seed(11, seed));
        auto w = rand4({4, 3, 3, 3}, mix_seed(12, seed), -0.5, 0.5);
        auto b = rand4({4}, mix_seed(13, seed), -0.5, 0.5);
        auto r = rand4({2, 4, 8, 8}, mix_seed(14, seed));
        auto f = [&](const TensorPtr& t) { return mean(mul(conv2d_op(t, w, b, 1, 1), r)); };
        CHECK(gradcheck(f, x, 1e-5) < 1e-4);
        auto fw = [&](const TensorPtr& t) { return mean(mul(conv2d_op(x, t, b, 1, 1), r)); };
        CHECK(gradcheck(fw, w, 1e-5) < 1e-4);
    }
}

TEST_CASE("conv layer parameter count matches the closed form") {
    Rng rng(1);
    for (int i = 0; i < 8; ++i) {
        const std::int64_t in = 1 + rng.uniform_int(6);
        const std::int64_t out = 1 + rng.uniform_int(6);
        const std::int64_t k = 2 * rng.uniform_int(3) + 1;
        const bool bias = rng.uniform() < 0.5;
        auto layer = Conv2d::make(in, out, k, 1, Conv2d::same_padding(k), bias, &rng);
        CHECK(layer.param_count() == out * in * k * k + (bias ? out : 0));
    }
}

TEST_CASE("maxpool: constants, max selection, composition") {
    auto c = Tensor::full({1, 2, 4, 4}, 3.25);
    auto pooled = maxpool(c, 2);
    REQUIRE(pooled->shape == std::vector<std::int64_t>{1, 2, 2, 2});
    for (double v : pooled->data) CHECK(v == 3.25);

    auto m = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(maxpool(m, 2)->value() == 4.0);

    CHECK_THROWS_AS(maxpool(Tensor::zeros({1, 1, 6, 6}), 4), GeometryError);

    // factor a*b equals two-stage pooling
    auto x = rand4({2, 3, 8, 8}, 21);
    auto one_shot = maxpool(x, 4);
    auto two_step = maxpool(maxpool(x, 2), 2);
    CHECK(one_shot->data == two_step->data);
}

TEST_CASE("maxpool backward: gradient to argmax, first tie in row-major order") {
    auto x = Tensor::from_data({1, 1, 2, 2}, {7, 7, 7, 7}, true);
    backward(sum(maxpool(x, 2)));
    CHECK(x->grad == std::vector<double>({1, 0, 0, 0}));
}

TEST_CASE("avgpool recovers constants and undoes constant upsampling") {
    auto c = Tensor::full({1, 1, 4, 4}, 0.7);
    auto pooled = avgpool(c, 2);
    for (double v : pooled->data) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));

    // bilinear upsample then average pool by the same factor is exact on constants
    for (std::int64_t f : {2, 4}) {
        auto base = Tensor::full({1, 2, 4, 4}, 1.375);
        auto round_trip = avgpool(bilinear_upsample(base, f), f);
        REQUIRE(round_trip->shape == base->shape);
        for (double v : round_trip->data) CHECK(v == 1.375);
    }
}

TEST_CASE("bilinear_upsample: constants, 1x1 clamp, half-pixel row") {
    auto c = Tensor::full({1, 1, 3, 3}, 2.5);
    auto cu = bilinear_upsample(c, 2);
    for (double v : cu->data) CHECK(v == 2.5);

    auto single = Tensor::full({1, 1, 1, 1}, 4.0);
    auto up = bilinear_upsample(single, 2);
    REQUIRE(up->shape == std::vector<std::int64_t>{1, 1, 2, 2});
    for (double v : up->data) CHECK(v == 4.0);

    // [[0,1],[0,1]] by 2: every row becomes [0, 0.25, 0.75, 1]
    auto x = Tensor::from_data({1, 1, 2, 2}, {0, 1, 0, 1});
    auto y = bilinear_upsample(x, 2);
    const std::vector<double> expect{0.0, 0.25, 0.75, 1.0};
    for (int row = 0; row < 4; ++row) {
        for (int col = 0; col < 4; ++col) {
            CHECK(y->data[static_cast<std::size_t>(row * 4 + col)] ==
                  doctest::Approx(expect[static_cast<std::size_t>(col)]).epsilon(1e-12));
        }
    }

    // factor 1 is the identity
    auto z = rand4({1, 2, 3, 3}, 31);
    CHECK(bilinear_upsample(z, 1)->data == z->data);
}

TEST_CASE("bilinear_upsample gradcheck (linear operator)") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto x = rand4({1, 2, 4, 4}, mix_seed(41, seed));
        auto r = rand4({1, 2, 8, 8}, mix_seed(42, seed));
        auto f = [&](const TensorPtr& t) { return sum(mul(bilinear_upsample(t, 2), r)); };
        CHECK(gradcheck(f, x, 1e-5) < 1e-4);
    }
}

TEST_CASE("concat_channels: order, widths, and gradient slicing") {
    auto a = rand4({1, 1, 2, 2}, 51);
    CHECK(concat_channels({a})->data == a->data);

    // five 64-channel maps concatenate to 320 channels
    std::vector<TensorPtr> parts;
    for (int i = 0; i < 5; ++i) parts.push_back(Tensor::zeros({1, 64, 2, 2}));
    CHECK(concat_channels(parts)->dim(1) == 320);

    auto x1 = Tensor::from_data({1, 1, 1, 2}, {1, 2}, true);
    auto x2 = Tensor::from_data({1, 2, 1, 2}, {3, 4, 5, 6}, true);
    auto r = Tensor::from_data({1, 3, 1, 2}, {10, 20, 30, 40, 50, 60});
    backward(sum(mul(concat_channels({x1, x2}), r)));
    CHECK(x1->grad == std::vector<double>({10, 20}));
    CHECK(x2->grad == std::vector<double>({30, 40, 50, 60}));

    auto wrong = Tensor::zeros({1, 1, 3, 2});
    CHECK_THROWS_AS(concat_channels({x1, wrong}), ShapeError);  // mis-scaled skip detector
}

TEST_CASE("activations: relu and sigmoid") {
    auto x = Tensor::from_data({3}, {-1, 0, 2});
    CHECK(relu(x)->data == std::vector<double>({0, 0, 2}));
    CHECK(activation(x, "relu")->data == std::vector<double>({0, 0, 2}));
    CHECK(sigmoid(Tensor::scalar(0.0))->value() == 0.5);
    // deep tails stay finite instead of overflowing through exp
    CHECK(sigmoid(Tensor::scalar(-800.0))->value() == 0.0);
    CHECK(sigmoid(Tensor::scalar(800.0))->value() == 1.0);
    CHECK(sigmoid(Tensor::scalar(-30.0))->value() > 0.0);
    CHECK_THROWS_AS(activation(x, "tanh"), ConfigError);

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto v = Tensor::uniform({4, 4}, mix_seed(61, seed), -3.0, 3.0);
        auto f = [](const TensorPtr& t) { return mean(mul(sigmoid(t), t)); };
        CHECK(gradcheck(f, v, 1e-5) < 1e-6);
    }
}

TEST_CASE("relu derivative at zero is zero") {
    auto x = Tensor::from_data({1}, {0.0}, true);
    backward(sum(relu(x)));
    CHECK(x->grad == std::vector<double>({0.0}));
}

TEST_CASE("dropout: rate 0 and eval are identity, masks reproducible by seed") {
    auto x = rand4({2, 3, 4, 4}, 71);
    CHECK(dropout(x, 0.0, Mode::train, 1)->data == x->data);
    CHECK(dropout(x, 0.9, Mode::eval, 1)->data == x->data);
    CHECK_THROWS_AS(dropout(x, 1.0, Mode::train, 1), ConfigError);

    auto a = dropout(x, 0.5, Mode::train, 7);
    auto b = dropout(x, 0.5, Mode::train, 7);
    CHECK(a->data == b->data);  // same mask on repeat call
    auto c = dropout(x, 0.5, Mode::train, 8);
    CHECK(a->data != c->data);

    // survivors are scaled by 1/(1-rate)
    int kept = 0;
    for (std::size_t i = 0; i < a->data.size(); ++i) {
        if (a->data[i] != 0.0) {
            ++kept;
            CHECK(a->data[i] == doctest::Approx(x->data[i] * 2.0).epsilon(1e-12));
        }
    }
    CHECK(kept > 0);
    CHECK(kept < static_cast<int>(a->data.size()));
}

TEST_CASE("batchnorm: train-mode statistics and affine shift") {
    auto x = rand4({2, 3, 4, 4}, 81, -2.0, 5.0);
    auto bn = BatchNorm2d::make(3);
    auto y = bn.forward(x, Mode::train);
    const std::int64_t HW = 16;
    for (std::int64_t c = 0; c < 3; ++c) {
        double m = 0.0;
        for (std::int64_t b = 0; b < 2; ++b) {
            for (std::int64_t i = 0; i < HW; ++i) {
                m += y->data[static_cast<std::size_t>((b * 3 + c) * HW + i)];
            }
        }
        m /= 32.0;
        CHECK(std::abs(m) < 1e-6);  // normalized mean ~ 0
    }

    auto bn3 = BatchNorm2d::make(3);
    bn3.shift->data = {3.0, 3.0, 3.0};
    auto y3 = bn3.forward(x, Mode::train);
    for (std::int64_t c = 0; c < 3; ++c) {
        double m = 0.0;
        for (std::int64_t b = 0; b < 2; ++b) {
            for (std::int64_t i = 0; i < HW; ++i) {
                m += y3->data[static_cast<std::size_t>((b * 3 + c) * HW + i)];
            }
        }
        m /= 32.0;
        CHECK(m == doctest::Approx(3.0).epsilon(1e-9));
    }
}

TEST_CASE("batchnorm: eval uses running statistics, degenerate batch rejected") {
    auto bn = BatchNorm2d::make(1);
    auto x = Tensor::from_data({1, 1, 2, 2}, {10, 12, 14, 16});
    bn.forward(x, Mode::train);
    CHECK(bn.running_mean->data[0] == doctest::Approx(0.1 * 13.0));  // momentum 0.1

    // eval output depends only on running stats, not batch stats
    auto other = Tensor::from_data({1, 1, 2, 2}, {100, 100, 100, 100});
    auto e1 = bn.forward(other, Mode::eval);
    auto e2 = bn.forward(other, Mode::eval);
    CHECK(e1->data == e2->data);

    auto tiny = Tensor::full({1, 1, 1, 1}, 2.0);
    CHECK_THROWS_AS(bn.forward(tiny, Mode::train), GeometryError);
    CHECK_NOTHROW(bn.forward(tiny, Mode::eval));
}

TEST_CASE("batchnorm gradcheck on random 2x3x4x4") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto x = rand4({2, 3, 4, 4}, mix_seed(91, seed));
        auto r = rand4({2, 3, 4, 4}, mix_seed(92, seed));
        auto f = [&](const TensorPtr& t) {
            auto bn = BatchNorm2d::make(3);
            return mean(mul(bn.forward(t, Mode::train), r));
        };
        CHECK(gradcheck(f, x, 1e-5) < 1e-4);
    }
}

TEST_CASE("global_maxpool shape and gradient routing") {
    auto x = Tensor::from_data({1, 2, 2, 2}, {1, 5, 2, 3, -1, -2, -3, -4}, true);
    auto y = global_maxpool(x);
    REQUIRE(y->shape == std::vector<std::int64_t>{1, 2});
    CHECK(y->data == std::vector<double>({5, -1}));
    backward(sum(y));
    CHECK(x->grad == std::vector<double>({0, 1, 0, 0, 1, 0, 0, 0}));
}

TEST_CASE("checkpoint round trip and mismatch detection") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "u3p_ckpt_test").string();
    fs::remove_all(dir);

    Rng rng(3);
    auto c1 = Conv2d::make(2, 3, 3, 1, 1, true, &rng);
    auto c2 = Conv2d::make(3, 1, 1, 1, 0, false, &rng);
    std::vector<NamedTensor> tensors{{"a.weight", c1.weight},
                                     {"a.bias", c1.bias},
                                     {"b.weight", c2.weight}};
    save_checkpoint(dir, tensors);

    // manifest format: name shape file
    {
        std::ifstream mf(dir + "/manifest.txt");
        std::string line;
        REQUIRE(std::getline(mf, line));
        CHECK(line == "a.weight 3x2x3x3 p0000.tns");
    }

    Rng rng2(99);
    auto d1 = Conv2d::make(2, 3, 3, 1, 1, true, &rng2);
    auto d2 = Conv2d::make(3, 1, 1, 1, 0, false, &rng2);
    std::vector<NamedTensor> loaded{{"a.weight", d1.weight},
                                    {"a.bias", d1.bias},
                                    {"b.weight", d2.weight}};
    load_checkpoint(dir, loaded);
    for (std::size_t i = 0; i < c1.weight->data.size(); ++i) {
        CHECK(d1.weight->data[i] ==
              static_cast<double>(static_cast<float>(c1.weight->data[i])));
    }

    // wrong name
    std::vector<NamedTensor> renamed{{"z.weight", d1.weight},
                                     {"a.bias", d1.bias},
                                     {"b.weight", d2.weight}};
    CHECK_THROWS_AS(load_checkpoint(dir, renamed), ContractError);

    // wrong shape
    auto wide = Conv2d::make(2, 4, 3, 1, 1, true, &rng2);
    std::vector<NamedTensor> reshaped{{"a.weight", wide.weight},
                                      {"a.bias", wide.bias},
                                      {"b.weight", d2.weight}};
    CHECK_THROWS_AS(load_checkpoint(dir, reshaped), ContractError);
    fs::remove_all(dir);
}

TEST_CASE("layer gradchecks on randomized small shapes (pool variants)") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(mix_seed(1000, seed));
        // values spaced >> fd step so max selections are stable
        std::vector<double> vals(static_cast<std::size_t>(1 * 2 * 4 * 4));
        for (std::size_t i = 0; i < vals.size(); ++i) {
            vals[i] = static_cast<double>(i) * 0.01 + rng.uniform(0.0, 0.002);
        }
        for (std::size_t i = vals.size() - 1; i > 0; --i) {
            std::swap(vals[i], vals[static_cast<std::size_t>(rng.uniform_int(
                                   static_cast<std::int64_t>(i + 1)))]);
        }
        auto x = Tensor::from_data({1, 2, 4, 4}, vals);
        auto r = Tensor::uniform({1, 2, 2, 2}, mix_seed(1001, seed), -1.0, 1.0);
        auto fmax = [&](const TensorPtr& t) { return sum(mul(maxpool(t, 2), r)); };
        CHECK(gradcheck(fmax, x, 1e-5) < 1e-4);
        auto favg = [&](const TensorPtr& t) { return sum(mul(avgpool(t, 2), r)); };
        CHECK(gradcheck(favg, x, 1e-5) < 1e-4);
    }
}
