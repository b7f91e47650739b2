#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "unet3p/tensor.hpp"
#include "unet3p/tensor_io.hpp"

using namespace unet3p;

namespace {
struct GuardOn {
    GuardOn() { set_finite_check(true); }
} g_guard_on;
}  // namespace

TEST_CASE("tensor creation: fills and shapes") {
    auto z = Tensor::zeros({2, 3});
    CHECK(z->numel() == 6);
    for (double v : z->data) CHECK(v == 0.0);

    auto f = Tensor::full({1}, 7.5);
    CHECK(f->value() == 7.5);

    CHECK_THROWS_AS(Tensor::zeros({0, 2}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({-1}), ShapeError);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0}), ShapeError);
}

TEST_CASE("tensor creation: seeded fill is reproducible per (seed, shape)") {
    auto a = Tensor::uniform({4}, 42);
    auto b = Tensor::uniform({4}, 42);
    CHECK(a->data == b->data);  // identical bytes
    auto c = Tensor::uniform({4}, 43);
    CHECK(a->data != c->data);
    for (double v : a->data) {
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("elementwise add/mul/sub examples") {
    auto a = Tensor::from_data({2}, {1, 2});
    auto b = Tensor::from_data({2}, {3, 4});
    auto s = add(a, b);
    CHECK(s->data == std::vector<double>{4, 6});

    auto x = Tensor::from_data({3}, {1, -2, 5}, true);
    auto zero = Tensor::zeros({3});
    auto prod = mul(x, zero);
    for (double v : prod->data) CHECK(v == 0.0);
    backward(sum(prod));
    for (double g : x->grad) CHECK(g == 0.0);  // grad wrt x is zero

    auto y = Tensor::from_data({3}, {1.5, -2.25, 0.0});
    auto d = sub(y, y);
    for (double v : d->data) CHECK(v == 0.0);
}

TEST_CASE("elementwise shape checks and scalar broadcast") {
    auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    auto bad = Tensor::from_data({3}, {1, 2, 3});
    CHECK_THROWS_AS(add(a, bad), ShapeError);

    auto s = Tensor::scalar(10.0, true);
    auto r = add(a, s);
    CHECK(r->data == std::vector<double>{11, 12, 13, 14});
    backward(sum(r));
    CHECK(s->grad[0] == 4.0);  // broadcast grad sums over positions
}

TEST_CASE("matmul examples") {
    auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    auto m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    CHECK(matmul(eye, m)->data == m->data);

    auto a = Tensor::from_data({1, 2}, {1, 2});
    auto b = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(a, b)->value() == 11.0);

    CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("matmul gradcheck (finite differences, step 1e-5)") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto a = Tensor::uniform({3, 4}, mix_seed(100, seed), -1.0, 1.0);
        auto b = Tensor::uniform({4, 2}, mix_seed(200, seed), -1.0, 1.0);
        const double err =
            gradcheck([&](const TensorPtr& x) { return sum(matmul(x, b)); }, a, 1e-5);
        CHECK(err < 1e-6);
        const double err_b =
            gradcheck([&](const TensorPtr& x) { return sum(matmul(a, x)); }, b, 1e-5);
        CHECK(err_b < 1e-6);
    }
}

TEST_CASE("backward: linear, quadratic, accumulation") {
    auto x = Tensor::from_data({3}, {5, 6, 7}, true);
    backward(sum(x));
    CHECK(x->grad == std::vector<double>({1, 1, 1}));

    auto y = Tensor::from_data({2}, {1, 2}, true);
    backward(sum(mul(y, y)));
    CHECK(y->grad == std::vector<double>({2, 4}));

    auto z = Tensor::from_data({2}, {3, -1}, true);
    backward(sum(add(z, z)));  // used twice: grads accumulate
    CHECK(z->grad == std::vector<double>({2, 2}));
}

TEST_CASE("backward: gradient accumulation doubles exactly") {
    // each f-graph deposits into x once, so f(x)+f(x) doubles bit-exactly
    auto c = Tensor::uniform({5}, 78, -1.0, 1.0);
    auto f = [&c](const TensorPtr& t) { return mean(mul(t, c)); };
    auto x1 = Tensor::uniform({5}, 77, -1.0, 1.0, true);
    backward(f(x1));
    auto once = x1->grad;

    auto x2 = Tensor::from_data({5}, x1->data, true);
    backward(add(f(x2), f(x2)));
    for (std::size_t i = 0; i < once.size(); ++i) {
        CHECK(x2->grad[i] == 2.0 * once[i]);  // bit-exact
    }

    // multi-use chains accumulate additively too, up to summation rounding
    auto g = [](const TensorPtr& t) { return sum(mul(mul(t, t), t)); };
    auto x3 = Tensor::from_data({5}, x1->data, true);
    backward(g(x3));
    auto g_once = x3->grad;
    auto x4 = Tensor::from_data({5}, x1->data, true);
    backward(add(g(x4), g(x4)));
    for (std::size_t i = 0; i < g_once.size(); ++i) {
        CHECK(x4->grad[i] == doctest::Approx(2.0 * g_once[i]).epsilon(1e-14));
    }
}

TEST_CASE("backward contract: non-scalar loss rejected") {
    auto x = Tensor::from_data({2}, {1, 2}, true);
    auto y = add(x, x);
    CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("graph is freed after backward") {
    auto x = Tensor::from_data({2}, {1, 2}, true);
    auto loss = sum(mul(x, x));
    backward(loss);
    CHECK(loss->parents.empty());
    CHECK_FALSE(static_cast<bool>(loss->backprop));
}

TEST_CASE("gradcheck: exact for quadratics, catches a wrong gradient") {
    auto x = Tensor::uniform({6}, 5, -2.0, 2.0);
    const double err = gradcheck([](const TensorPtr& t) { return sum(mul(t, t)); }, x, 1e-5);
    CHECK(err < 1e-8);

    // deliberately broken op: forward x^2, backward claims 3x
    auto broken = [](const TensorPtr& t) {
        auto out = make_op_output(t->shape, {t});
        for (std::int64_t i = 0; i < t->numel(); ++i) out->data[i] = t->data[i] * t->data[i];
        if (out->requires_grad) {
            Tensor* self = out.get();
            TensorPtr p = t;
            out->backprop = [self, p]() {
                p->ensure_grad();
                for (std::int64_t i = 0; i < p->numel(); ++i) {
                    p->grad[i] += self->grad[i] * 3.0 * p->data[i];
                }
            };
        }
        return sum(out);
    };
    CHECK(gradcheck(broken, x, 1e-5) > 1e-2);
}

TEST_CASE("gradcheck rejects non-positive step and non-finite f") {
    auto x = Tensor::from_data({1}, {1.0});
    CHECK_THROWS_AS(gradcheck([](const TensorPtr& t) { return sum(t); }, x, 0.0), ContractError);
    auto bad = Tensor::from_data({1}, {-1.0});
    CHECK_THROWS_AS(gradcheck([](const TensorPtr& t) { return log_op(t); }, bad, 1e-5),
                    NumericError);
}

TEST_CASE("finite guard catches NaN-producing ops when enabled") {
    auto zero = Tensor::from_data({1}, {0.0});
    CHECK_THROWS_AS(log_op(zero), NumericError);
}

TEST_CASE("elementwise helpers: div, pow, clamp, log, mean") {
    auto a = Tensor::from_data({2}, {1.0, 9.0});
    auto b = Tensor::from_data({2}, {2.0, 3.0});
    CHECK(div(a, b)->data == std::vector<double>({0.5, 3.0}));
    CHECK(pow_scalar(b, 2.0)->data == std::vector<double>({4.0, 9.0}));
    CHECK(clamp(a, 2.0, 5.0)->data == std::vector<double>({2.0, 5.0}));
    CHECK(mean(a)->value() == 5.0);
    CHECK(log_op(Tensor::from_data({1}, {1.0}))->value() == 0.0);
    CHECK(rsub_scalar(1.0, Tensor::from_data({1}, {0.25}))->value() == 0.75);
}

TEST_CASE("determinism: same seed, same ops, bit-identical values and grads") {
    auto run = [](std::uint64_t seed) {
        auto x = Tensor::uniform({4, 4}, seed, -1.0, 1.0, true);
        auto y = Tensor::uniform({4, 4}, seed + 1, -1.0, 1.0);
        auto loss = mean(mul(add(x, y), sub(x, y)));
        backward(loss);
        return std::make_pair(loss->value(), x->grad);
    };
    auto [v1, g1] = run(123);
    auto [v2, g2] = run(123);
    CHECK(v1 == v2);
    CHECK(g1 == g2);
}

TEST_CASE("TNS1 round trip is f32 bit-exact") {
    const std::string path =
        (std::filesystem::temp_directory_path() / "u3p_test.tns").string();
    auto t = Tensor::uniform({2, 3, 4}, 9, -5.0, 5.0);
    write_tns(path, *t);
    auto r = read_tns(path);
    REQUIRE(r->shape == t->shape);
    for (std::size_t i = 0; i < t->data.size(); ++i) {
        CHECK(r->data[i] == static_cast<double>(static_cast<float>(t->data[i])));
    }
    // header layout: magic + rank + dims, little-endian u32
    FILE* f = std::fopen(path.c_str(), "rb");
    REQUIRE(f);
    unsigned char head[8 + 3 * 4];
    REQUIRE(std::fread(head, 1, sizeof(head), f) == sizeof(head));
    std::fclose(f);
    CHECK(std::string(reinterpret_cast<char*>(head), 4) == "TNS1");
    CHECK(head[4] == 3);  // rank, LE
    CHECK(head[8] == 2);
    CHECK(head[12] == 3);
    CHECK(head[16] == 4);
    std::filesystem::remove(path);
}

TEST_CASE("no-grad mode suppresses graph recording") {
    auto x = Tensor::from_data({2}, {1, 2}, true);
    TensorPtr y;
    {
        NoGradGuard guard;
        y = mul(x, x);
    }
    CHECK_FALSE(y->requires_grad);
    CHECK(y->parents.empty());
}
