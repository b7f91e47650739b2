#include "unet3p/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>

#include "unet3p/arch.hpp"
#include "unet3p/layers.hpp"
#include "unet3p/losses.hpp"
#include "unet3p/tensor.hpp"

namespace unet3p {

namespace {

// Values with pairwise gaps well above the fd step, so max-pool argmax and
// relu signs cannot flip under perturbation.
TensorPtr well_separated(const std::vector<std::int64_t>& shape, Rng& rng) {
    const std::int64_t n = shape_numel(shape);
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    for (std::int64_t i = n - 1; i > 0; --i) {
        std::swap(perm[static_cast<std::size_t>(i)],
                  perm[static_cast<std::size_t>(rng.uniform_int(i + 1))]);
    }
    std::vector<double> d(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        d[static_cast<std::size_t>(i)] =
            static_cast<double>(perm[static_cast<std::size_t>(i)]) * 0.01 +
            rng.uniform(0.0, 0.002);
    }
    return Tensor::from_data(shape, std::move(d));
}

TensorPtr random_tensor(const std::vector<std::int64_t>& shape, Rng& rng, double lo, double hi) {
    return Tensor::uniform_rng(shape, rng, lo, hi, false);
}

TensorPtr random_binary(const std::vector<std::int64_t>& shape, Rng& rng) {
    const std::int64_t n = shape_numel(shape);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (double& v : d) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    return Tensor::from_data(shape, std::move(d));
}

// forward identity whose recorded backward scales the gradient; used only to
// fake a broken conv backward for the detector self-test
TensorPtr grad_skew(const TensorPtr& x, double factor) {
    auto out = make_op_output(x->shape, {x});
    out->data = x->data;
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr px = x;
        const std::int64_t n = x->numel();
        out->backprop = [self, px, factor, n]() {
            px->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) px->grad[i] += self->grad[i] * factor;
        };
    }
    return out;
}

using ItemFn = std::function<double(Rng&, const SuiteOptions&)>;

double check(const std::function<TensorPtr(const TensorPtr&)>& f, const TensorPtr& x,
             const SuiteOptions& opt) {
    return gradcheck(f, x, opt.step);
}

}  // namespace

std::vector<SuiteItem> run_gradcheck_suite(const SuiteOptions& opt) {
    std::vector<std::pair<std::string, ItemFn>> items;

    items.emplace_back("add", [](Rng& rng, const SuiteOptions& o) {
        auto y = random_tensor({3, 4}, rng, -1, 1);
        auto r = random_tensor({3, 4}, rng, -1, 1);
        return check([&](const TensorPtr& x) { return sum(mul(add(x, y), r)); },
                     random_tensor({3, 4}, rng, -1, 1), o);
    });
    items.emplace_back("sub", [](Rng& rng, const SuiteOptions& o) {
        auto y = random_tensor({3, 4}, rng, -1, 1);
        auto r = random_tensor({3, 4}, rng, -1, 1);
        double w1 = check([&](const TensorPtr& x) { return sum(mul(sub(x, y), r)); },
                          random_tensor({3, 4}, rng, -1, 1), o);
        // subtrahend side, including the scalar broadcast
        auto a = random_tensor({3, 4}, rng, -1, 1);
        double w2 = check([&](const TensorPtr& x) { return sum(mul(sub(a, x), r)); },
                          random_tensor({1}, rng, -1, 1), o);
        return std::max(w1, w2);
    });
    items.emplace_back("mul", [](Rng& rng, const SuiteOptions& o) {
        auto y = random_tensor({3, 4}, rng, -1, 1);
        double w1 = check([&](const TensorPtr& x) { return sum(mul(x, y)); },
                          random_tensor({3, 4}, rng, -1, 1), o);
        auto a = random_tensor({2, 5}, rng, -1, 1);
        double w2 = check([&](const TensorPtr& x) { return sum(mul(a, x)); },
                          random_tensor({1}, rng, -1, 1), o);
        return std::max(w1, w2);
    });
    items.emplace_back("div", [](Rng& rng, const SuiteOptions& o) {
        auto y = random_tensor({3, 4}, rng, 0.5, 1.5);
        double w1 = check([&](const TensorPtr& x) { return sum(div(x, y)); },
                          random_tensor({3, 4}, rng, -1, 1), o);
        auto a = random_tensor({3, 4}, rng, -1, 1);
        double w2 = check([&](const TensorPtr& x) { return sum(div(a, x)); },
                          random_tensor({3, 4}, rng, 0.5, 1.5), o);
        return std::max(w1, w2);
    });
    items.emplace_back("log", [](Rng& rng, const SuiteOptions& o) {
        return check([](const TensorPtr& x) { return sum(log_op(x)); },
                     random_tensor({4, 4}, rng, 0.2, 2.0), o);
    });
    items.emplace_back("pow_scalar", [](Rng& rng, const SuiteOptions& o) {
        const double c = rng.uniform(0.3, 2.5);
        return check([c](const TensorPtr& x) { return sum(pow_scalar(x, c)); },
                     random_tensor({4, 4}, rng, 0.2, 2.0), o);
    });
    items.emplace_back("clamp", [](Rng& rng, const SuiteOptions& o) {
        // interior points only; the kink at the bounds has no two-sided derivative
        return check([](const TensorPtr& x) { return sum(clamp(x, -10.0, 10.0)); },
                     random_tensor({4, 4}, rng, -2.0, 2.0), o);
    });
    items.emplace_back("matmul", [](Rng& rng, const SuiteOptions& o) {
        auto b = random_tensor({4, 2}, rng, -1, 1);
        double w1 = check([&](const TensorPtr& x) { return sum(matmul(x, b)); },
                          random_tensor({3, 4}, rng, -1, 1), o);
        auto a = random_tensor({3, 4}, rng, -1, 1);
        double w2 = check([&](const TensorPtr& x) { return sum(matmul(a, x)); },
                          random_tensor({4, 2}, rng, -1, 1), o);
        return std::max(w1, w2);
    });
    items.emplace_back("sum", [](Rng& rng, const SuiteOptions& o) {
        return check([](const TensorPtr& x) { return sum(mul(x, x)); },
                     random_tensor({5}, rng, -1, 1), o);
    });
    items.emplace_back("mean", [](Rng& rng, const SuiteOptions& o) {
        return check([](const TensorPtr& x) { return mean(mul(x, x)); },
                     random_tensor({7}, rng, -1, 1), o);
    });

    items.emplace_back("conv2d", [](Rng& rng, const SuiteOptions& o) {
        auto x = random_tensor({2, 3, 8, 8}, rng, -1, 1);
        auto w = random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5);
        auto b = random_tensor({4}, rng, -0.5, 0.5);
        auto r = random_tensor({2, 4, 8, 8}, rng, -1, 1);
        auto maybe_skew = [&o](const TensorPtr& t) {
            return o.inject_conv_bug ? grad_skew(t, 1.5) : t;
        };
        auto loss_of = [&](const TensorPtr& xx, const TensorPtr& ww, const TensorPtr& bb) {
            return mean(mul(maybe_skew(conv2d_op(xx, ww, bb, 1, 1)), r));
        };
        double worst = check([&](const TensorPtr& t) { return loss_of(t, w, b); }, x, o);
        worst = std::max(worst, check([&](const TensorPtr& t) { return loss_of(x, t, b); }, w, o));
        worst = std::max(worst, check([&](const TensorPtr& t) { return loss_of(x, w, t); }, b, o));
        return worst;
    });
    items.emplace_back("batchnorm", [](Rng& rng, const SuiteOptions& o) {
        auto x = random_tensor({2, 3, 4, 4}, rng, -1, 1);
        auto r = random_tensor({2, 3, 4, 4}, rng, -1, 1);
        auto make_bn = [&]() {
            auto bn = BatchNorm2d::make(3);
            return bn;
        };
        double worst = check(
            [&](const TensorPtr& t) {
                auto bn = make_bn();
                return mean(mul(bn.forward(t, Mode::train), r));
            },
            x, o);
        // scale/shift directions
        auto bn = make_bn();
        bn.scale->data = {1.1, 0.9, 1.3};
        bn.shift->data = {0.1, -0.2, 0.3};
        worst = std::max(
            worst, gradcheck_wrt([&]() { return mean(mul(bn.forward(x, Mode::train), r)); },
                                 bn.scale, o.step));
        worst = std::max(
            worst, gradcheck_wrt([&]() { return mean(mul(bn.forward(x, Mode::train), r)); },
                                 bn.shift, o.step));
        return worst;
    });
    items.emplace_back("maxpool", [](Rng& rng, const SuiteOptions& o) {
        auto r = random_tensor({1, 2, 2, 2}, rng, -1, 1);
        return check([&](const TensorPtr& x) { return sum(mul(maxpool(x, 2), r)); },
                     well_separated({1, 2, 4, 4}, rng), o);
    });
    items.emplace_back("avgpool", [](Rng& rng, const SuiteOptions& o) {
        auto r = random_tensor({1, 2, 2, 2}, rng, -1, 1);
        return check([&](const TensorPtr& x) { return sum(mul(avgpool(x, 2), r)); },
                     random_tensor({1, 2, 4, 4}, rng, -1, 1), o);
    });
    items.emplace_back("bilinear_upsample", [](Rng& rng, const SuiteOptions& o) {
        auto r = random_tensor({1, 2, 8, 8}, rng, -1, 1);
        return check([&](const TensorPtr& x) { return sum(mul(bilinear_upsample(x, 2), r)); },
                     random_tensor({1, 2, 4, 4}, rng, -1, 1), o);
    });
    items.emplace_back("concat_channels", [](Rng& rng, const SuiteOptions& o) {
        auto y = random_tensor({1, 3, 3, 3}, rng, -1, 1);
        auto r = random_tensor({1, 5, 3, 3}, rng, -1, 1);
        return check(
            [&](const TensorPtr& x) { return sum(mul(concat_channels({x, y}), r)); },
            random_tensor({1, 2, 3, 3}, rng, -1, 1), o);
    });
    items.emplace_back("relu", [](Rng& rng, const SuiteOptions& o) {
        // keep inputs away from the kink at zero
        auto x = random_tensor({4, 4}, rng, 0.05, 1.0);
        for (double& v : x->data) {
            if (rng.uniform() < 0.5) v = -v;
        }
        auto r = random_tensor({4, 4}, rng, -1, 1);
        return check([&](const TensorPtr& t) { return sum(mul(relu(t), r)); }, x, o);
    });
    items.emplace_back("sigmoid", [](Rng& rng, const SuiteOptions& o) {
        auto r = random_tensor({4, 4}, rng, -1, 1);
        return check([&](const TensorPtr& x) { return sum(mul(sigmoid(x), r)); },
                     random_tensor({4, 4}, rng, -3, 3), o);
    });
    items.emplace_back("dropout", [](Rng& rng, const SuiteOptions& o) {
        const std::uint64_t seed = rng.next_u64();
        auto r = random_tensor({4, 4}, rng, -1, 1);
        return check(
            [&, seed](const TensorPtr& x) {
                return sum(mul(dropout(x, 0.5, Mode::train, seed), r));
            },
            random_tensor({4, 4}, rng, -1, 1), o);
    });
    items.emplace_back("global_maxpool", [](Rng& rng, const SuiteOptions& o) {
        auto r = random_tensor({2, 3}, rng, -1, 1);
        return check([&](const TensorPtr& x) { return sum(mul(global_maxpool(x), r)); },
                     well_separated({2, 3, 3, 3}, rng), o);
    });

    items.emplace_back("focal_loss", [](Rng& rng, const SuiteOptions& o) {
        auto g = random_binary({1, 1, 5, 5}, rng);
        const double gamma = rng.uniform(0.5, 3.0);
        return check([&](const TensorPtr& p) { return focal_loss(p, g, gamma); },
                     random_tensor({1, 1, 5, 5}, rng, 0.05, 0.95), o);
    });
    items.emplace_back("ms_ssim_loss", [](Rng& rng, const SuiteOptions& o) {
        LossConfig cfg;
        auto g = random_tensor({1, 1, 24, 24}, rng, 0.05, 0.95);
        return check([&](const TensorPtr& p) { return ms_ssim_loss(p, g, cfg); },
                     random_tensor({1, 1, 24, 24}, rng, 0.05, 0.95), o);
    });
    items.emplace_back("iou_loss", [](Rng& rng, const SuiteOptions& o) {
        auto g = random_binary({1, 1, 5, 5}, rng);
        return check([&](const TensorPtr& p) { return iou_loss(p, g); },
                     random_tensor({1, 1, 5, 5}, rng, 0.05, 0.95), o);
    });
    items.emplace_back("hybrid_loss", [](Rng& rng, const SuiteOptions& o) {
        LossConfig cfg;
        auto g = random_binary({1, 1, 16, 16}, rng);
        return check([&](const TensorPtr& p) { return hybrid_loss({p}, g, cfg); },
                     random_tensor({1, 1, 16, 16}, rng, 0.05, 0.95), o);
    });
    items.emplace_back("bce_cls_loss", [](Rng& rng, const SuiteOptions& o) {
        std::vector<bool> labels{true, false, true};
        return check([&](const TensorPtr& p) { return bce_cls_loss(p, labels); },
                     random_tensor({3, 2}, rng, 0.05, 0.95), o);
    });

    items.emplace_back("end_to_end_unet3p", [](Rng& rng, const SuiteOptions& o) {
        ArchSpec spec;
        spec.variant = Variant::unet3p;
        spec.depth = 3;
        spec.base_channels = 1;
        spec.skip_channels = 2;
        spec.input_channels = 1;
        spec.deep_supervision = true;
        spec.cgm = false;
        LossConfig lcfg;
        double worst = 0.0;
        const int rounds = std::min(2, std::max(1, o.rounds));
        for (int rd = 0; rd < rounds; ++rd) {
            Network net = build(spec, rng.next_u64());
            auto x = random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
            auto g = random_binary({1, 1, 16, 16}, rng);
            auto loss_fn = [&]() {
                auto fwd = net.forward(x, Mode::train, 0);
                return hybrid_loss(fwd.side_outputs, g, lcfg);
            };
            // first encoder conv and one decoder aggregation weight
            worst = std::max(worst,
                             gradcheck_wrt(loss_fn, net.encoder[0].block1.conv.weight, o.step));
            worst = std::max(
                worst, gradcheck_wrt(loss_fn, net.full_scale_nodes[0].agg.conv.weight, o.step));
        }
        return worst;
    });

    std::vector<SuiteItem> results;
    for (auto& [name, fn] : items) {
        SuiteItem item;
        item.name = name;
        item.tolerance = opt.tolerance;
        Rng rng(mix_seed(opt.seed, std::hash<std::string>{}(name)));
        const int rounds = name == "end_to_end_unet3p" ? 1 : opt.rounds;
        for (int rd = 0; rd < rounds; ++rd) {
            item.worst_rel_err = std::max(item.worst_rel_err, fn(rng, opt));
        }
        item.pass = item.worst_rel_err < item.tolerance;
        results.push_back(std::move(item));
    }
    return results;
}

std::string render_suite(const std::vector<SuiteItem>& items) {
    std::ostringstream os;
    for (const auto& item : items) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-20s worst rel err %.3e  tolerance %.0e  %s\n",
                      item.name.c_str(), item.worst_rel_err, item.tolerance,
                      item.pass ? "pass" : "FAIL");
        os << buf;
    }
    return os.str();
}

bool suite_passed(const std::vector<SuiteItem>& items) {
    for (const auto& item : items) {
        if (!item.pass) return false;
    }
    return true;
}

}  // namespace unet3p
