#include "unet3p/losses.hpp"

#include <cmath>
#include <cstdio>

#include "unet3p/layers.hpp"

namespace unet3p {

namespace {

void check_mask_pair(const char* op, const Tensor& p, const Tensor& g) {
    if (p.shape != g.shape) {
        throw ShapeError(std::string(op) + ": prediction " + shape_str(p.shape) +
                         " vs ground truth " + shape_str(g.shape));
    }
}

TensorPtr one_minus(const TensorPtr& t) { return rsub_scalar(1.0, t); }

// Normalized Gaussian window as a [1,1,K,K] constant conv kernel.
TensorPtr gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<std::size_t>(size) * size);
    const double c = (size - 1) / 2.0;
    double total = 0.0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double dy = y - c, dx = x - c;
            const double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
            w[static_cast<std::size_t>(y) * size + x] = v;
            total += v;
        }
    }
    for (double& v : w) v /= total;
    return Tensor::from_data({1, 1, size, size}, std::move(w));
}

}  // namespace

void LossConfig::validate() const {
    if (focal_gamma < 0.0) throw ConfigError("focal_gamma must be >= 0");
    if (msssim_scales < 1) throw ConfigError("msssim_scales must be >= 1");
    if (msssim_window < 2 || msssim_window % 2 == 0) {
        throw ConfigError("msssim_window must be an odd size >= 3");
    }
    if (msssim_sigma <= 0.0) throw ConfigError("msssim_sigma must be positive");
    if (c1 <= 0.0 || c2 <= 0.0) throw ConfigError("msssim C1/C2 must be positive");
    if (static_cast<int>(msssim_weights.size()) < msssim_scales) {
        throw ConfigError("msssim_weights must provide at least msssim_scales entries");
    }
    for (double w : msssim_weights) {
        if (w <= 0.0) throw ConfigError("msssim_weights must be positive");
    }
}

int msssim_effective_scales(const LossConfig& cfg, std::int64_t h, std::int64_t w) {
    if (h < cfg.msssim_window || w < cfg.msssim_window) {
        throw GeometryError("ms_ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                            " smaller than the " + std::to_string(cfg.msssim_window) + " window");
    }
    int m = 1;
    std::int64_t hh = h, ww = w;
    while (m < cfg.msssim_scales) {
        if (hh % 2 != 0 || ww % 2 != 0) break;
        hh /= 2;
        ww /= 2;
        if (hh < cfg.msssim_window || ww < cfg.msssim_window) break;
        ++m;
    }
    return m;
}

TensorPtr focal_loss(const TensorPtr& p, const TensorPtr& g, double gamma, double clamp_eps) {
    check_mask_pair("focal_loss", *p, *g);
    auto pc = clamp(p, clamp_eps, 1.0 - clamp_eps);
    // p_t = g*p + (1-g)*(1-p)
    auto pt = add(mul(g, pc), mul(one_minus(g), one_minus(pc)));
    auto focal_weight = pow_scalar(one_minus(pt), gamma);
    auto nll = mul_scalar(log_op(pt), -1.0);
    return mean(mul(focal_weight, nll));
}

TensorPtr ms_ssim_loss(const TensorPtr& p, const TensorPtr& g, const LossConfig& cfg) {
    check_mask_pair("ms_ssim_loss", *p, *g);
    if (p->rank() != 4 || p->dim(1) != 1) {
        throw ShapeError("ms_ssim_loss expects [B,1,H,W] maps, got " + shape_str(p->shape));
    }
    cfg.validate();
    const int m_eff = msssim_effective_scales(cfg, p->dim(2), p->dim(3));
    if (m_eff < cfg.msssim_scales) {
        // log each truncated geometry once, not per call
        static thread_local std::int64_t last_logged = -1;
        const std::int64_t key = (p->dim(2) << 24) ^ (p->dim(3) << 8) ^ m_eff;
        if (key != last_logged) {
            last_logged = key;
            std::fprintf(stderr,
                         "ms_ssim: %lldx%lld supports %d of %d scales; weights renormalized\n",
                         static_cast<long long>(p->dim(2)), static_cast<long long>(p->dim(3)),
                         m_eff, cfg.msssim_scales);
        }
    }
    double weight_sum = 0.0;
    for (int m = 0; m < m_eff; ++m) weight_sum += cfg.msssim_weights[static_cast<std::size_t>(m)];

    auto window = gaussian_window(cfg.msssim_window, cfg.msssim_sigma);
    // means over each sliding window; floor keeps fractional exponents of
    // near-zero (or anti-correlated) factors finite
    constexpr double kFactorFloor = 1e-6;

    TensorPtr product = Tensor::scalar(1.0);
    TensorPtr cp = p, cg = g;
    for (int m = 1; m <= m_eff; ++m) {
        auto mu_p = conv2d_op(cp, window, nullptr, 1, 0);
        auto mu_g = conv2d_op(cg, window, nullptr, 1, 0);
        auto e_pp = conv2d_op(mul(cp, cp), window, nullptr, 1, 0);
        auto e_gg = conv2d_op(mul(cg, cg), window, nullptr, 1, 0);
        auto e_pg = conv2d_op(mul(cp, cg), window, nullptr, 1, 0);
        auto var_p = sub(e_pp, mul(mu_p, mu_p));
        auto var_g = sub(e_gg, mul(mu_g, mu_g));
        auto cov = sub(e_pg, mul(mu_p, mu_g));

        auto lum = div(add_scalar(mul_scalar(mul(mu_p, mu_g), 2.0), cfg.c1),
                       add_scalar(add(mul(mu_p, mu_p), mul(mu_g, mu_g)), cfg.c1));
        auto cs = div(add_scalar(mul_scalar(cov, 2.0), cfg.c2),
                      add_scalar(add(var_p, var_g), cfg.c2));

        auto lum_mean = clamp(mean(lum), kFactorFloor, 1e18);
        auto cs_mean = clamp(mean(cs), kFactorFloor, 1e18);

        const double wm = cfg.msssim_weights[static_cast<std::size_t>(m - 1)] / weight_sum;
        product = mul(product, mul(pow_scalar(lum_mean, wm), pow_scalar(cs_mean, wm)));

        if (m < m_eff) {
            cp = avgpool(cp, 2);
            cg = avgpool(cg, 2);
        }
    }
    return rsub_scalar(1.0, product);
}

TensorPtr iou_loss(const TensorPtr& p, const TensorPtr& g, double eps) {
    check_mask_pair("iou_loss", *p, *g);
    auto inter = sum(mul(p, g));
    auto uni = add_scalar(sub(add(sum(p), sum(g)), inter), eps);
    return rsub_scalar(1.0, div(inter, uni));
}

HybridParts hybrid_loss_parts(const std::vector<TensorPtr>& side_outputs, const TensorPtr& g,
                              const LossConfig& cfg) {
    if (side_outputs.empty()) throw ContractError("hybrid_loss: no side outputs");
    HybridParts parts;
    TensorPtr acc;
    for (const auto& p : side_outputs) {
        auto fl = focal_loss(p, g, cfg.focal_gamma, cfg.clamp_eps);
        auto ms = ms_ssim_loss(p, g, cfg);
        auto io = iou_loss(p, g, cfg.clamp_eps);
        auto term = add(add(fl, ms), io);
        parts.focal += fl->value();
        parts.msssim += ms->value();
        parts.iou += io->value();
        acc = acc ? add(acc, term) : term;
    }
    const double inv = 1.0 / static_cast<double>(side_outputs.size());
    parts.total = side_outputs.size() == 1 ? acc : mul_scalar(acc, inv);
    parts.focal *= inv;
    parts.msssim *= inv;
    parts.iou *= inv;
    return parts;
}

TensorPtr hybrid_loss(const std::vector<TensorPtr>& side_outputs, const TensorPtr& g,
                      const LossConfig& cfg) {
    return hybrid_loss_parts(side_outputs, g, cfg).total;
}

TensorPtr bce_cls_loss(const TensorPtr& cls_probs, const std::vector<bool>& labels,
                       double clamp_eps) {
    if (cls_probs->rank() != 2 || cls_probs->dim(1) != 2) {
        throw ShapeError("bce_cls_loss expects [B,2] probabilities, got " + shape_str(cls_probs->shape));
    }
    const std::int64_t B = cls_probs->dim(0);
    if (static_cast<std::int64_t>(labels.size()) != B) {
        throw ShapeError("bce_cls_loss: label count mismatch");
    }
    // one-hot target rows: (1,0) without organ, (0,1) with organ
    std::vector<double> target(static_cast<std::size_t>(B * 2));
    for (std::int64_t i = 0; i < B; ++i) {
        const bool with_organ = labels[static_cast<std::size_t>(i)];
        target[static_cast<std::size_t>(2 * i)] = with_organ ? 0.0 : 1.0;
        target[static_cast<std::size_t>(2 * i + 1)] = with_organ ? 1.0 : 0.0;
    }
    auto t = Tensor::from_data({B, 2}, std::move(target));
    auto pc = clamp(cls_probs, clamp_eps, 1.0 - clamp_eps);
    auto term = add(mul(t, log_op(pc)), mul(one_minus(t), log_op(one_minus(pc))));
    return mul_scalar(mean(term), -1.0);
}

}  // namespace unet3p
