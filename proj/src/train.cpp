#include "unet3p/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace unet3p {

void TrainConfig::validate() const {
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch norm)");
    if (cls_loss_weight < 0.0) throw ConfigError("cls_loss_weight must be >= 0");
    if (early_stop_dice < 0.0 || early_stop_dice > 1.0) {
        throw ConfigError("early_stop_dice must be in [0,1]");
    }
}

SgdState SgdState::make(const Network& net) {
    SgdState st;
    st.velocity.reserve(net.params().size());
    for (const auto& p : net.params()) {
        st.velocity.emplace_back(p.tensor->data.size(), 0.0);
    }
    return st;
}

void sgd_step(Network& net, SgdState& state, const TrainConfig& cfg) {
    const auto& params = net.params();
    if (state.velocity.size() != params.size()) {
        throw ContractError("sgd_step: state does not match the parameter registry");
    }
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& entry = params[pi];
        Tensor& t = *entry.tensor;
        if (!t.grad_populated()) {
            throw ContractError("sgd_step: parameter '" + entry.name +
                                "' has no gradient (dead branch)");
        }
        std::vector<double>& v = state.velocity[pi];
        const std::size_t n = t.data.size();
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = cfg.momentum * v[i] + t.grad[i];
            t.data[i] -= cfg.learning_rate * v[i];
        }
        t.zero_grad();
    }
}

std::string format_epoch_line(const EpochLog& log) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "epoch %d loss %.6f focal %.6f msssim %.6f iou %.6f bce %.6f dice %.6f",
                  log.epoch, log.loss, log.focal, log.msssim, log.iou, log.bce, log.dice);
    return std::string(buf);
}

namespace {

// stacks samples [first, last) into batch tensors
void stack_batch(const std::vector<Sample>& data, const std::vector<int>& order, int first,
                 int last, TensorPtr& images, TensorPtr& masks, std::vector<bool>& labels) {
    const int B = last - first;
    const auto& ref = data[static_cast<std::size_t>(order[static_cast<std::size_t>(first)])];
    const std::int64_t C = ref.image->dim(0), H = ref.image->dim(1), W = ref.image->dim(2);
    std::vector<double> img(static_cast<std::size_t>(B * C * H * W));
    std::vector<double> msk(static_cast<std::size_t>(B * H * W));
    labels.assign(static_cast<std::size_t>(B), false);
    for (int b = 0; b < B; ++b) {
        const auto& s = data[static_cast<std::size_t>(order[static_cast<std::size_t>(first + b)])];
        std::copy(s.image->data.begin(), s.image->data.end(),
                  img.begin() + static_cast<std::ptrdiff_t>(b) * C * H * W);
        std::copy(s.mask->data.begin(), s.mask->data.end(),
                  msk.begin() + static_cast<std::ptrdiff_t>(b) * H * W);
        labels[static_cast<std::size_t>(b)] = s.has_organ;
    }
    images = Tensor::from_data({B, C, H, W}, std::move(img));
    masks = Tensor::from_data({B, 1, H, W}, std::move(msk));
}

// per-sample [1,H,W] view copy out of a [B,1,H,W] batch
TensorPtr slice_sample(const Tensor& t, std::int64_t b) {
    const std::int64_t per = t.numel() / t.dim(0);
    std::vector<double> d(t.data.begin() + b * per, t.data.begin() + (b + 1) * per);
    return Tensor::from_data({1, t.dim(2), t.dim(3)}, std::move(d));
}

void check_component_finite(double v, const char* component, int epoch, int batch) {
    if (!std::isfinite(v)) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "non-finite %s loss at epoch %d batch %d", component,
                      epoch, batch);
        throw NumericError(buf);
    }
}

}  // namespace

TrainResult train(Network& net, const std::vector<Sample>& data, const TrainConfig& tcfg,
                  const LossConfig& lcfg) {
    tcfg.validate();
    lcfg.validate();
    if (data.empty()) throw ContractError("train: dataset is empty");

    SgdState sgd = SgdState::make(net);
    TrainResult result;
    const int n = static_cast<int>(data.size());
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    std::uint64_t global_step = 0;
    for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        // seeded Fisher-Yates so the visit order is a pure function of
        // (train seed, epoch)
        Rng shuffle_rng(mix_seed(tcfg.seed, static_cast<std::uint64_t>(epoch)));
        for (int i = n - 1; i > 0; --i) {
            const std::int64_t j = shuffle_rng.uniform_int(i + 1);
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }

        EpochLog log;
        log.epoch = epoch;
        double dice_sum = 0.0;
        int cls_correct = 0;
        int batch_index = 0;
        for (int first = 0; first < n; first += tcfg.batch_size, ++batch_index) {
            const int last = std::min(n, first + tcfg.batch_size);
            const int B = last - first;
            TensorPtr images, masks;
            std::vector<bool> labels;
            stack_batch(data, order, first, last, images, masks, labels);

            const std::uint64_t step_seed = mix_seed(tcfg.seed, 0x0D0Full + global_step);
            ForwardResult fwd = net.forward(images, Mode::train, step_seed);
            ++global_step;

            HybridParts parts;
            if (tcfg.seg_loss == TrainConfig::SegLoss::hybrid) {
                parts = hybrid_loss_parts(fwd.side_outputs, masks, lcfg);
            } else {
                TensorPtr acc;
                for (const auto& p : fwd.side_outputs) {
                    auto fl = focal_loss(p, masks, lcfg.focal_gamma, lcfg.clamp_eps);
                    parts.focal += fl->value();
                    acc = acc ? add(acc, fl) : fl;
                }
                parts.total = fwd.side_outputs.size() == 1
                                  ? acc
                                  : mul_scalar(acc, 1.0 / static_cast<double>(
                                                        fwd.side_outputs.size()));
                parts.focal /= static_cast<double>(fwd.side_outputs.size());
            }
            check_component_finite(parts.focal, "focal", epoch, batch_index);
            check_component_finite(parts.msssim, "msssim", epoch, batch_index);
            check_component_finite(parts.iou, "iou", epoch, batch_index);

            TensorPtr total = parts.total;
            double bce_value = 0.0;
            if (net.spec.cgm) {
                auto probs = sigmoid(fwd.cls_logits);
                auto bce = bce_cls_loss(probs, labels, lcfg.clamp_eps);
                bce_value = bce->value();
                check_component_finite(bce_value, "bce", epoch, batch_index);
                total = add(total, mul_scalar(bce, tcfg.cls_loss_weight));
                const auto gates = cgm_gates(probs);
                for (int b = 0; b < B; ++b) {
                    cls_correct += (gates[static_cast<std::size_t>(b)] == 1) ==
                                   static_cast<bool>(labels[static_cast<std::size_t>(b)]);
                }
            }
            check_component_finite(total->value(), "total", epoch, batch_index);

            backward(total);
            sgd_step(net, sgd, tcfg);

            // train-pass metrics, weighted by batch size
            const double w = static_cast<double>(B);
            log.loss += total->value() * w;
            log.focal += parts.focal * w;
            log.msssim += parts.msssim * w;
            log.iou += parts.iou * w;
            log.bce += bce_value * w;
            const auto& finest = *fwd.side_outputs[0];
            for (int b = 0; b < B; ++b) {
                dice_sum += dice(*slice_sample(finest, b),
                                 *slice_sample(*masks, b));
            }
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        log.loss *= inv_n;
        log.focal *= inv_n;
        log.msssim *= inv_n;
        log.iou *= inv_n;
        log.bce *= inv_n;
        log.dice = dice_sum * inv_n;
        result.epochs.push_back(log);
        if (net.spec.cgm) result.final_cls_accuracy = static_cast<double>(cls_correct) * inv_n;

        if (tcfg.early_stop_dice > 0.0 && log.dice >= tcfg.early_stop_dice) {
            result.stopped_early = true;
            break;
        }
    }
    return result;
}

EvalResult evaluate(Network& net, const std::vector<Sample>& data, bool use_gate) {
    EvalResult result;
    result.gate_available = net.spec.cgm;
    if (data.empty()) return result;
    NoGradGuard no_grad;

    const int n = static_cast<int>(data.size());
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    int cls_correct = 0;
    constexpr int kEvalBatch = 8;
    for (int first = 0; first < n; first += kEvalBatch) {
        const int last = std::min(n, first + kEvalBatch);
        const int B = last - first;
        TensorPtr images, masks;
        std::vector<bool> labels;
        stack_batch(data, order, first, last, images, masks, labels);
        ForwardResult fwd = net.forward(images, Mode::eval, 0);
        const auto& finest = *fwd.side_outputs[0];

        std::vector<int> gates(static_cast<std::size_t>(B), 1);
        if (net.spec.cgm) {
            auto probs = sigmoid(fwd.cls_logits);
            gates = cgm_gates(probs);
            for (int b = 0; b < B; ++b) {
                cls_correct += (gates[static_cast<std::size_t>(b)] == 1) ==
                               static_cast<bool>(labels[static_cast<std::size_t>(b)]);
            }
        }

        for (int b = 0; b < B; ++b) {
            auto pred = slice_sample(finest, b);
            auto mask = slice_sample(*masks, b);
            const double d_ungated = dice(*pred, *mask);
            result.dice_ungated.push_back(d_ungated);
            const bool organ = labels[static_cast<std::size_t>(b)];
            if (!organ) {
                ++result.nonorgan_samples;
                result.fp_pixels_ungated += false_positive_pixels(*pred, *mask);
            }
            if (net.spec.cgm && use_gate) {
                TensorPtr gated = pred;
                if (gates[static_cast<std::size_t>(b)] == 0) {
                    gated = Tensor::zeros(pred->shape);
                }
                result.dice_gated.push_back(dice(*gated, *mask));
                if (!organ) result.fp_pixels_gated += false_positive_pixels(*gated, *mask);
            }
        }
    }

    const double inv = 1.0 / static_cast<double>(n);
    for (double d : result.dice_ungated) result.mean_dice_ungated += d * inv;
    if (!result.dice_gated.empty()) {
        for (double d : result.dice_gated) result.mean_dice_gated += d * inv;
    } else {
        result.dice_gated = result.dice_ungated;
        result.mean_dice_gated = result.mean_dice_ungated;
        result.fp_pixels_gated = result.fp_pixels_ungated;
    }
    if (net.spec.cgm) result.cls_accuracy = static_cast<double>(cls_correct) * inv;
    return result;
}

}  // namespace unet3p
