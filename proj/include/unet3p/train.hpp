#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unet3p/arch.hpp"
#include "unet3p/data.hpp"
#include "unet3p/losses.hpp"

namespace unet3p {

struct TrainConfig {
    double learning_rate = 0.01;
    double momentum = 0.9;
    int epochs = 100;
    int batch_size = 8;
    std::uint64_t seed = 1;        // shuffling + dropout streams
    double cls_loss_weight = 1.0;  // weight of the BCE term when CGM is on
    double early_stop_dice = 0.0;  // stop once epoch train dice reaches this; 0 = off

    enum class SegLoss { hybrid, focal };
    SegLoss seg_loss = SegLoss::hybrid;

    void validate() const;
};

// classic momentum buffers, aligned with the network's parameter registry
struct SgdState {
    std::vector<std::vector<double>> velocity;
    static SgdState make(const Network& net);
};

// v <- momentum*v + grad; param <- param - lr*v; grads cleared afterwards.
// A registered parameter without a populated gradient is a wiring bug and
// raises ContractError naming it.
void sgd_step(Network& net, SgdState& state, const TrainConfig& cfg);

struct EpochLog {
    int epoch = 0;  // 1-based
    double loss = 0, focal = 0, msssim = 0, iou = 0, bce = 0, dice = 0;
};

// "epoch k loss L focal F msssim S iou I bce B dice D"
std::string format_epoch_line(const EpochLog& log);

struct TrainResult {
    std::vector<EpochLog> epochs;
    double final_cls_accuracy = -1.0;  // classifier train accuracy of the last epoch
    bool stopped_early = false;
};

TrainResult train(Network& net, const std::vector<Sample>& data, const TrainConfig& tcfg,
                  const LossConfig& lcfg);

struct EvalResult {
    std::vector<double> dice_ungated;       // per sample, finest side output
    std::vector<double> dice_gated;         // with the CGM gate applied
    double mean_dice_ungated = 0.0;
    double mean_dice_gated = 0.0;
    std::int64_t fp_pixels_ungated = 0;     // on non-organ samples
    std::int64_t fp_pixels_gated = 0;
    int nonorgan_samples = 0;
    double cls_accuracy = -1.0;             // -1 when the CGM is absent
    bool gate_available = false;
};

// Frozen-statistics evaluation. The prediction is the finest side output;
// when use_gate and the CGM exists, the per-sample argmax gate multiplies it.
EvalResult evaluate(Network& net, const std::vector<Sample>& data, bool use_gate);

}  // namespace unet3p
