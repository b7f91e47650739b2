#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unet3p/tensor.hpp"

namespace unet3p {

enum class Mode { train, eval };

// ---- functional layer ops, all with recorded backward ----

// x: [B,C,H,W], w: [O,C,K,K], b: [O] or null. Cross-correlation, explicit
// symmetric zero padding. H' = (H + 2p - K)/stride + 1.
TensorPtr conv2d_op(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                    std::int64_t stride, std::int64_t padding);

// Non-overlapping window max; H,W must be divisible by factor. Gradient goes
// to the argmax cell, first in row-major scan on ties.
TensorPtr maxpool(const TensorPtr& x, std::int64_t factor);

// Non-overlapping window mean.
TensorPtr avgpool(const TensorPtr& x, std::int64_t factor);

// Half-pixel-center bilinear: source = (dst + 0.5)/factor - 0.5, clamped to
// [0, dim-1]. Linear operator; backward is its transpose.
TensorPtr bilinear_upsample(const TensorPtr& x, std::int64_t factor);

// Channel concat of [B,Ci,H,W] tensors; output channel order = input order.
TensorPtr concat_channels(const std::vector<TensorPtr>& xs);

TensorPtr relu(const TensorPtr& x);       // relu'(0) = 0
TensorPtr sigmoid(const TensorPtr& x);    // numerically stable both tails
double sigmoid_value(double v);

// train: zero with prob rate, scale survivors by 1/(1-rate); mask is a pure
// function of (seed, numel). eval: identity.
TensorPtr dropout(const TensorPtr& x, double rate, Mode mode, std::uint64_t seed);

// [B,C,H,W] -> [B,C]; max over the spatial extent, first-tie wins gradient.
TensorPtr global_maxpool(const TensorPtr& x);

// ---- parameterized layers ----

struct Conv2d {
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    std::int64_t kernel = 3;
    std::int64_t stride = 1;
    std::int64_t padding = 0;
    TensorPtr weight;  // [O,C,K,K]
    TensorPtr bias;    // [O] or null

    // Kaiming-style uniform init from the shared builder stream; zero bias.
    static Conv2d make(std::int64_t in_ch, std::int64_t out_ch, std::int64_t kernel,
                       std::int64_t stride, std::int64_t padding, bool with_bias, Rng* rng);

    static std::int64_t same_padding(std::int64_t kernel) { return (kernel - 1) / 2; }

    TensorPtr operator()(const TensorPtr& x) const {
        return conv2d_op(x, weight, bias, stride, padding);
    }

    std::int64_t weight_count() const { return weight->numel(); }
    std::int64_t param_count() const { return weight->numel() + (bias ? bias->numel() : 0); }
};

struct BatchNorm2d {
    std::int64_t channels = 0;
    double epsilon = 1e-5;
    double momentum = 0.1;  // running = (1-m)*running + m*batch
    TensorPtr scale;         // [C], learnable
    TensorPtr shift;         // [C], learnable
    TensorPtr running_mean;  // [C], buffer
    TensorPtr running_var;   // [C], buffer

    static BatchNorm2d make(std::int64_t channels);

    // train: batch statistics + running update; eval: running statistics.
    // Full backward through the normalization in train mode.
    TensorPtr forward(const TensorPtr& x, Mode mode);
};

// conv2d free-function form taking the layer (spec operation signature)
inline TensorPtr conv2d(const TensorPtr& x, const Conv2d& layer) { return layer(x); }
inline TensorPtr batchnorm(const TensorPtr& x, BatchNorm2d& layer, Mode mode) {
    return layer.forward(x, mode);
}

TensorPtr activation(const TensorPtr& x, const std::string& kind);  // "relu" | "sigmoid"

// ---- checkpoint ----
// Directory layout: manifest.txt with one "name shape file" line per tensor
// (shape as 16x3x3x3), plus one TNS1 file per tensor.

struct NamedTensor {
    std::string name;
    TensorPtr tensor;
};

void save_checkpoint(const std::string& dir, const std::vector<NamedTensor>& tensors);

// Loads into the given tensors; order, names and shapes must match the
// manifest exactly. Throws ContractError naming the first mismatch.
void load_checkpoint(const std::string& dir, const std::vector<NamedTensor>& tensors);

}  // namespace unet3p
