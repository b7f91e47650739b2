#pragma once

#include <cstdint>
#include <vector>

#include "unet3p/tensor.hpp"

namespace unet3p {

// Synthetic organ-like shapes: soft-edged ellipses on a noisy background.
// Non-organ samples are background noise with an all-zero mask. Every sample
// is a pure function of (spec, index).
struct SyntheticDatasetSpec {
    int image_size = 64;          // square, must suit the network depth
    int count = 32;
    double organ_fraction = 1.0;  // fraction of samples containing shapes
    double noise_sigma = 0.05;
    std::uint64_t seed = 1;

    void validate() const;
};

struct Sample {
    TensorPtr image;  // [3,H,W] — the slice replicated to three channels
    TensorPtr mask;   // [1,H,W], strictly {0,1}
    bool has_organ = false;
};

Sample generate(const SyntheticDatasetSpec& spec, int index);
std::vector<Sample> generate_all(const SyntheticDatasetSpec& spec);

// 2|P∩G| / (|P|+|G|) with pred binarized at threshold; two empty masks
// count as perfect agreement (1).
double dice(const Tensor& pred, const Tensor& mask, double threshold = 0.5);

// false-positive pixel count: pred >= threshold where mask == 0
std::int64_t false_positive_pixels(const Tensor& pred, const Tensor& mask,
                                   double threshold = 0.5);

}  // namespace unet3p
