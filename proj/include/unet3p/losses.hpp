#pragma once

#include <cstdint>
#include <vector>

#include "unet3p/tensor.hpp"

namespace unet3p {

// All constants of the segmentation losses in one place.
struct LossConfig {
    double focal_gamma = 2.0;
    int msssim_scales = 5;           // M; truncated when the image is too small
    int msssim_window = 11;          // Gaussian window side
    double msssim_sigma = 1.5;
    // per-scale exponents, finest scale first; renormalized to sum 1 at use
    std::vector<double> msssim_weights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    double c1 = 0.01 * 0.01;
    double c2 = 0.03 * 0.03;
    double clamp_eps = 1e-7;         // probability clamp before logs

    void validate() const;
};

// Number of scales actually usable for an HxW map: each coarser scale needs
// both dims even (2x2 average pooling) and the result at least window wide.
int msssim_effective_scales(const LossConfig& cfg, std::int64_t h, std::int64_t w);

// mean over pixels of -(1-p_t)^gamma * log(p_t), p_t = p where g=1 else 1-p.
// p is clamped to [eps, 1-eps] first. gamma = 0 reduces to BCE.
TensorPtr focal_loss(const TensorPtr& p, const TensorPtr& g, double gamma,
                     double clamp_eps = 1e-7);

// 1 - prod_m L_m^{beta_m} * CS_m^{gamma_m}, with L_m / CS_m the spatial means
// of the luminance and contrast-structure factors over sliding Gaussian
// windows, and 2x2 average pooling between scales.
TensorPtr ms_ssim_loss(const TensorPtr& p, const TensorPtr& g, const LossConfig& cfg);

// soft IoU: 1 - sum(p*g) / (sum(p) + sum(g) - sum(p*g) + eps)
TensorPtr iou_loss(const TensorPtr& p, const TensorPtr& g, double eps = 1e-7);

// per side output: focal + ms_ssim + iou, mean across side outputs
TensorPtr hybrid_loss(const std::vector<TensorPtr>& side_outputs, const TensorPtr& g,
                      const LossConfig& cfg);

// same, also exposing the averaged components for logging; total is built
// from the very tensors the components come from
struct HybridParts {
    TensorPtr total;
    double focal = 0.0;
    double msssim = 0.0;
    double iou = 0.0;
};
HybridParts hybrid_loss_parts(const std::vector<TensorPtr>& side_outputs, const TensorPtr& g,
                              const LossConfig& cfg);

// mean BCE of the two sigmoid outputs against one-hot (without, with) targets.
// labels[i] = true when sample i contains an organ.
TensorPtr bce_cls_loss(const TensorPtr& cls_probs, const std::vector<bool>& labels,
                       double clamp_eps = 1e-7);

}  // namespace unet3p
