#pragma once

#include <string>

#include "unet3p/tensor.hpp"

namespace unet3p {

// TNS1 container: magic "TNS1", u32-LE rank, u32-LE dims, then row-major
// f32-LE values. Values pass through float on disk and widen on load.
void write_tns(const std::string& path, const Tensor& t);
TensorPtr read_tns(const std::string& path);

// Binary PGM (P5, maxval 255): pixel = 255 where prob >= threshold else 0.
// Accepts [H,W], [1,H,W] or [1,1,H,W].
void write_pgm_mask(const std::string& path, const Tensor& prob, double threshold);

}  // namespace unet3p
