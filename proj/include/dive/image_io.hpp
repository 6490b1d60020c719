#pragma once

#include <string>

#include "dive/tensor.hpp"

namespace dive {

// PNG I/O. Images are (3, H, W) tensors with values in [0, 1].
Tensor read_png(const std::string& path);
void write_png(const std::string& path, const Tensor& image);

// Bilinear resample of a (C, H, W) image to (C, out_h, out_w).
Tensor resize_bilinear(const Tensor& image, int64_t out_h, int64_t out_w);

}  // namespace dive
