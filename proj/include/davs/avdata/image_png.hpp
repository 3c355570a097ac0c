// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>

#include "davs/core/tensor.hpp"

namespace davs::avdata {

// Writes an (H, W, 3) float tensor in [0, 1] as 8-bit RGB PNG (atomic).
// Values are clamped and quantized with round-to-nearest.
void write_png_rgb8(const std::filesystem::path& path,
                    const core::Tensor<float>& hwc);

// Reads an RGB(A) 8-bit PNG back to (H, W, 3) floats in [0, 1]. Alpha is
// dropped; grayscale and palette images are expanded.
core::Tensor<float> read_png_rgb8(const std::filesystem::path& path);

}  // namespace davs::avdata
