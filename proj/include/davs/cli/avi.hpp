// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <vector>

#include "davs/core/tensor.hpp"

namespace davs::cli {

// Writes an uncompressed RGB24 AVI (BGR bottom-up DIB frames) so generated
// clips open in stock players. `frames` is (T, H, W, 3) in [0, 1]; values
// are clamped and quantized exactly like the PNG writer. The file is
// written atomically. This container is a viewing convenience; the
// per-frame PNGs remain the authoritative output.
void write_avi_rgb24(const std::filesystem::path& path,
                     const core::Tensor<float>& frames, long fps);

}  // namespace davs::cli
