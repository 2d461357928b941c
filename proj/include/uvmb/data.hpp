#pragma once

#include <string>
#include <vector>

#include "uvmb/rng.hpp"
#include "uvmb/tensor.hpp"

namespace uvmb {

struct SegSample {
    Tensor<float> image;  // [3,H,W], values in [0,1] quantized to 1/255 steps
    Tensor<float> mask;   // [H,W], values in {0,1}
};

// Deterministic synthetic scenes: textured background plus 1-3 clusters of
// densely packed bright cells on rectangular footprints; the mask is the
// union of the footprints. Foreground fraction is kept within [5%, 40%].
std::vector<SegSample> synth_dataset(int n, int H, int W, uint64_t seed);

// Independent 50% horizontal flip, 50% vertical flip, and a rotation drawn
// uniformly from {0, 90, 180, 270} degrees; the same transform is applied to
// image and mask. 90/270-degree rotations swap H and W.
SegSample augment(const SegSample& s, Rng& rng);

// One counterclockwise quarter turn; (H,W) becomes (W,H).
SegSample rot90(const SegSample& s);

// Paired files: <id>.png (RGB) and <id>_mask.png (8-bit, 0 background /
// 255 foreground). Loading sorts by id for a deterministic order.
void save_dataset(const std::string& dir, const std::vector<SegSample>& samples);
std::vector<SegSample> load_dataset(const std::string& dir);

// PNG <-> tensor helpers (quantization: byte = round(255*v)).
Tensor<float> image_from_png(const std::string& path);
Tensor<float> mask_from_png(const std::string& path);
void image_to_png(const std::string& path, const Tensor<float>& image);
void mask_to_png(const std::string& path, const Tensor<float>& mask);

}  // namespace uvmb
