#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace uvmb {

struct PngImage {
    int height = 0;
    int width = 0;
    int channels = 0;  // 1 (gray) or 3 (rgb)
    std::vector<uint8_t> pixels;  // row-major, interleaved channels

    uint8_t& at(int r, int c, int ch) {
        return pixels[static_cast<size_t>((r * width + c) * channels + ch)];
    }
    uint8_t at(int r, int c, int ch) const {
        return pixels[static_cast<size_t>((r * width + c) * channels + ch)];
    }
};

// Reads any 8-bit PNG, expanding palettes and dropping alpha; gray stays
// single-channel, everything else becomes RGB. Throws IoError on failure.
PngImage read_png(const std::string& path);

// Writes 8-bit gray (channels == 1) or RGB (channels == 3).
void write_png(const std::string& path, const PngImage& img);

}  // namespace uvmb
