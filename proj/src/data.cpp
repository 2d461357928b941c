#include "uvmb/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "uvmb/errors.hpp"
#include "uvmb/png_io.hpp"

namespace fs = std::filesystem;

namespace uvmb {

namespace {

float quantize(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return std::round(c * 255.0f) / 255.0f;
}

// Smoothed uniform noise in [lo, hi], shared across channels with small
// per-channel offsets; gives the background a soft ground-like texture.
Tensor<float> background(int H, int W, Rng& rng) {
    Tensor<float> base({H, W});
    rng.fill_uniform(base, 0.0f, 1.0f);
    Tensor<float> blur({H, W});
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            float s = 0;
            int cnt = 0;
            for (int dr = -2; dr <= 2; ++dr)
                for (int dc = -2; dc <= 2; ++dc) {
                    const int rr = r + dr, cc = c + dc;
                    if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
                    s += base.at({rr, cc});
                    ++cnt;
                }
            blur.at({r, c}) = s / static_cast<float>(cnt);
        }
    Tensor<float> img({3, H, W});
    const float choff[3] = {0.00f, 0.03f, -0.02f};
    for (int ch = 0; ch < 3; ++ch)
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c)
                img.at({ch, r, c}) = 0.12f + 0.25f * blur.at({r, c}) + choff[ch] +
                                     0.04f * static_cast<float>(rng.unit());
    return img;
}

struct Rect {
    int r0, c0, r1, c1;  // half-open
};

// Draw the dense-cell texture of one settlement footprint.
void draw_cells(Tensor<float>& img, const Rect& rect, Rng& rng) {
    const int cell = static_cast<int>(rng.randint(3, 5));
    const int gap = 1;
    for (int r = rect.r0; r < rect.r1; r += cell + gap)
        for (int c = rect.c0; c < rect.c1; c += cell + gap) {
            if (rng.unit() < 0.08) continue;  // missing cell
            const float lum = 0.55f + 0.4f * static_cast<float>(rng.unit());
            const float tint = 0.05f * static_cast<float>(rng.uniform(-1.0, 1.0));
            const int jr = static_cast<int>(rng.randint(0, 1));
            const int jc = static_cast<int>(rng.randint(0, 1));
            for (int rr = r + jr; rr < std::min(r + jr + cell, rect.r1); ++rr)
                for (int cc = c + jc; cc < std::min(c + jc + cell, rect.c1); ++cc) {
                    img.at({0, rr, cc}) = lum + tint;
                    img.at({1, rr, cc}) = lum - 0.05f;
                    img.at({2, rr, cc}) = lum - 0.12f + tint;
                }
        }
}

}  // namespace

std::vector<SegSample> synth_dataset(int n, int H, int W, uint64_t seed) {
    if (H % 32 != 0 || W % 32 != 0)
        throw ConfigError("synth_dataset: H and W must be divisible by 32");
    std::vector<SegSample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(seed * 0x9e37ULL + static_cast<uint64_t>(i) + 1);
        SegSample s;
        s.mask = Tensor<float>({H, W});
        std::vector<Rect> rects;
        const int64_t total = static_cast<int64_t>(H) * W;
        for (int attempt = 0; attempt < 64; ++attempt) {
            rects.clear();
            s.mask.fill(0.0f);
            const int nblobs = static_cast<int>(rng.randint(1, 3));
            for (int b = 0; b < nblobs; ++b) {
                const int bh = static_cast<int>(rng.randint(H / 6, H / 2));
                const int bw = static_cast<int>(rng.randint(W / 6, W / 2));
                const int r0 = static_cast<int>(rng.randint(0, std::max(0, H - bh)));
                const int c0 = static_cast<int>(rng.randint(0, std::max(0, W - bw)));
                rects.push_back({r0, c0, std::min(H, r0 + bh), std::min(W, c0 + bw)});
            }
            for (const Rect& rc : rects)
                for (int r = rc.r0; r < rc.r1; ++r)
                    for (int c = rc.c0; c < rc.c1; ++c) s.mask.at({r, c}) = 1.0f;
            int64_t fg = 0;
            for (int64_t k = 0; k < total; ++k) fg += s.mask[k] > 0.5f;
            const double frac = static_cast<double>(fg) / static_cast<double>(total);
            if (frac >= 0.05 && frac <= 0.40) break;
            if (attempt == 63) {
                // Deterministic fallback: one centered footprint at ~20% area.
                rects.assign(1, Rect{H / 4, W / 4, H / 4 + (H * 9) / 20, W / 4 + (W * 9) / 20});
                s.mask.fill(0.0f);
                for (int r = rects[0].r0; r < rects[0].r1; ++r)
                    for (int c = rects[0].c0; c < rects[0].c1; ++c) s.mask.at({r, c}) = 1.0f;
            }
        }
        s.image = background(H, W, rng);
        for (const Rect& rc : rects) draw_cells(s.image, rc, rng);
        for (int64_t k = 0; k < s.image.numel(); ++k) s.image[k] = quantize(s.image[k]);
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

template <typename F>
SegSample transform(const SegSample& s, int out_h, int out_w, F&& map) {
    const int H = static_cast<int>(s.mask.size(0)), W = static_cast<int>(s.mask.size(1));
    SegSample o;
    o.image = Tensor<float>({3, out_h, out_w});
    o.mask = Tensor<float>({out_h, out_w});
    for (int r = 0; r < out_h; ++r)
        for (int c = 0; c < out_w; ++c) {
            const auto [sr, sc] = map(r, c);
            (void)H;
            (void)W;
            o.mask.at({r, c}) = s.mask.at({sr, sc});
            for (int ch = 0; ch < 3; ++ch) o.image.at({ch, r, c}) = s.image.at({ch, sr, sc});
        }
    return o;
}

}  // namespace

SegSample rot90(const SegSample& s) {
    const int h = static_cast<int>(s.mask.size(0)), w = static_cast<int>(s.mask.size(1));
    // counterclockwise: out[r][c] = in[c][w-1-r], output shape (w, h)
    return transform(s, w, h, [&](int r, int c) { return std::pair<int, int>(c, w - 1 - r); });
}

SegSample augment(const SegSample& s, Rng& rng) {
    const bool hflip = rng.coin();
    const bool vflip = rng.coin();
    const int quarter = static_cast<int>(rng.randint(0, 3));
    const int H = static_cast<int>(s.mask.size(0)), W = static_cast<int>(s.mask.size(1));
    SegSample cur = transform(s, H, W, [&](int r, int c) {
        const int sr = vflip ? H - 1 - r : r;
        const int sc = hflip ? W - 1 - c : c;
        return std::pair<int, int>(sr, sc);
    });
    for (int q = 0; q < quarter; ++q) cur = rot90(cur);
    return cur;
}

Tensor<float> image_from_png(const std::string& path) {
    const PngImage p = read_png(path);
    Tensor<float> img({3, p.height, p.width});
    for (int r = 0; r < p.height; ++r)
        for (int c = 0; c < p.width; ++c)
            for (int ch = 0; ch < 3; ++ch)
                img.at({ch, r, c}) =
                    static_cast<float>(p.at(r, c, p.channels == 3 ? ch : 0)) / 255.0f;
    return img;
}

Tensor<float> mask_from_png(const std::string& path) {
    const PngImage p = read_png(path);
    Tensor<float> m({p.height, p.width});
    for (int r = 0; r < p.height; ++r)
        for (int c = 0; c < p.width; ++c) m.at({r, c}) = p.at(r, c, 0) >= 128 ? 1.0f : 0.0f;
    return m;
}

void image_to_png(const std::string& path, const Tensor<float>& image) {
    const int H = static_cast<int>(image.size(1)), W = static_cast<int>(image.size(2));
    PngImage p;
    p.height = H;
    p.width = W;
    p.channels = 3;
    p.pixels.resize(static_cast<size_t>(H) * W * 3);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            for (int ch = 0; ch < 3; ++ch)
                p.at(r, c, ch) = static_cast<uint8_t>(
                    std::lround(std::clamp(image.at({ch, r, c}), 0.0f, 1.0f) * 255.0f));
    write_png(path, p);
}

void mask_to_png(const std::string& path, const Tensor<float>& mask) {
    const int H = static_cast<int>(mask.size(0)), W = static_cast<int>(mask.size(1));
    PngImage p;
    p.height = H;
    p.width = W;
    p.channels = 1;
    p.pixels.resize(static_cast<size_t>(H) * W);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) p.at(r, c, 0) = mask.at({r, c}) > 0.5f ? 255 : 0;
    write_png(path, p);
}

void save_dataset(const std::string& dir, const std::vector<SegSample>& samples) {
    fs::create_directories(dir);
    for (size_t i = 0; i < samples.size(); ++i) {
        char id[16];
        std::snprintf(id, sizeof(id), "%05zu", i);
        image_to_png(dir + "/" + id + ".png", samples[i].image);
        mask_to_png(dir + "/" + id + "_mask.png", samples[i].mask);
    }
}

std::vector<SegSample> load_dataset(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir);
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string name = e.path().filename().string();
        if (name.size() < 4 || name.substr(name.size() - 4) != ".png") continue;
        const std::string stem = name.substr(0, name.size() - 4);
        if (stem.size() >= 5 && stem.substr(stem.size() - 5) == "_mask") continue;
        ids.push_back(stem);
    }
    std::sort(ids.begin(), ids.end());
    std::vector<SegSample> out;
    out.reserve(ids.size());
    for (const std::string& id : ids) {
        const std::string mask_path = dir + "/" + id + "_mask.png";
        if (!fs::exists(mask_path)) throw IoError("missing mask for sample: " + id);
        SegSample s;
        s.image = image_from_png(dir + "/" + id + ".png");
        s.mask = mask_from_png(mask_path);
        if (s.image.size(1) != s.mask.size(0) || s.image.size(2) != s.mask.size(1))
            throw IoError("image/mask size mismatch for sample: " + id);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace uvmb
