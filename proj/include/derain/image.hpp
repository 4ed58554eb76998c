#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "derain/common.hpp"
#include "derain/rng.hpp"
#include "derain/tensor.hpp"

namespace derain {

// Planar CHW image. Values are reals, nominally in [0,1]; Laplacian bands
// reuse the type with signed values. Load and save clamp to [0,1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> pix;  // channels * height * width

    static Image zeros(int c, int h, int w) {
        if (c < 1 || h < 1 || w < 1) fail("bad-dimension", "image dims must be positive");
        Image img;
        img.height = h;
        img.width = w;
        img.channels = c;
        img.pix.assign(static_cast<size_t>(c) * h * w, 0.0f);
        return img;
    }

    float& at(int c, int y, int x) {
        return pix[(static_cast<size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const {
        return pix[(static_cast<size_t>(c) * height + y) * width + x];
    }
};

// PPM (P6, 3-channel) / PGM (P5, 1-channel), 8-bit only.
Image load_image(const std::string& path);
void save_image(const Image& img, const std::string& path);

struct LaplacianPyramid {
    Image band_full;    // full resolution, signed
    Image band_half;    // half resolution, signed
    Image top_quarter;  // quarter resolution, [0,1]
};

// 5-tap binomial blur [1,4,6,4,1]/16 applied separably with mirrored
// borders (edge sample not repeated).
Image blur5(const Image& img);

Image downsample2x(const Image& img);
Image upsample2x(const Image& img);

LaplacianPyramid pyramid_build(const Image& b);
Image pyramid_collapse(const LaplacianPyramid& p);

struct RainConfig {
    int streak_count = 400;
    double angle_deg = 8.0;  // from vertical, in [-20, 20]
    int length_px = 14;
    int width_px = 1;
    double intensity = 0.65;
    std::uint64_t seed = 0;
};

// rain is a non-negative streak field; rainy = clamp(clean + rain).
std::pair<Image, Image> synthesize_rain(const Image& clean, const RainConfig& cfg);

// Procedural rain-free image: smooth gradients plus soft shapes, so SSIM
// has structure to measure. Deterministic per seed.
Image generate_clean(int height, int width, std::uint64_t seed);

Image center_crop_to_multiple(const Image& img, int multiple);
Image crop_image(const Image& img, int top, int left, int height, int width);
Image hflip_image(const Image& img);

template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
    std::vector<T> v(img.pix.begin(), img.pix.end());
    return Tensor<T>::from_vector({1, img.channels, img.height, img.width}, std::move(v));
}

// Stacks same-shaped images into one (N,C,H,W) batch.
template <typename T>
Tensor<T> images_to_batch(const std::vector<Image>& imgs) {
    if (imgs.empty()) fail("empty-dataset", "cannot build a batch from zero images");
    const Image& first = imgs[0];
    std::vector<T> v;
    v.reserve(imgs.size() * first.pix.size());
    for (const Image& img : imgs) {
        if (img.channels != first.channels || img.height != first.height ||
            img.width != first.width)
            fail("shape-mismatch", "batch images must share dimensions");
        v.insert(v.end(), img.pix.begin(), img.pix.end());
    }
    return Tensor<T>::from_vector(
        {static_cast<int>(imgs.size()), first.channels, first.height, first.width},
        std::move(v));
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t, int batch_index = 0, bool clamp = true) {
    const Shape4 s = t.shape();
    if (batch_index < 0 || batch_index >= s.n)
        fail("bad-dimension", "batch index out of range");
    Image img = Image::zeros(s.c, s.h, s.w);
    const size_t stride = static_cast<size_t>(s.c) * s.h * s.w;
    const T* src = t.data().data() + batch_index * stride;
    for (size_t i = 0; i < stride; ++i) {
        float v = static_cast<float>(src[i]);
        img.pix[i] = clamp ? std::min(1.0f, std::max(0.0f, v)) : v;
    }
    return img;
}

}  // namespace derain
