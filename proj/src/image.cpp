#include "derain/image.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace derain {

namespace {

// PPM headers are ASCII tokens separated by whitespace; '#' starts a
// comment running to end of line.
int next_header_int(std::istream& in, const std::string& path) {
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (!std::isspace(ch)) break;
    }
    if (ch == EOF) fail("bad-header", "truncated header in " + path);
    std::string tok;
    while (ch != EOF && !std::isspace(ch)) {
        tok.push_back(static_cast<char>(ch));
        ch = in.get();
    }
    try {
        size_t used = 0;
        int value = std::stoi(tok, &used);
        if (used != tok.size() || value < 0) throw std::invalid_argument(tok);
        return value;
    } catch (const std::exception&) {
        fail("bad-header", "expected integer, got \"" + tok + "\" in " + path);
    }
}

}  // namespace

Image load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("missing-file", path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    int channels;
    if (m0 == 'P' && m1 == '6')
        channels = 3;
    else if (m0 == 'P' && m1 == '5')
        channels = 1;
    else
        fail("bad-header", "not a P5/P6 file: " + path);

    const int width = next_header_int(in, path);
    const int height = next_header_int(in, path);
    const int maxval = next_header_int(in, path);
    if (width < 1 || height < 1) fail("bad-header", "non-positive dimensions in " + path);
    if (maxval > 255) fail("unsupported-depth", "16-bit samples in " + path);
    if (maxval < 1) fail("bad-header", "maxval 0 in " + path);
    // the single whitespace byte before the raster was consumed as the
    // maxval token's terminator

    std::vector<unsigned char> raw(static_cast<size_t>(width) * height * channels);
    in.read(reinterpret_cast<char*>(raw.data()), raw.size());
    if (static_cast<size_t>(in.gcount()) != raw.size())
        fail("truncated-payload", "pixel data ends early in " + path);

    // interleaved bytes to planar floats
    Image img = Image::zeros(channels, height, width);
    const float inv = 1.0f / static_cast<float>(maxval);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < channels; ++c)
                img.at(c, y, x) =
                    raw[(static_cast<size_t>(y) * width + x) * channels + c] * inv;
    return img;
}

void save_image(const Image& img, const std::string& path) {
    if (img.channels != 1 && img.channels != 3)
        fail("bad-dimension", "can only save 1- or 3-channel images");
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("unwritable-path", path);
    out << (img.channels == 3 ? "P6" : "P5") << "\n"
        << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.pix.size());
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                float v = std::min(1.0f, std::max(0.0f, img.at(c, y, x)));
                raw[(static_cast<size_t>(y) * img.width + x) * img.channels + c] =
                    static_cast<unsigned char>(v * 255.0f + 0.5f);
            }
    out.write(reinterpret_cast<const char*>(raw.data()), raw.size());
    if (!out) fail("unwritable-path", "write failed for " + path);
}

namespace {

Tensor<float> as_tensor(const Image& img) { return image_to_tensor<float>(img); }

Image as_image(const Tensor<float>& t) { return tensor_to_image(t, 0, false); }

}  // namespace

Image blur5(const Image& img) {
    if (img.height < 3 || img.width < 3)
        fail("bad-dimension", "blur5 needs at least 3x3 input");
    const int c = img.channels;
    std::vector<float> kcol, krow;
    const float taps[5] = {1.f / 16, 4.f / 16, 6.f / 16, 4.f / 16, 1.f / 16};
    for (int ch = 0; ch < c; ++ch) {
        kcol.insert(kcol.end(), taps, taps + 5);
        krow.insert(krow.end(), taps, taps + 5);
    }
    Tensor<float> t = pad_reflect(as_tensor(img), 2, 2, 2, 2);
    t = conv2d<float>(t, Tensor<float>::from_vector({c, 1, 5, 1}, kcol), nullptr, 1, 0, c);
    t = conv2d<float>(t, Tensor<float>::from_vector({c, 1, 1, 5}, krow), nullptr, 1, 0, c);
    return as_image(t);
}

Image downsample2x(const Image& img) { return as_image(down2x_avg(as_tensor(img))); }

Image upsample2x(const Image& img) { return as_image(up2x_bilinear(as_tensor(img))); }

LaplacianPyramid pyramid_build(const Image& b) {
    if (b.height % 4 != 0 || b.width % 4 != 0)
        fail("bad-dimension", "pyramid needs dimensions divisible by 4, got " +
                                  std::to_string(b.height) + "x" + std::to_string(b.width));
    if (b.height < 8 || b.width < 8)
        fail("bad-dimension", "pyramid needs at least 8x8 input");
    Image g1 = downsample2x(blur5(b));
    Image g2 = downsample2x(blur5(g1));
    Image up1 = upsample2x(g1);
    Image up2 = upsample2x(g2);
    LaplacianPyramid p;
    p.band_full = b;
    for (size_t i = 0; i < p.band_full.pix.size(); ++i) p.band_full.pix[i] -= up1.pix[i];
    p.band_half = g1;
    for (size_t i = 0; i < p.band_half.pix.size(); ++i) p.band_half.pix[i] -= up2.pix[i];
    p.top_quarter = std::move(g2);
    return p;
}

Image pyramid_collapse(const LaplacianPyramid& p) {
    const Image& f = p.band_full;
    if (p.band_half.height * 2 != f.height || p.band_half.width * 2 != f.width ||
        p.top_quarter.height * 4 != f.height || p.top_quarter.width * 4 != f.width ||
        p.band_half.channels != f.channels || p.top_quarter.channels != f.channels)
        fail("shape-mismatch", "pyramid level resolutions are inconsistent");
    Image g1 = upsample2x(p.top_quarter);
    for (size_t i = 0; i < g1.pix.size(); ++i) g1.pix[i] += p.band_half.pix[i];
    Image out = upsample2x(g1);
    for (size_t i = 0; i < out.pix.size(); ++i) {
        out.pix[i] += f.pix[i];
        out.pix[i] = std::min(1.0f, std::max(0.0f, out.pix[i]));
    }
    return out;
}

std::pair<Image, Image> synthesize_rain(const Image& clean, const RainConfig& cfg) {
    if (cfg.intensity < 0.0 || cfg.intensity > 1.0)
        fail("bad-config", "rain intensity must lie in [0,1]");
    if (cfg.angle_deg < -20.0 || cfg.angle_deg > 20.0)
        fail("bad-config", "rain angle must lie in [-20,20] degrees");
    if (cfg.streak_count < 0 || cfg.length_px < 1 || cfg.width_px < 1)
        fail("bad-config", "rain streak geometry must be positive");

    Rng rng(cfg.seed);
    const int h = clean.height, w = clean.width;
    // Streaks are stamped with max() so crossings do not over-brighten,
    // then softened with one blur pass; the kernel sums to 1 so the field
    // stays within [0, intensity].
    Image field = Image::zeros(1, h, w);
    for (int s = 0; s < cfg.streak_count; ++s) {
        const double x0 = rng.uniform(0.0, w);
        const double y0 = rng.uniform(-cfg.length_px, h);
        const float bright = static_cast<float>(rng.uniform(0.45, 1.0));
        const double ang = (cfg.angle_deg + rng.uniform(-1.5, 1.5)) * 3.14159265358979 / 180.0;
        const double dx = std::sin(ang), dy = std::cos(ang);
        for (double t = 0; t < cfg.length_px; t += 0.5) {
            for (int off = 0; off < cfg.width_px; ++off) {
                const double po = off - (cfg.width_px - 1) * 0.5;
                const int px = static_cast<int>(std::lround(x0 + dx * t - dy * po));
                const int py = static_cast<int>(std::lround(y0 + dy * t + dx * po));
                if (px < 0 || px >= w || py < 0 || py >= h) continue;
                field.at(0, py, px) = std::max(field.at(0, py, px), bright);
            }
        }
    }
    if (h >= 3 && w >= 3) field = blur5(field);

    Image rain = Image::zeros(clean.channels, h, w);
    Image rainy = clean;
    for (int c = 0; c < clean.channels; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const float r = field.at(0, y, x) * static_cast<float>(cfg.intensity);
                rain.at(c, y, x) = r;
                rainy.at(c, y, x) = std::min(1.0f, clean.at(c, y, x) + r);
            }
    return {std::move(rainy), std::move(rain)};
}

Image generate_clean(int height, int width, std::uint64_t seed) {
    if (height < 1 || width < 1) fail("bad-dimension", "image dims must be positive");
    Rng rng(seed);
    Image img = Image::zeros(3, height, width);

    // shared geometry across channels so edges are chromatically coherent
    struct Blob {
        double cx, cy, rx, ry;
    };
    std::vector<Blob> blobs(4);
    for (auto& b : blobs)
        b = {rng.uniform(0.0, width), rng.uniform(0.0, height),
             rng.uniform(width * 0.08, width * 0.35),
             rng.uniform(height * 0.08, height * 0.35)};
    const double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0);
    const double phase = rng.uniform(0.0, 6.28);

    for (int c = 0; c < 3; ++c) {
        const double gx = rng.uniform(-0.35, 0.35);
        const double gy = rng.uniform(-0.35, 0.35);
        const double base = rng.uniform(0.25, 0.6);
        const double wave = rng.uniform(0.05, 0.18);
        std::vector<double> amp(blobs.size());
        for (auto& a : amp) a = rng.uniform(-0.35, 0.35);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                double v = base + gx * (static_cast<double>(x) / width - 0.5) +
                           gy * (static_cast<double>(y) / height - 0.5) +
                           wave * std::cos(6.28318 * (fx * x / width + fy * y / height) + phase);
                for (size_t i = 0; i < blobs.size(); ++i) {
                    const double ex = (x - blobs[i].cx) / blobs[i].rx;
                    const double ey = (y - blobs[i].cy) / blobs[i].ry;
                    const double d2 = ex * ex + ey * ey;
                    if (d2 < 1.0) v += amp[i] * (1.0 - d2) * (1.0 - d2);
                }
                img.at(c, y, x) = static_cast<float>(std::min(1.0, std::max(0.0, v)));
            }
    }
    return img;
}

Image center_crop_to_multiple(const Image& img, int multiple) {
    if (multiple < 1) fail("bad-config", "crop multiple must be positive");
    const int h = img.height / multiple * multiple;
    const int w = img.width / multiple * multiple;
    if (h < 1 || w < 1)
        fail("bad-dimension", "image smaller than one multiple of " + std::to_string(multiple));
    return crop_image(img, (img.height - h) / 2, (img.width - w) / 2, h, w);
}

Image crop_image(const Image& img, int top, int left, int height, int width) {
    if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > img.height ||
        left + width > img.width)
        fail("bad-dimension", "crop window out of bounds");
    Image out = Image::zeros(img.channels, height, width);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                out.at(c, y, x) = img.at(c, top + y, left + x);
    return out;
}

Image hflip_image(const Image& img) {
    Image out = Image::zeros(img.channels, img.height, img.width);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    return out;
}

}  // namespace derain
