#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "derain/image.hpp"
#include "derain/rng.hpp"

using namespace derain;

namespace {

std::filesystem::path temp_dir() {
    auto dir = std::filesystem::temp_directory_path() / "derain_image_tests";
    std::filesystem::create_directories(dir);
    return dir;
}

Image random_image(int c, int h, int w, uint64_t seed) {
    Rng rng(seed);
    Image img = Image::zeros(c, h, w);
    for (auto& p : img.pix) p = static_cast<float>(rng.uniform());
    return img;
}

double max_abs_diff(const Image& a, const Image& b) {
    REQUIRE(a.pix.size() == b.pix.size());
    double m = 0;
    for (size_t i = 0; i < a.pix.size(); ++i)
        m = std::max(m, static_cast<double>(std::fabs(a.pix[i] - b.pix[i])));
    return m;
}

double variance(const Image& img) {
    double mean = 0;
    for (float v : img.pix) mean += v;
    mean /= img.pix.size();
    double var = 0;
    for (float v : img.pix) var += (v - mean) * (v - mean);
    return var / img.pix.size();
}

}  // namespace

TEST_CASE("ppm round-trip stays within quantization error") {
    auto path = (temp_dir() / "rt.ppm").string();
    Image img = random_image(3, 13, 17, 5);
    save_image(img, path);
    Image back = load_image(path);
    CHECK(back.channels == 3);
    CHECK(back.height == 13);
    CHECK(back.width == 17);
    CHECK(max_abs_diff(img, back) <= 1.0 / 255.0 + 1e-7);

    // grayscale goes through P5
    auto gpath = (temp_dir() / "rt.pgm").string();
    Image gray = random_image(1, 6, 9, 7);
    save_image(gray, gpath);
    Image gback = load_image(gpath);
    CHECK(gback.channels == 1);
    CHECK(max_abs_diff(gray, gback) <= 1.0 / 255.0 + 1e-7);
}

TEST_CASE("out-of-range pixels clamp on save") {
    auto path = (temp_dir() / "clamp.ppm").string();
    Image img = Image::zeros(3, 2, 2);
    img.at(0, 0, 0) = 1.2f;
    img.at(1, 0, 0) = -0.3f;
    save_image(img, path);
    Image back = load_image(path);
    CHECK(back.at(0, 0, 0) == 1.0f);
    CHECK(back.at(1, 0, 0) == 0.0f);
}

TEST_CASE("image loader reports distinct failures") {
    CHECK_THROWS_WITH_AS(load_image("/nonexistent/nope.ppm"),
                         doctest::Contains("missing-file"), std::runtime_error);

    auto bad = (temp_dir() / "bad.ppm").string();
    std::ofstream(bad) << "P9 2 2 255\n";
    CHECK_THROWS_WITH_AS(load_image(bad), doctest::Contains("bad-header"),
                         std::runtime_error);

    auto deep = (temp_dir() / "deep.ppm").string();
    std::ofstream(deep) << "P6 2 2 65535\n";
    CHECK_THROWS_WITH_AS(load_image(deep), doctest::Contains("unsupported-depth"),
                         std::runtime_error);

    auto trunc = (temp_dir() / "trunc.ppm").string();
    std::ofstream(trunc) << "P6\n4 4\n255\nxx";
    CHECK_THROWS_WITH_AS(load_image(trunc), doctest::Contains("truncated-payload"),
                         std::runtime_error);

    auto garbled = (temp_dir() / "garbled.ppm").string();
    std::ofstream(garbled) << "P6 two 2 255\n";
    CHECK_THROWS_WITH_AS(load_image(garbled), doctest::Contains("bad-header"),
                         std::runtime_error);
}

TEST_CASE("ppm comments and odd whitespace parse") {
    auto path = (temp_dir() / "comment.pgm").string();
    {
        std::ofstream out(path, std::ios::binary);
        out << "P5 # format\n# a comment line\n 2\t2 # dims\n255\n";
        unsigned char bytes[4] = {0, 85, 170, 255};
        out.write(reinterpret_cast<char*>(bytes), 4);
    }
    Image img = load_image(path);
    CHECK(img.width == 2);
    CHECK(img.at(0, 1, 1) == doctest::Approx(1.0f));
}

TEST_CASE("blur preserves constants and total brightness") {
    Image c = Image::zeros(3, 8, 8);
    for (auto& p : c.pix) p = 0.4f;
    Image b = blur5(c);
    for (float v : b.pix) CHECK(v == doctest::Approx(0.4f));
}

TEST_CASE("pyramid of a constant image has zero bands") {
    Image c = Image::zeros(3, 16, 16);
    for (auto& p : c.pix) p = 0.6f;
    LaplacianPyramid p = pyramid_build(c);
    for (float v : p.band_full.pix) CHECK(v == doctest::Approx(0.0f));
    for (float v : p.band_half.pix) CHECK(v == doctest::Approx(0.0f));
    for (float v : p.top_quarter.pix) CHECK(v == doctest::Approx(0.6f));
}

TEST_CASE("pyramid levels halve and collapse reconstructs the source") {
    Image img = random_image(3, 64, 64, 11);
    LaplacianPyramid p = pyramid_build(img);
    CHECK(p.band_full.height == 64);
    CHECK(p.band_half.height == 32);
    CHECK(p.top_quarter.height == 16);

    Image back = pyramid_collapse(p);
    CHECK(max_abs_diff(img, back) < 1e-5);

    for (uint64_t seed = 20; seed < 25; ++seed) {
        Image r = random_image(3, 64, 64, seed);
        CHECK(max_abs_diff(r, pyramid_collapse(pyramid_build(r))) < 1e-5);
    }
}

TEST_CASE("pyramid rejects dimensions not divisible by 4") {
    Image odd = Image::zeros(3, 18, 16);
    CHECK_THROWS_WITH_AS(pyramid_build(odd), doctest::Contains("bad-dimension"),
                         std::runtime_error);
    LaplacianPyramid p = pyramid_build(random_image(3, 16, 16, 3));
    p.band_half = Image::zeros(3, 4, 4);
    CHECK_THROWS_WITH_AS(pyramid_collapse(p), doctest::Contains("shape-mismatch"),
                         std::runtime_error);
}

TEST_CASE("collapse with zeroed detail band loses variance") {
    Image img = generate_clean(32, 32, 99);
    LaplacianPyramid p = pyramid_build(img);
    std::fill(p.band_full.pix.begin(), p.band_full.pix.end(), 0.0f);
    Image blurred = pyramid_collapse(p);
    CHECK(variance(blurred) < variance(img));
}

TEST_CASE("rain synthesis follows the additive model") {
    Image clean = generate_clean(40, 40, 1);
    RainConfig cfg;
    cfg.streak_count = 60;
    cfg.seed = 42;
    auto [rainy, rain] = synthesize_rain(clean, cfg);

    for (float v : rain.pix) CHECK(v >= 0.0f);
    for (size_t i = 0; i < rainy.pix.size(); ++i) {
        float expect = std::min(1.0f, clean.pix[i] + rain.pix[i]);
        CHECK(rainy.pix[i] == doctest::Approx(expect));
    }

    // some rain must actually land
    float total = 0;
    for (float v : rain.pix) total += v;
    CHECK(total > 0.0f);

    auto [rainy2, rain2] = synthesize_rain(clean, cfg);
    CHECK(rain.pix == rain2.pix);
    CHECK(rainy.pix == rainy2.pix);

    cfg.seed = 43;
    auto [rainy3, rain3] = synthesize_rain(clean, cfg);
    CHECK(rain.pix != rain3.pix);
}

TEST_CASE("zero intensity produces no rain") {
    Image clean = generate_clean(24, 24, 2);
    RainConfig cfg;
    cfg.intensity = 0.0;
    auto [rainy, rain] = synthesize_rain(clean, cfg);
    CHECK(rainy.pix == clean.pix);
    for (float v : rain.pix) CHECK(v == 0.0f);

    cfg.intensity = 1.5;
    CHECK_THROWS_WITH_AS(synthesize_rain(clean, cfg), doctest::Contains("bad-config"),
                         std::runtime_error);
}

TEST_CASE("generated clean images are valid and varied") {
    Image a = generate_clean(32, 48, 10);
    CHECK(a.channels == 3);
    CHECK(a.height == 32);
    CHECK(a.width == 48);
    for (float v : a.pix) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    CHECK(variance(a) > 1e-4);  // not a flat card
    Image b = generate_clean(32, 48, 10);
    CHECK(a.pix == b.pix);
    Image c = generate_clean(32, 48, 11);
    CHECK(a.pix != c.pix);
}

TEST_CASE("crop, flip and multiple-crop helpers") {
    Image img = random_image(3, 10, 14, 77);
    Image c = center_crop_to_multiple(img, 4);
    CHECK(c.height == 8);
    CHECK(c.width == 12);

    Image f = hflip_image(img);
    CHECK(f.at(0, 3, 0) == img.at(0, 3, 13));
    Image ff = hflip_image(f);
    CHECK(ff.pix == img.pix);

    CHECK_THROWS_WITH_AS(crop_image(img, 5, 5, 10, 2), doctest::Contains("bad-dimension"),
                         std::runtime_error);
}

TEST_CASE("batch conversion stacks and round-trips") {
    Image a = random_image(3, 6, 6, 1);
    Image b = random_image(3, 6, 6, 2);
    auto batch = images_to_batch<float>({a, b});
    CHECK(batch.shape() == Shape4{2, 3, 6, 6});
    Image b2 = tensor_to_image(batch, 1);
    CHECK(b2.pix == b.pix);
    Image small = random_image(3, 4, 6, 3);
    CHECK_THROWS_WITH_AS(images_to_batch<float>({a, small}),
                         doctest::Contains("shape-mismatch"), std::runtime_error);
}
