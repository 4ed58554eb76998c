#pragma once

#include <string>

#include "derain/image.hpp"
#include "derain/network.hpp"
#include "derain/training.hpp"

namespace derain {

// Everything a run needs, addressable as flat key=value text. The defaults
// are the desk-scale "toy" preset; preset("paper") switches to the
// full-size hyperparameters.
struct RunConfig {
    std::uint64_t seed = 0;

    // model
    int channels = 8;
    bool use_m = true;
    bool use_t = true;
    bool cascaded = false;
    bool mscc_half = true;
    bool mscc_quarter = true;
    int biscsm_patch = 3;
    bool biscsm_up_to_down = true;
    bool biscsm_down_to_up = true;
    bool biscsm_position = true;

    // optimization
    double lr = 5e-4;
    int lr_drop1 = 300;
    int lr_drop2 = 400;
    double lr_drop_factor = 10.0;
    int epochs = 30;
    int batch = 4;
    int crop = 48;
    double alpha1 = 1.0, alpha2 = 1.0, alpha3 = 1.0;
    double beta1 = 0.05, beta2 = 0.001;
    double lambda = 1e-4;
    int epoch_real = 10;
    bool freeze_companions = false;

    // rain synthesis
    int rain_streaks = 120;
    double rain_angle = 8.0;
    int rain_length = 10;
    int rain_width = 1;
    double rain_intensity = 0.65;

    // clean-image generation
    int gen_count = 10;
    int gen_height = 64;
    int gen_width = 64;

    // paths (usually given as flags instead)
    std::string data_dir;
    std::string out_dir;
};

RunConfig preset_config(const std::string& name);

// Applies key=value lines from text onto base. Errors carry the source
// name and 1-based line number.
RunConfig parse_config(const std::string& text, const RunConfig& base,
                       const std::string& source = "config");
RunConfig load_config(const std::string& path, const RunConfig& base);

// Every field in a fixed order, one key=value per line; parse(dump(c))
// reproduces c.
std::string dump_config(const RunConfig& cfg);

ModelConfig to_model_config(const RunConfig& cfg);
TrainConfig to_train_config(const RunConfig& cfg);
RainConfig to_rain_config(const RunConfig& cfg);

}  // namespace derain
