#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "derain/checkpoint.hpp"
#include "derain/config.hpp"
#include "derain/metrics.hpp"
#include "derain/training.hpp"

namespace fs = std::filesystem;
using namespace derain;

namespace {

struct CommonFlags {
    std::string preset = "toy";
    std::string config_path;
    std::string checkpoint_path;
    std::string data_dir;
    std::string out_path;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool with_checkpoint) {
    cmd->add_option("--preset", flags.preset, "Base preset: toy or paper");
    cmd->add_option("--config", flags.config_path, "key=value overrides file");
    if (with_checkpoint)
        cmd->add_option("--checkpoint", flags.checkpoint_path, "Model checkpoint file");
    cmd->add_option("--data", flags.data_dir, "Input data directory");
    cmd->add_option("--out", flags.out_path, "Output file or directory");
}

RunConfig resolve_config(const CommonFlags& flags) {
    RunConfig cfg = preset_config(flags.preset);
    if (!flags.config_path.empty()) cfg = load_config(flags.config_path, cfg);
    if (!flags.data_dir.empty()) cfg.data_dir = flags.data_dir;
    if (!flags.out_path.empty()) cfg.out_dir = flags.out_path;
    return cfg;
}

std::string require_dir(const std::string& value, const std::string& what) {
    if (value.empty()) fail("bad-config", "this command needs " + what);
    return value;
}

CollaborativeModel<float> require_model(const CommonFlags& flags,
                                        std::vector<CheckpointEntry>* extras = nullptr) {
    if (flags.checkpoint_path.empty())
        fail("bad-config", "this command needs --checkpoint");
    return checkpoint_load(flags.checkpoint_path, extras);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("unwritable-path", path);
    out << text;
}

int cmd_gen_clean(const CommonFlags& flags) {
    RunConfig cfg = resolve_config(flags);
    const std::string out_dir = require_dir(cfg.out_dir, "--out");
    fs::create_directories(out_dir);
    for (int i = 0; i < cfg.gen_count; ++i) {
        std::ostringstream name;
        name << "clean_" << std::setw(4) << std::setfill('0') << i << ".ppm";
        Image img = generate_clean(cfg.gen_height, cfg.gen_width, cfg.seed + i);
        save_image(img, (fs::path(out_dir) / name.str()).string());
    }
    std::cout << "wrote " << cfg.gen_count << " clean images to " << out_dir << "\n";
    return 0;
}

int cmd_synth(const CommonFlags& flags) {
    RunConfig cfg = resolve_config(flags);
    const std::string in_dir = require_dir(cfg.data_dir, "--data with clean images");
    const std::string out_dir = require_dir(cfg.out_dir, "--out");
    std::vector<std::string> ids;
    std::vector<Image> cleans = load_images_sorted(in_dir, &ids);
    fs::create_directories(out_dir);
    std::ostringstream manifest;
    for (size_t i = 0; i < cleans.size(); ++i) {
        RainConfig rain = to_rain_config(cfg);
        rain.seed = cfg.seed + i;  // per-image stream, deterministic overall
        auto [rainy, streaks] = synthesize_rain(cleans[i], rain);
        save_image(rainy, (fs::path(out_dir) / (ids[i] + "_rain.ppm")).string());
        save_image(cleans[i], (fs::path(out_dir) / (ids[i] + "_clean.ppm")).string());
        save_image(streaks, (fs::path(out_dir) / (ids[i] + "_streaks.ppm")).string());
        manifest << ids[i] << '\t' << ids[i] + "_rain.ppm" << '\t' << ids[i] + "_clean.ppm"
                 << '\n';
    }
    write_text((fs::path(out_dir) / "manifest.txt").string(), manifest.str());
    std::cout << "synthesized " << cleans.size() << " pairs into " << out_dir << "\n";
    return 0;
}

int cmd_train(const CommonFlags& flags) {
    RunConfig cfg = resolve_config(flags);
    const std::string data_dir = require_dir(cfg.data_dir, "--data with (rainy, clean) pairs");
    const std::string out_dir = cfg.out_dir.empty() ? "run" : cfg.out_dir;
    fs::create_directories(out_dir);

    std::vector<TrainPair> pairs = load_pairs(data_dir);
    CollaborativeModel<float> model;
    AdamState<float> opt;
    if (!flags.checkpoint_path.empty()) {
        std::vector<CheckpointEntry> extras;
        model = checkpoint_load(flags.checkpoint_path, &extras);
        adam_restore(opt, model.store, extras);
    } else {
        model = model_init<float>(to_model_config(cfg), cfg.seed);
    }

    const std::string ckpt_path = (fs::path(out_dir) / "model.ckpt").string();
    const std::string log_path = (fs::path(out_dir) / "metrics.tsv").string();
    std::ofstream log_file(log_path, std::ios::trunc);
    if (!log_file) fail("unwritable-path", log_path);

    train_supervised(
        model, pairs, to_train_config(cfg), opt,
        [&](const std::string& line) {
            log_file << line << '\n';
            log_file.flush();
            std::cout << line << "\n";
        },
        [&](int) { checkpoint_save(ckpt_path, model, adam_entries(opt, model.store)); });
    if (to_train_config(cfg).epochs == 0)
        checkpoint_save(ckpt_path, model, adam_entries(opt, model.store));
    std::cout << "checkpoint: " << ckpt_path << "\nmetrics: " << log_path << "\n";
    return 0;
}

int cmd_finetune(const CommonFlags& flags) {
    RunConfig cfg = resolve_config(flags);
    const std::string data_dir = require_dir(cfg.data_dir, "--data with rainy images");
    const std::string out_dir = cfg.out_dir.empty() ? "finetune_run" : cfg.out_dir;
    fs::create_directories(out_dir);

    std::vector<CheckpointEntry> extras;
    CollaborativeModel<float> model = require_model(flags, &extras);
    AdamState<float> opt;
    adam_restore(opt, model.store, extras);

    std::vector<std::string> ids;
    std::vector<Image> images = load_images_sorted(data_dir, &ids);

    const std::string log_path = (fs::path(out_dir) / "finetune.tsv").string();
    std::ofstream log_file(log_path, std::ios::trunc);
    if (!log_file) fail("unwritable-path", log_path);
    FinetuneResult result = finetune_online(model, images, ids, to_train_config(cfg), opt,
                                            out_dir, [&](const std::string& line) {
                                                log_file << line << '\n';
                                                std::cout << line << "\n";
                                            });

    for (size_t i = 0; i < images.size(); ++i)
        save_image(result.labels[i], (fs::path(out_dir) / (ids[i] + "_derained.ppm")).string());
    checkpoint_save((fs::path(out_dir) / "model.ckpt").string(), model,
                    adam_entries(opt, model.store));
    std::cout << "fine-tuned checkpoint and derained images in " << out_dir << "\n";
    return 0;
}

int cmd_eval(const CommonFlags& flags) {
    RunConfig cfg = resolve_config(flags);
    const std::string data_dir = require_dir(cfg.data_dir, "--data with (rainy, clean) pairs");
    CollaborativeModel<float> model = require_model(flags);
    EvalResult result = evaluate(model, load_pairs(data_dir));
    std::cout << format_eval_table(result);
    if (!cfg.out_dir.empty()) {
        std::ostringstream rows;
        rows << std::setprecision(10);
        for (const auto& r : result.rows)
            rows << r.id << '\t' << r.psnr << '\t' << r.ssim << '\n';
        rows << "mean\t" << result.mean_psnr << '\t' << result.mean_ssim << '\n';
        write_text(cfg.out_dir, rows.str());
    }
    return 0;
}

int cmd_derain(const CommonFlags& flags, const std::vector<std::string>& inputs) {
    CollaborativeModel<float> model = require_model(flags);
    if (inputs.empty()) fail("bad-config", "give at least one rainy image path");
    const std::string out_dir = flags.out_path.empty() ? "." : flags.out_path;
    fs::create_directories(out_dir);
    for (const auto& in_path : inputs) {
        Image derained = derain_image(model, load_image(in_path));
        const std::string out_file =
            (fs::path(out_dir) / (fs::path(in_path).stem().string() + "_derained.ppm"))
                .string();
        save_image(derained, out_file);
        std::cout << out_file << "\n";
    }
    return 0;
}

// Per-channel min-max normalization to [0,1]; a flat channel maps to zeros.
Image normalize_channels(const Tensor<float>& feats, int channel) {
    const Shape4 s = feats.shape();
    Image img = Image::zeros(1, s.h, s.w);
    const auto& d = feats.data();
    const size_t base = static_cast<size_t>(channel) * s.h * s.w;
    float lo = d[base], hi = d[base];
    for (size_t i = 0; i < static_cast<size_t>(s.h) * s.w; ++i) {
        lo = std::min(lo, d[base + i]);
        hi = std::max(hi, d[base + i]);
    }
    const float span = hi - lo;
    for (size_t i = 0; i < static_cast<size_t>(s.h) * s.w; ++i)
        img.pix[i] = span > 0 ? (d[base + i] - lo) / span : 0.f;
    return img;
}

int cmd_inspect(const CommonFlags& flags, const std::string& image_path,
                const std::string& site, bool list_sites) {
    CollaborativeModel<float> model = require_model(flags);
    const std::vector<std::string> sites = biscsm_sites(model.cfg);
    if (list_sites) {
        for (const auto& s : sites) std::cout << s << "\n";
        return 0;
    }
    if (image_path.empty()) fail("bad-config", "this command needs --image");
    bool known = false;
    for (const auto& s : sites) known |= (s == site);
    if (!known) {
        std::string valid;
        for (const auto& s : sites) valid += (valid.empty() ? "" : ", ") + s;
        fail("bad-config", "unknown site '" + site + "'; valid: " + valid);
    }
    const std::string out_dir = flags.out_path.empty() ? "." : flags.out_path;
    fs::create_directories(out_dir);

    Image rainy = load_image(image_path);
    Tensor<float> captured_before, captured_after;
    InspectSink<float> sink = [&](const std::string& where, bool after,
                                  const Tensor<float>& feats) {
        if (where != site) return;
        (after ? captured_after : captured_before) = feats;
    };
    // mirror the inference padding so any valid image size works
    const int h = rainy.height, w = rainy.width;
    const int th = std::max(((h + 7) / 8) * 8, 24), tw = std::max(((w + 7) / 8) * 8, 24);
    Tensor<float> t = image_to_tensor<float>(rainy);
    if (th != h || tw != w) t = pad_reflect(t, 0, th - h, 0, tw - w);
    ForwardContext<float> ctx(nullptr);
    model_forward(model, t, ctx, &sink);

    const std::string tag = site;
    for (int c = 0; c < model.cfg.channels; ++c) {
        std::ostringstream before_name, after_name;
        before_name << tag << "_before_ch" << std::setw(2) << std::setfill('0') << c << ".pgm";
        after_name << tag << "_after_ch" << std::setw(2) << std::setfill('0') << c << ".pgm";
        save_image(normalize_channels(captured_before, c),
                   (fs::path(out_dir) / before_name.str()).string());
        save_image(normalize_channels(captured_after, c),
                   (fs::path(out_dir) / after_name.str()).string());
    }
    std::cout << "wrote " << 2 * model.cfg.channels << " feature maps to " << out_dir << "\n";
    return 0;
}

int cmd_dump_config(const CommonFlags& flags) {
    std::cout << dump_config(resolve_config(flags));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale rain removal laboratory"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::vector<std::string> derain_inputs;
    std::string inspect_image, inspect_site;
    bool inspect_list = false;

    auto* synth = app.add_subcommand("synth", "Render rain streaks over clean images");
    add_common(synth, flags, false);
    auto* gen = app.add_subcommand("gen-clean", "Generate procedural clean images");
    add_common(gen, flags, false);
    auto* train = app.add_subcommand("train", "Supervised training on (rainy, clean) pairs");
    add_common(train, flags, true);
    auto* finetune =
        app.add_subcommand("finetune", "Self-supervised refinement on unpaired rainy images");
    add_common(finetune, flags, true);
    auto* eval = app.add_subcommand("eval", "PSNR/SSIM table over a paired dataset");
    add_common(eval, flags, true);
    auto* derain_cmd = app.add_subcommand("derain", "Derain individual images");
    add_common(derain_cmd, flags, true);
    derain_cmd->add_option("inputs", derain_inputs, "Rainy image files");
    auto* inspect = app.add_subcommand("inspect", "Dump feature maps around a mining block");
    add_common(inspect, flags, true);
    inspect->add_option("--image", inspect_image, "Rainy image to push through the model");
    inspect->add_option("--site", inspect_site, "Mining site name (see --list)");
    inspect->add_flag("--list", inspect_list, "List the available sites");
    auto* dump = app.add_subcommand("dump-config", "Print the resolved configuration");
    add_common(dump, flags, false);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(flags);
        if (gen->parsed()) return cmd_gen_clean(flags);
        if (train->parsed()) return cmd_train(flags);
        if (finetune->parsed()) return cmd_finetune(flags);
        if (eval->parsed()) return cmd_eval(flags);
        if (derain_cmd->parsed()) return cmd_derain(flags, derain_inputs);
        if (inspect->parsed()) return cmd_inspect(flags, inspect_image, inspect_site, inspect_list);
        if (dump->parsed()) return cmd_dump_config(flags);
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
    return 0;
}
