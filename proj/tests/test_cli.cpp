#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "derain/checkpoint.hpp"
#include "derain/config.hpp"
#include "derain/image.hpp"

using namespace derain;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
    auto dir = fs::temp_directory_path() / "derain_cli_tests";
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return "";
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

struct CmdResult {
    int code = -1;
    std::string out, err;
};

CmdResult run(const std::string& args) {
    static int counter = 0;
    const fs::path out = work_dir() / ("out" + std::to_string(counter) + ".txt");
    const fs::path err = work_dir() / ("err" + std::to_string(counter) + ".txt");
    ++counter;
    const std::string cmd = std::string(DERAINLAB_BIN) + " " + args + " >" + out.string() +
                            " 2>" + err.string();
    const int raw = std::system(cmd.c_str());
    CmdResult r;
    r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

int count_files(const fs::path& dir, const std::string& needle) {
    int n = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().filename().string().find(needle) != std::string::npos) ++n;
    return n;
}

// one shared tiny dataset + checkpoint, built once
struct Fixture {
    fs::path root = work_dir() / "fixture";
    fs::path cleans = root / "cleans";
    fs::path pairs = root / "pairs";
    fs::path train_run = root / "run";
    fs::path tiny_cfg = root / "tiny.cfg";

    Fixture() {
        if (fs::exists(root / "ready")) return;
        fs::create_directories(root);
        {
            std::ofstream out(tiny_cfg);
            out << "channels=2\nuse_m=false\nuse_t=false\nmscc_half=false\n"
                   "mscc_quarter=false\nepochs=2\ncrop=24\nbatch=2\ngen_count=4\n"
                   "gen_height=32\ngen_width=32\nrain_streaks=30\n";
        }
        REQUIRE(run("gen-clean --config " + tiny_cfg.string() + " --out " + cleans.string())
                    .code == 0);
        REQUIRE(run("synth --config " + tiny_cfg.string() + " --data " + cleans.string() +
                    " --out " + pairs.string())
                    .code == 0);
        REQUIRE(run("train --config " + tiny_cfg.string() + " --data " + pairs.string() +
                    " --out " + train_run.string())
                    .code == 0);
        std::ofstream(root / "ready") << "1";
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

}  // namespace

TEST_CASE("synthesis writes three files per clean image plus a manifest") {
    auto& f = fixture();
    CHECK(count_files(f.cleans, ".ppm") == 4);
    CHECK(count_files(f.pairs, "_rain.ppm") == 4);
    CHECK(count_files(f.pairs, "_clean.ppm") == 4);
    CHECK(count_files(f.pairs, "_streaks.ppm") == 4);
    std::string manifest = slurp(f.pairs / "manifest.txt");
    CHECK(std::count(manifest.begin(), manifest.end(), '\n') == 4);
}

TEST_CASE("synthesis is byte-identical for a fixed seed") {
    auto& f = fixture();
    fs::path again = work_dir() / "pairs_again";
    REQUIRE(run("synth --config " + f.tiny_cfg.string() + " --data " + f.cleans.string() +
                " --out " + again.string())
                .code == 0);
    for (const auto& e : fs::directory_iterator(f.pairs)) {
        const auto name = e.path().filename();
        CHECK(slurp(e.path()) == slurp(again / name));
    }
}

TEST_CASE("zero intensity renders black streak images") {
    auto& f = fixture();
    fs::path cfg = work_dir() / "norain.cfg";
    {
        std::ofstream out(cfg);
        out << "rain_intensity=0\n";
    }
    fs::path out_dir = work_dir() / "norain_pairs";
    REQUIRE(run("synth --config " + cfg.string() + " --data " + f.cleans.string() + " --out " +
                out_dir.string())
                .code == 0);
    for (const auto& e : fs::directory_iterator(out_dir)) {
        if (e.path().filename().string().find("_streaks.ppm") == std::string::npos) continue;
        Image img = load_image(e.path().string());
        for (float v : img.pix) CHECK(v == 0.f);
    }
}

TEST_CASE("training leaves a loadable checkpoint and a full metrics log") {
    auto& f = fixture();
    std::string log = slurp(f.train_run / "metrics.tsv");
    CHECK(std::count(log.begin(), log.end(), '\n') == 2);
    for (std::istringstream lines(log); !lines.eof();) {
        std::string line;
        if (!std::getline(lines, line) || line.empty()) break;
        CHECK(std::count(line.begin(), line.end(), '\t') == 4);
    }
    auto model = checkpoint_load((f.train_run / "model.ckpt").string());
    CHECK(model.cfg.channels == 2);
    CHECK(model.cfg.use_m == false);
}

TEST_CASE("deraining keeps the input dimensions") {
    auto& f = fixture();
    fs::path out_dir = work_dir() / "derained";
    fs::path input = f.pairs / "clean_0000_rain.ppm";
    auto r = run("derain --checkpoint " + (f.train_run / "model.ckpt").string() + " --out " +
                 out_dir.string() + " " + input.string());
    REQUIRE(r.code == 0);
    Image in = load_image(input.string());
    Image out = load_image((out_dir / "clean_0000_rain_derained.ppm").string());
    CHECK(out.height == in.height);
    CHECK(out.width == in.width);
    CHECK(out.channels == 3);
}

TEST_CASE("a perfect checkpoint scores identity on ground-truth pairs") {
    ModelConfig mcfg;
    mcfg.channels = 2;
    mcfg.train_res = 24;
    mcfg.use_m = mcfg.use_t = false;
    mcfg.mscc_half = mcfg.mscc_quarter = false;
    auto model = model_init<float>(mcfg, 1);
    for (const auto& p : model.store.all())
        if (p->name.find("head") != std::string::npos)
            std::fill(p->value->begin(), p->value->end(), 0.f);
    fs::path ckpt = work_dir() / "identity.ckpt";
    checkpoint_save(ckpt.string(), model);

    fs::path gt_dir = work_dir() / "gt_pairs";
    fs::create_directories(gt_dir);
    Image clean = generate_clean(32, 32, 5);
    save_image(clean, (gt_dir / "a_rain.ppm").string());
    save_image(clean, (gt_dir / "a_clean.ppm").string());

    fs::path table = work_dir() / "gt_eval.tsv";
    auto r = run("eval --checkpoint " + ckpt.string() + " --data " + gt_dir.string() +
                 " --out " + table.string());
    REQUIRE(r.code == 0);
    std::istringstream rows(slurp(table));
    std::string id;
    std::string psnr;
    double ssim = 0;
    rows >> id >> psnr >> ssim;
    CHECK(id == "a");
    CHECK(psnr == "inf");
    CHECK(ssim == 1.0);
}

TEST_CASE("inspection dumps one map pair per channel and lists sites") {
    auto& f = fixture();
    auto listed = run("inspect --checkpoint " + (f.train_run / "model.ckpt").string() + " --list");
    REQUIRE(listed.code == 0);
    CHECK(listed.out == "b.n11\nb.n12\nb.n13\n");

    fs::path maps = work_dir() / "maps";
    auto r = run("inspect --checkpoint " + (f.train_run / "model.ckpt").string() + " --image " +
                 (f.pairs / "clean_0000_rain.ppm").string() + " --site b.n12 --out " +
                 maps.string());
    REQUIRE(r.code == 0);
    CHECK(count_files(maps, "before") == 2);
    CHECK(count_files(maps, "after") == 2);
    Image map = load_image((maps / "b.n12_before_ch00.pgm").string());
    CHECK(map.channels == 1);
    CHECK(map.height == 8);  // 32px input, bottleneck at 1/4 scale
    CHECK(map.width == 8);

    auto bad = run("inspect --checkpoint " + (f.train_run / "model.ckpt").string() + " --image " +
                   (f.pairs / "clean_0000_rain.ppm").string() + " --site b.n99");
    CHECK(bad.code == 1);
    CHECK(bad.err.find("error: bad-config") == 0);
    CHECK(bad.err.find("b.n11") != std::string::npos);  // lists the valid names
}

TEST_CASE("a constant input yields flat before-map interiors") {
    // Zero-padded convolutions contaminate a border ring (2px at the
    // bottleneck for a 32px input); away from it every pixel runs the
    // identical arithmetic, so the map must be exactly constant there.
    auto& f = fixture();
    fs::path flat_img = work_dir() / "flat.ppm";
    Image gray = Image::zeros(3, 32, 32);
    for (auto& v : gray.pix) v = 0.5f;
    save_image(gray, flat_img.string());
    fs::path maps = work_dir() / "flat_maps";
    REQUIRE(run("inspect --checkpoint " + (f.train_run / "model.ckpt").string() + " --image " +
                flat_img.string() + " --site b.n11 --out " + maps.string())
                .code == 0);
    Image map = load_image((maps / "b.n11_before_ch00.pgm").string());
    REQUIRE(map.height == 8);
    REQUIRE(map.width == 8);
    const float ref = map.pix[2 * map.width + 2];
    for (int y = 2; y < 6; ++y)
        for (int x = 2; x < 6; ++x) CHECK(map.pix[y * map.width + x] == ref);
}

TEST_CASE("online refinement through the command line produces artifacts") {
    auto& f = fixture();
    fs::path reals = work_dir() / "reals";
    fs::create_directories(reals);
    for (int i = 0; i < 2; ++i) {
        Image clean = generate_clean(32, 32, 40 + i);
        RainConfig rc;
        rc.streak_count = 60;
        rc.angle_deg = -15;
        rc.seed = 50 + i;
        save_image(synthesize_rain(clean, rc).first,
                   (reals / ("wild" + std::to_string(i) + ".ppm")).string());
    }
    fs::path cfg = work_dir() / "ft.cfg";
    {
        std::ofstream out(cfg);
        out << "epoch_real=2\nlr=0.0001\ncrop=24\nbatch=1\n";
    }
    fs::path out_dir = work_dir() / "ft_run";
    auto r = run("finetune --checkpoint " + (f.train_run / "model.ckpt").string() + " --data " +
                 reals.string() + " --out " + out_dir.string() + " --config " + cfg.string());
    REQUIRE(r.code == 0);
    CHECK(fs::exists(out_dir / "model.ckpt"));
    CHECK(count_files(out_dir, "_derained.ppm") == 2);
    CHECK(count_files(out_dir, "_pseudo.ppm") == 2);
    std::string log = slurp(out_dir / "finetune.tsv");
    CHECK(std::count(log.begin(), log.end(), '\n') == 2);
}

TEST_CASE("failures exit nonzero with a single-line machine-parsable reason") {
    auto missing = run("eval --checkpoint /no/such.ckpt --data /no/dir");
    CHECK(missing.code == 1);
    CHECK(missing.err.find("error: ") == 0);
    CHECK(std::count(missing.err.begin(), missing.err.end(), '\n') == 1);

    fs::path bad_cfg = work_dir() / "bad.cfg";
    std::ofstream(bad_cfg) << "channels=8\nwhat=1\n";
    auto parse = run("dump-config --config " + bad_cfg.string());
    CHECK(parse.code == 1);
    CHECK(parse.err.find("error: bad-config") == 0);
    CHECK(parse.err.find(":2") != std::string::npos);

    auto preset = run("dump-config --preset giant");
    CHECK(preset.code == 1);
    CHECK(preset.err.find("error: bad-config") == 0);
}

TEST_CASE("the dumped paper preset round-trips through the parser") {
    auto r = run("dump-config --preset paper");
    REQUIRE(r.code == 0);
    RunConfig cfg = parse_config(r.out, RunConfig{});
    CHECK(cfg.channels == 20);
    CHECK(cfg.crop == 128);
    CHECK(cfg.batch == 12);
    CHECK(cfg.lr == 5e-4);
    CHECK(cfg.epochs == 500);
    CHECK(cfg.epoch_real == 30);
}
