#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "derain/config.hpp"

using namespace derain;

TEST_CASE("the full-size preset pins the published hyperparameters") {
    RunConfig cfg = preset_config("paper");
    CHECK(cfg.channels == 20);
    CHECK(cfg.crop == 128);
    CHECK(cfg.batch == 12);
    CHECK(cfg.epochs == 500);
    CHECK(cfg.lr == 5e-4);
    CHECK(cfg.lr_drop1 == 300);
    CHECK(cfg.lr_drop2 == 400);
    CHECK(cfg.lr_drop_factor == 10.0);
    CHECK(cfg.alpha1 == 1.0);
    CHECK(cfg.alpha2 == 1.0);
    CHECK(cfg.alpha3 == 1.0);
    CHECK(cfg.beta1 == 0.05);
    CHECK(cfg.beta2 == 0.001);
    CHECK(cfg.lambda == 1e-4);
    CHECK(cfg.epoch_real == 30);
}

TEST_CASE("the desk preset keeps every scale above the metric window") {
    RunConfig cfg = preset_config("toy");
    CHECK(cfg.channels == 8);
    CHECK(cfg.batch == 4);
    CHECK(cfg.crop % 8 == 0);
    // quarter-scale targets go through an 11x11 comparison window
    CHECK(cfg.crop / 4 >= 11);

    CHECK_THROWS_WITH_AS(preset_config("huge"), doctest::Contains("bad-config"),
                         std::runtime_error);
}

TEST_CASE("dump and parse are exact inverses") {
    RunConfig cfg = preset_config("paper");
    cfg.seed = 1234;
    cfg.lambda = 3.25e-5;
    cfg.use_t = false;
    cfg.data_dir = "some/dir";
    std::string text = dump_config(cfg);
    RunConfig back = parse_config(text, RunConfig{});
    CHECK(dump_config(back) == text);
    CHECK(back.seed == 1234);
    CHECK(back.lambda == 3.25e-5);
    CHECK(back.use_t == false);
    CHECK(back.data_dir == "some/dir");
}

TEST_CASE("overrides land on top of the base config") {
    RunConfig base = preset_config("toy");
    RunConfig cfg = parse_config("epochs = 7\n\n# comment line\n  lr=0.001  \n", base);
    CHECK(cfg.epochs == 7);
    CHECK(cfg.lr == 0.001);
    CHECK(cfg.channels == base.channels);
}

TEST_CASE("parse errors carry the source line number") {
    RunConfig base;
    CHECK_THROWS_WITH_AS(parse_config("channels=8\nnope=1\n", base, "f.cfg"),
                         doctest::Contains("f.cfg:2"), std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_config("channels=eight\n", base, "f.cfg"),
                         doctest::Contains("f.cfg:1"), std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_config("lr=fast\n", base, "f.cfg"),
                         doctest::Contains("a number"), std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_config("use_m=maybe\n", base, "f.cfg"),
                         doctest::Contains("boolean"), std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_config("just words\n", base, "f.cfg"),
                         doctest::Contains("key=value"), std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_config("nope=1\n", base), doctest::Contains("unknown key"),
                         std::runtime_error);
}

TEST_CASE("derived module configs mirror the run config") {
    RunConfig cfg = preset_config("toy");
    cfg.channels = 6;
    cfg.crop = 56;
    cfg.cascaded = false;
    cfg.use_m = false;
    cfg.biscsm_position = false;
    cfg.lambda = 0.5;
    cfg.seed = 99;
    cfg.rain_streaks = 33;
    cfg.rain_intensity = 0.4;

    ModelConfig m = to_model_config(cfg);
    CHECK(m.channels == 6);
    CHECK(m.train_res == 56);
    CHECK(m.use_m == false);
    CHECK(m.biscsm.position == false);

    TrainConfig t = to_train_config(cfg);
    CHECK(t.crop == 56);
    CHECK(t.lambda == 0.5);
    CHECK(t.seed == 99);

    RainConfig r = to_rain_config(cfg);
    CHECK(r.streak_count == 33);
    CHECK(r.intensity == 0.4);
    CHECK(r.seed == 99);
}

TEST_CASE("config files load from disk with path-tagged errors") {
    auto dir = std::filesystem::temp_directory_path() / "derain_config_tests";
    std::filesystem::create_directories(dir);
    auto path = (dir / "run.cfg").string();
    {
        std::ofstream out(path);
        out << "channels=12\nepochs=3\n";
    }
    RunConfig cfg = load_config(path, RunConfig{});
    CHECK(cfg.channels == 12);
    CHECK(cfg.epochs == 3);

    CHECK_THROWS_WITH_AS(load_config((dir / "absent.cfg").string(), RunConfig{}),
                         doctest::Contains("missing-file"), std::runtime_error);

    {
        std::ofstream out(path);
        out << "channels=12\nbatch=many\n";
    }
    CHECK_THROWS_WITH_AS(load_config(path, RunConfig{}), doctest::Contains(":2"),
                         std::runtime_error);
}
