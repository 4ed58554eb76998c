#include "derain/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "derain/common.hpp"

namespace derain {

namespace {

// One registry drives parsing and dumping so the two can never drift.
struct Field {
    std::string key;
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

[[noreturn]] void bad_value(const std::string& where, const std::string& key,
                            const std::string& value, const std::string& want) {
    fail("bad-config", where + ": key '" + key + "' needs " + want + ", got '" + value + "'");
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

template <typename T, typename Parse>
Field make_field(const std::string& key, T RunConfig::* member, Parse parse,
                 std::function<std::string(const T&)> fmt) {
    return Field{
        key,
        [member, parse, key](RunConfig& cfg, const std::string& value,
                             const std::string& where) {
            cfg.*member = parse(value, where, key);
        },
        [member, fmt](const RunConfig& cfg) { return fmt(cfg.*member); },
    };
}

int parse_int(const std::string& v, const std::string& where, const std::string& key) {
    int out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
        bad_value(where, key, v, "an integer");
    return out;
}

std::uint64_t parse_u64(const std::string& v, const std::string& where, const std::string& key) {
    std::uint64_t out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
        bad_value(where, key, v, "a non-negative integer");
    return out;
}

double parse_double(const std::string& v, const std::string& where, const std::string& key) {
    try {
        size_t used = 0;
        double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        bad_value(where, key, v, "a number");
    }
}

bool parse_bool(const std::string& v, const std::string& where, const std::string& key) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    bad_value(where, key, v, "a boolean (0/1/true/false)");
}

const std::vector<Field>& registry() {
    static const std::vector<Field> fields = [] {
        std::vector<Field> f;
        auto fmt_int = std::function<std::string(const int&)>(
            [](const int& v) { return std::to_string(v); });
        auto fmt_u64 = std::function<std::string(const std::uint64_t&)>(
            [](const std::uint64_t& v) { return std::to_string(v); });
        auto fmt_double = std::function<std::string(const double&)>(
            [](const double& v) { return format_double(v); });
        auto fmt_bool = std::function<std::string(const bool&)>(
            [](const bool& v) { return v ? "true" : "false"; });
        auto fmt_string =
            std::function<std::string(const std::string&)>([](const std::string& v) { return v; });

        auto add_int = [&](const std::string& key, int RunConfig::* m) {
            f.push_back(make_field(key, m, parse_int, fmt_int));
        };
        auto add_double = [&](const std::string& key, double RunConfig::* m) {
            f.push_back(make_field(key, m, parse_double, fmt_double));
        };
        auto add_bool = [&](const std::string& key, bool RunConfig::* m) {
            f.push_back(make_field(key, m, parse_bool, fmt_bool));
        };
        auto add_string = [&](const std::string& key, std::string RunConfig::* m) {
            f.push_back(make_field(
                key, m,
                [](const std::string& v, const std::string&, const std::string&) { return v; },
                fmt_string));
        };

        f.push_back(make_field("seed", &RunConfig::seed, parse_u64, fmt_u64));
        add_int("channels", &RunConfig::channels);
        add_bool("use_m", &RunConfig::use_m);
        add_bool("use_t", &RunConfig::use_t);
        add_bool("cascaded", &RunConfig::cascaded);
        add_bool("mscc_half", &RunConfig::mscc_half);
        add_bool("mscc_quarter", &RunConfig::mscc_quarter);
        add_int("biscsm_patch", &RunConfig::biscsm_patch);
        add_bool("biscsm_up_to_down", &RunConfig::biscsm_up_to_down);
        add_bool("biscsm_down_to_up", &RunConfig::biscsm_down_to_up);
        add_bool("biscsm_position", &RunConfig::biscsm_position);
        add_double("lr", &RunConfig::lr);
        add_int("lr_drop1", &RunConfig::lr_drop1);
        add_int("lr_drop2", &RunConfig::lr_drop2);
        add_double("lr_drop_factor", &RunConfig::lr_drop_factor);
        add_int("epochs", &RunConfig::epochs);
        add_int("batch", &RunConfig::batch);
        add_int("crop", &RunConfig::crop);
        add_double("alpha1", &RunConfig::alpha1);
        add_double("alpha2", &RunConfig::alpha2);
        add_double("alpha3", &RunConfig::alpha3);
        add_double("beta1", &RunConfig::beta1);
        add_double("beta2", &RunConfig::beta2);
        add_double("lambda", &RunConfig::lambda);
        add_int("epoch_real", &RunConfig::epoch_real);
        add_bool("freeze_companions", &RunConfig::freeze_companions);
        add_int("rain_streaks", &RunConfig::rain_streaks);
        add_double("rain_angle", &RunConfig::rain_angle);
        add_int("rain_length", &RunConfig::rain_length);
        add_int("rain_width", &RunConfig::rain_width);
        add_double("rain_intensity", &RunConfig::rain_intensity);
        add_int("gen_count", &RunConfig::gen_count);
        add_int("gen_height", &RunConfig::gen_height);
        add_int("gen_width", &RunConfig::gen_width);
        add_string("data_dir", &RunConfig::data_dir);
        add_string("out_dir", &RunConfig::out_dir);
        return f;
    }();
    return fields;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig preset_config(const std::string& name) {
    if (name == "toy") return RunConfig{};
    if (name == "paper") {
        RunConfig cfg;
        cfg.channels = 20;
        cfg.crop = 128;
        cfg.batch = 12;
        cfg.epochs = 500;
        cfg.epoch_real = 30;
        cfg.rain_streaks = 400;
        cfg.rain_length = 14;
        cfg.gen_height = 128;
        cfg.gen_width = 128;
        return cfg;
    }
    fail("bad-config", "unknown preset '" + name + "'; valid: toy, paper");
}

RunConfig parse_config(const std::string& text, const RunConfig& base,
                       const std::string& source) {
    RunConfig cfg = base;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = source + ":" + std::to_string(line_no);
        std::string body = trim(line);
        if (body.empty() || body[0] == '#') continue;
        const size_t eq = body.find('=');
        if (eq == std::string::npos)
            fail("bad-config", where + ": expected key=value, got '" + body + "'");
        const std::string key = trim(body.substr(0, eq));
        const std::string value = trim(body.substr(eq + 1));
        bool matched = false;
        for (const auto& field : registry()) {
            if (field.key == key) {
                field.set(cfg, value, where);
                matched = true;
                break;
            }
        }
        if (!matched) fail("bad-config", where + ": unknown key '" + key + "'");
    }
    return cfg;
}

RunConfig load_config(const std::string& path, const RunConfig& base) {
    std::ifstream in(path);
    if (!in) fail("missing-file", path);
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config(text.str(), base, path);
}

std::string dump_config(const RunConfig& cfg) {
    std::ostringstream os;
    for (const auto& field : registry()) os << field.key << '=' << field.get(cfg) << '\n';
    return os.str();
}

ModelConfig to_model_config(const RunConfig& cfg) {
    ModelConfig m;
    m.channels = cfg.channels;
    m.train_res = cfg.crop;
    m.use_m = cfg.use_m;
    m.use_t = cfg.use_t;
    m.cascaded = cfg.cascaded;
    m.mscc_half = cfg.mscc_half;
    m.mscc_quarter = cfg.mscc_quarter;
    m.biscsm.patch = cfg.biscsm_patch;
    m.biscsm.up_to_down = cfg.biscsm_up_to_down;
    m.biscsm.down_to_up = cfg.biscsm_down_to_up;
    m.biscsm.position = cfg.biscsm_position;
    return m;
}

TrainConfig to_train_config(const RunConfig& cfg) {
    TrainConfig t;
    t.lr = cfg.lr;
    t.lr_drop1 = cfg.lr_drop1;
    t.lr_drop2 = cfg.lr_drop2;
    t.lr_drop_factor = cfg.lr_drop_factor;
    t.epochs = cfg.epochs;
    t.batch = cfg.batch;
    t.crop = cfg.crop;
    t.alpha1 = cfg.alpha1;
    t.alpha2 = cfg.alpha2;
    t.alpha3 = cfg.alpha3;
    t.beta1 = cfg.beta1;
    t.beta2 = cfg.beta2;
    t.lambda = cfg.lambda;
    t.epoch_real = cfg.epoch_real;
    t.seed = cfg.seed;
    t.freeze_companions_online = cfg.freeze_companions;
    return t;
}

RainConfig to_rain_config(const RunConfig& cfg) {
    RainConfig r;
    r.streak_count = cfg.rain_streaks;
    r.angle_deg = cfg.rain_angle;
    r.length_px = cfg.rain_length;
    r.width_px = cfg.rain_width;
    r.intensity = cfg.rain_intensity;
    r.seed = cfg.seed;
    return r;
}

}  // namespace derain
