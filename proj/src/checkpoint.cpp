#include "derain/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "derain/common.hpp"

namespace derain {

namespace {

constexpr char kMagic[8] = {'H', 'C', 'N', 'M', 'S', 'C', 'C', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size())
            fail("truncated-payload", "checkpoint ends " + std::to_string(pos + n - buf.size()) +
                                          " bytes short");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

float f32_from_bits(std::uint32_t bits) {
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

CheckpointEntry scalar_entry(const std::string& name, float value) {
    return {name, {1, 1, 1, 1}, {value}};
}

int meta_int(const std::unordered_map<std::string, float>& meta, const std::string& key) {
    auto it = meta.find(key);
    if (it == meta.end()) fail("bad-header", "checkpoint is missing " + key);
    return static_cast<int>(it->second + 0.5f);
}

}  // namespace

void checkpoint_write(const std::string& path, const Checkpoint& ck) {
    std::string manifest;
    std::string payload;
    manifest.append(kMagic, 8);
    put_u32(manifest, kVersion);
    put_u32(manifest, static_cast<std::uint32_t>(ck.entries.size()));
    std::uint64_t offset = 0;
    for (const auto& e : ck.entries) {
        if (e.values.size() != static_cast<size_t>(e.shape.numel()))
            fail("shape-mismatch", "entry " + e.name + " holds " +
                                       std::to_string(e.values.size()) + " values for shape " +
                                       e.shape.str());
        put_u32(manifest, static_cast<std::uint32_t>(e.name.size()));
        manifest += e.name;
        put_u32(manifest, static_cast<std::uint32_t>(e.shape.n));
        put_u32(manifest, static_cast<std::uint32_t>(e.shape.c));
        put_u32(manifest, static_cast<std::uint32_t>(e.shape.h));
        put_u32(manifest, static_cast<std::uint32_t>(e.shape.w));
        put_u64(manifest, offset);
        for (float v : e.values) put_f32(payload, v);
        offset += 4ull * e.values.size();
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("unwritable-path", path);
    out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) fail("unwritable-path", path);
}

Checkpoint checkpoint_read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("missing-file", path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r{buf};

    std::string magic = r.bytes(8);
    if (std::memcmp(magic.data(), kMagic, 8) != 0)
        fail("bad-magic", path + " is not a model checkpoint");
    std::uint32_t version = r.u32();
    if (version != kVersion)
        fail("version-mismatch", "checkpoint format " + std::to_string(version) +
                                     ", this build reads " + std::to_string(kVersion));
    std::uint32_t count = r.u32();
    if (count > 1000000) fail("bad-header", "implausible entry count");

    struct RawEntry {
        std::string name;
        Shape4 shape;
        std::uint64_t offset;
    };
    std::vector<RawEntry> raw(count);
    for (auto& e : raw) {
        std::uint32_t name_len = r.u32();
        if (name_len > 4096) fail("bad-header", "implausible name length");
        e.name = r.bytes(name_len);
        e.shape.n = static_cast<int>(r.u32());
        e.shape.c = static_cast<int>(r.u32());
        e.shape.h = static_cast<int>(r.u32());
        e.shape.w = static_cast<int>(r.u32());
        if (e.shape.numel() <= 0) fail("bad-header", "entry " + e.name + " has empty shape");
        e.offset = r.u64();
    }

    const size_t payload_start = r.pos;
    const size_t payload_size = buf.size() - payload_start;
    Checkpoint ck;
    ck.entries.reserve(count);
    for (const auto& e : raw) {
        const size_t bytes = 4ull * static_cast<size_t>(e.shape.numel());
        if (e.offset + bytes > payload_size)
            fail("truncated-payload", "entry " + e.name + " extends past end of file");
        CheckpointEntry out{e.name, e.shape, {}};
        out.values.resize(static_cast<size_t>(e.shape.numel()));
        const char* src = buf.data() + payload_start + e.offset;
        for (size_t i = 0; i < out.values.size(); ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[4 * i + b]))
                        << (8 * b);
            out.values[i] = f32_from_bits(bits);
        }
        ck.entries.push_back(std::move(out));
    }
    return ck;
}

Checkpoint checkpoint_pack(const CollaborativeModel<float>& model,
                           const std::vector<CheckpointEntry>& extras) {
    const ModelConfig& cfg = model.cfg;
    Checkpoint ck;
    ck.entries.push_back(scalar_entry("meta.channels", static_cast<float>(cfg.channels)));
    ck.entries.push_back(scalar_entry("meta.train_res", static_cast<float>(cfg.train_res)));
    ck.entries.push_back(scalar_entry("meta.use_m", cfg.use_m ? 1.f : 0.f));
    ck.entries.push_back(scalar_entry("meta.use_t", cfg.use_t ? 1.f : 0.f));
    ck.entries.push_back(scalar_entry("meta.cascaded", cfg.cascaded ? 1.f : 0.f));
    ck.entries.push_back(scalar_entry("meta.mscc_half", cfg.mscc_half ? 1.f : 0.f));
    ck.entries.push_back(scalar_entry("meta.mscc_quarter", cfg.mscc_quarter ? 1.f : 0.f));
    ck.entries.push_back(scalar_entry("meta.patch", static_cast<float>(cfg.biscsm.patch)));
    ck.entries.push_back(scalar_entry("meta.up_to_down", cfg.biscsm.up_to_down ? 1.f : 0.f));
    ck.entries.push_back(scalar_entry("meta.down_to_up", cfg.biscsm.down_to_up ? 1.f : 0.f));
    ck.entries.push_back(scalar_entry("meta.position", cfg.biscsm.position ? 1.f : 0.f));
    for (const auto& p : model.store.all())
        ck.entries.push_back({p->name, p->shape, *p->value});
    for (const auto& e : extras) ck.entries.push_back(e);
    return ck;
}

ModelConfig checkpoint_config(const Checkpoint& ck) {
    std::unordered_map<std::string, float> meta;
    for (const auto& e : ck.entries)
        if (e.name.rfind("meta.", 0) == 0 && e.values.size() == 1) meta[e.name] = e.values[0];
    ModelConfig cfg;
    cfg.channels = meta_int(meta, "meta.channels");
    cfg.train_res = meta_int(meta, "meta.train_res");
    cfg.use_m = meta_int(meta, "meta.use_m") != 0;
    cfg.use_t = meta_int(meta, "meta.use_t") != 0;
    cfg.cascaded = meta_int(meta, "meta.cascaded") != 0;
    cfg.mscc_half = meta_int(meta, "meta.mscc_half") != 0;
    cfg.mscc_quarter = meta_int(meta, "meta.mscc_quarter") != 0;
    cfg.biscsm.patch = meta_int(meta, "meta.patch");
    cfg.biscsm.up_to_down = meta_int(meta, "meta.up_to_down") != 0;
    cfg.biscsm.down_to_up = meta_int(meta, "meta.down_to_up") != 0;
    cfg.biscsm.position = meta_int(meta, "meta.position") != 0;
    return cfg;
}

void checkpoint_restore(CollaborativeModel<float>& model, const Checkpoint& ck,
                        std::vector<CheckpointEntry>* extras_out) {
    std::unordered_set<std::string> filled;
    for (const auto& e : ck.entries) {
        if (e.name.rfind("meta.", 0) == 0) continue;
        ParamPtr<float> p = model.store.find(e.name);
        if (!p) {
            if (e.name.rfind("opt.", 0) == 0 || e.name.rfind("online.", 0) == 0) {
                if (extras_out) extras_out->push_back(e);
                continue;
            }
            fail("unknown-param", "checkpoint entry " + e.name +
                                      " does not match any parameter of this model");
        }
        if (!(e.shape == p->shape))
            fail("shape-mismatch", "parameter " + e.name + " is " + p->shape.str() +
                                       " in the model but " + e.shape.str() +
                                       " in the checkpoint");
        *p->value = e.values;
        filled.insert(e.name);
    }
    for (const auto& p : model.store.all())
        if (!filled.count(p->name))
            fail("missing-param", "checkpoint has no entry for parameter " + p->name);
}

void checkpoint_save(const std::string& path, const CollaborativeModel<float>& model,
                     const std::vector<CheckpointEntry>& extras) {
    checkpoint_write(path, checkpoint_pack(model, extras));
}

CollaborativeModel<float> checkpoint_load(const std::string& path,
                                          std::vector<CheckpointEntry>* extras_out) {
    Checkpoint ck = checkpoint_read(path);
    CollaborativeModel<float> model = model_init<float>(checkpoint_config(ck), 0);
    checkpoint_restore(model, ck, extras_out);
    return model;
}

}  // namespace derain
