#include <cstring>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>

#include "tkmamba/trainer.hpp"

namespace tkm {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'T', 'K', 'M', 'C', 'K', 'P', 'T', '1'};

json network_to_json(const NetworkConfig& c) {
    return {{"dims", c.dims},
            {"depths", c.depths},
            {"in_channels", c.in_channels},
            {"classes", c.classes},
            {"input_size", c.input_size},
            {"stem_kernel", c.stem_kernel},
            {"embed_dim", c.embed_dim},
            {"embed_groups", c.embed_groups},
            {"head_hidden", c.head_hidden},
            {"controller_hidden", c.controller_hidden},
            {"mamba",
             {{"d_state", c.mamba.d_state},
              {"expand", c.mamba.expand},
              {"conv_kernel", c.mamba.conv_kernel},
              {"dt_rank", c.mamba.dt_rank},
              {"selective", c.mamba.selective},
              {"zoh", c.mamba.zoh == ZohMode::Full ? "full" : "simplified"},
              {"dt_min", c.mamba.dt_min},
              {"dt_max", c.mamba.dt_max},
              {"zero_init_out", c.mamba.zero_init_out}}},
            {"kan",
             {{"expansion", c.kan.expansion},
              {"groups", c.kan.groups},
              {"dropout", c.kan.dropout},
              {"zero_init_out", c.kan.zero_init_out}}}};
}

NetworkConfig network_from_json(const json& j) {
    NetworkConfig c;
    c.dims = j.at("dims").get<std::array<std::size_t, 4>>();
    c.depths = j.at("depths").get<std::array<std::size_t, 4>>();
    c.in_channels = j.at("in_channels");
    c.classes = j.at("classes");
    c.input_size = j.at("input_size");
    c.stem_kernel = j.at("stem_kernel");
    c.embed_dim = j.at("embed_dim");
    c.embed_groups = j.at("embed_groups");
    c.head_hidden = j.at("head_hidden");
    c.controller_hidden = j.at("controller_hidden");
    const auto& m = j.at("mamba");
    c.mamba.d_state = m.at("d_state");
    c.mamba.expand = m.at("expand");
    c.mamba.conv_kernel = m.at("conv_kernel");
    c.mamba.dt_rank = m.at("dt_rank");
    c.mamba.selective = m.at("selective");
    c.mamba.zoh = m.at("zoh").get<std::string>() == "full" ? ZohMode::Full : ZohMode::Simplified;
    c.mamba.dt_min = m.at("dt_min");
    c.mamba.dt_max = m.at("dt_max");
    c.mamba.zero_init_out = m.at("zero_init_out");
    const auto& k = j.at("kan");
    c.kan.expansion = k.at("expansion");
    c.kan.groups = k.at("groups");
    c.kan.dropout = k.at("dropout");
    c.kan.zero_init_out = k.at("zero_init_out");
    return c;
}

json optim_to_json(const OptimConfig& o) {
    return {{"lr", o.lr},         {"weight_decay", o.weight_decay}, {"beta1", o.beta1},
            {"beta2", o.beta2},   {"eps", o.eps},                   {"epochs", o.epochs},
            {"warmup_epochs", o.warmup_epochs}, {"clip_norm", o.clip_norm}};
}

OptimConfig optim_from_json(const json& j) {
    OptimConfig o;
    o.lr = j.at("lr");
    o.weight_decay = j.at("weight_decay");
    o.beta1 = j.at("beta1");
    o.beta2 = j.at("beta2");
    o.eps = j.at("eps");
    o.epochs = j.at("epochs");
    o.warmup_epochs = j.at("warmup_epochs");
    o.clip_norm = j.at("clip_norm");
    return o;
}

template <typename U>
void append_le(std::vector<unsigned char>& out, U value) {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
    Bits bits;
    std::memcpy(&bits, &value, sizeof(U));
    for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<unsigned char>(bits >> (8 * b)));
}

template <typename U>
U read_le(const unsigned char* p) {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) bits |= static_cast<Bits>(p[b]) << (8 * b);
    U value;
    std::memcpy(&value, &bits, sizeof(U));
    return value;
}

struct RawCheckpoint {
    json header;
    std::vector<unsigned char> body;
};

RawCheckpoint read_raw(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw IoError(path + ": not a checkpoint");
    unsigned char lenb[8];
    if (!in.read(reinterpret_cast<char*>(lenb), 8)) throw IoError(path + ": truncated checkpoint");
    const auto len = read_le<std::uint64_t>(lenb);
    if (len > (64u << 20)) throw IoError(path + ": implausible header length");
    std::string h(len, '\0');
    if (!in.read(h.data(), static_cast<std::streamsize>(len))) throw IoError(path + ": truncated header");
    RawCheckpoint raw;
    try {
        raw.header = json::parse(h);
    } catch (const json::exception& e) {
        throw IoError(path + ": malformed header: " + e.what());
    }
    raw.body.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return raw;
}

CheckpointMeta meta_from_header(const json& h, const std::string& path) {
    try {
        CheckpointMeta meta;
        meta.network = network_from_json(h.at("network"));
        meta.optim = optim_from_json(h.at("optim"));
        meta.precision = h.at("precision");
        meta.seed = h.at("seed");
        meta.step = h.at("step");
        meta.class_names = h.at("class_names").get<std::vector<std::string>>();
        return meta;
    } catch (const json::exception& e) {
        throw IoError(path + ": bad checkpoint header: " + e.what());
    }
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const TkMamba<T>& model, const AdamW<T>* opt, const CheckpointMeta& meta) {
    constexpr bool f64 = std::is_same_v<T, double>;
    json h;
    h["format"] = "tkmamba-checkpoint";
    h["version"] = 1;
    h["endianness"] = "little";
    h["network"] = network_to_json(model.config());
    h["optim"] = optim_to_json(meta.optim);
    h["precision"] = f64 ? "f64" : "f32";
    h["seed"] = meta.seed;
    h["step"] = meta.step;
    h["class_names"] = meta.class_names;
    h["tensors"] = json::array();
    std::vector<unsigned char> body;
    auto params = model.parameters();
    for (const auto& [name, t] : params) {
        h["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", body.size()}, {"dtype", f64 ? "f64" : "f32"}});
        for (T v : t.data()) append_le<T>(body, v);
    }
    if (opt) {
        json moments = json::array();
        for (std::size_t i = 0; i < params.size(); ++i) {
            moments.push_back({{"name", params[i].first}, {"offset", body.size()}, {"count", params[i].second.numel()}});
            for (double v : opt->first_moments()[i]) append_le<double>(body, v);
            for (double v : opt->second_moments()[i]) append_le<double>(body, v);
        }
        h["adam"] = {{"steps", opt->steps()}, {"moments", moments}};
    }
    const std::string hs = h.dump();
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write checkpoint " + path);
        std::vector<unsigned char> len;
        append_le<std::uint64_t>(len, hs.size());
        out.write(kMagic, 8);
        out.write(reinterpret_cast<const char*>(len.data()), 8);
        out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
        if (!out) throw IoError("failed writing checkpoint " + path);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint into place at " + path);
}

CheckpointMeta read_checkpoint_meta(const std::string& path) { return meta_from_header(read_raw(path).header, path); }

template <typename T>
void load_checkpoint(const std::string& path, TkMamba<T>& model, AdamW<T>* opt) {
    const auto raw = read_raw(path);
    std::map<std::string, json> table;
    try {
        for (const auto& t : raw.header.at("tensors")) table[t.at("name").get<std::string>()] = t;
    } catch (const json::exception& e) {
        throw IoError(path + ": bad tensor table: " + e.what());
    }
    auto params = model.parameters();
    for (auto& [name, t] : params) {
        std::map<std::string, json>::const_iterator it = table.find(name);
        if (it == table.end()) throw ValidationError(path + ": missing parameter '" + name + "'");
        const auto shape = it->second.at("shape").get<Shape>();
        if (shape != t.shape()) {
            throw ValidationError(path + ": parameter '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                                  shape_str(t.shape()));
        }
        const bool f64 = it->second.at("dtype").get<std::string>() == "f64";
        const std::size_t width = f64 ? 8 : 4, off = it->second.at("offset");
        if (off + t.numel() * width > raw.body.size()) throw IoError(path + ": truncated tensor data");
        auto& data = t.storage();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const unsigned char* p = raw.body.data() + off + i * width;
            data[i] = f64 ? static_cast<T>(read_le<double>(p)) : static_cast<T>(read_le<float>(p));
        }
    }
    if (table.size() != params.size()) throw ValidationError(path + ": checkpoint has parameters the model lacks");
    if (!opt) return;
    if (!raw.header.contains("adam")) throw ValidationError(path + ": checkpoint has no optimizer state");
    const auto& adam = raw.header.at("adam");
    const auto& moments = adam.at("moments");
    if (moments.size() != params.size()) throw ValidationError(path + ": optimizer state does not match the model");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::size_t n = moments[i].at("count"), off = moments[i].at("offset");
        if (moments[i].at("name").get<std::string>() != params[i].first || n != params[i].second.numel()) {
            throw ValidationError(path + ": optimizer state does not match the model");
        }
        if (off + 16 * n > raw.body.size()) throw IoError(path + ": truncated optimizer state");
        auto& m = opt->first_moments()[i];
        auto& v = opt->second_moments()[i];
        for (std::size_t j = 0; j < n; ++j) {
            m[j] = read_le<double>(raw.body.data() + off + 8 * j);
            v[j] = read_le<double>(raw.body.data() + off + 8 * (n + j));
        }
    }
    opt->set_steps(adam.at("steps"));
}

template void save_checkpoint(const std::string&, const TkMamba<float>&, const AdamW<float>*, const CheckpointMeta&);
template void save_checkpoint(const std::string&, const TkMamba<double>&, const AdamW<double>*, const CheckpointMeta&);
template void load_checkpoint(const std::string&, TkMamba<float>&, AdamW<float>*);
template void load_checkpoint(const std::string&, TkMamba<double>&, AdamW<double>*);

}  // namespace tkm
