#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mp/common.hpp"
#include "mp/fusion.hpp"
#include "mp/nn.hpp"

namespace mp::io {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts need byte swapping");

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), std::streamsize(n));
}

inline void put_u8(std::ostream& os, std::uint8_t v) { put_bytes(os, &v, 1); }

inline void put_u32(std::ostream& os, std::uint32_t v) { put_bytes(os, &v, 4); }

inline void put_u64(std::ostream& os, std::uint64_t v) { put_bytes(os, &v, 8); }

inline void get_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
    is.read(static_cast<char*>(p), std::streamsize(n));
    if (std::size_t(is.gcount()) != n)
        throw IoError(std::string("truncated input while reading ") + what);
}

inline std::uint8_t get_u8(std::istream& is, const char* what) {
    std::uint8_t v;
    get_bytes(is, &v, 1, what);
    return v;
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
    std::uint32_t v;
    get_bytes(is, &v, 4, what);
    return v;
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
    std::uint64_t v;
    get_bytes(is, &v, 8, what);
    return v;
}

}  // namespace detail

// --- MPT tensor container ----------------------------------------------------
// magic "MPT1" | dtype u8 (1 = f32, 2 = f64) | ndim u8 | ndim x u64 dims |
// row-major payload, all little-endian.

struct Mpt {
    std::uint8_t dtype = 0;
    std::vector<std::size_t> dims;
    std::vector<float> f32;
    std::vector<double> f64;

    std::size_t numel() const { return checked_product(dims); }
};

inline void write_mpt(std::ostream& os, const std::vector<std::size_t>& dims,
                      const float* data) {
    detail::put_bytes(os, "MPT1", 4);
    detail::put_u8(os, 1);
    MP_REQUIRE(dims.size() <= 255, "mpt: too many dimensions");
    detail::put_u8(os, std::uint8_t(dims.size()));
    for (std::size_t d : dims) detail::put_u64(os, d);
    detail::put_bytes(os, data, checked_product(dims) * sizeof(float));
}

inline void write_mpt(std::ostream& os, const std::vector<std::size_t>& dims,
                      const double* data) {
    detail::put_bytes(os, "MPT1", 4);
    detail::put_u8(os, 2);
    MP_REQUIRE(dims.size() <= 255, "mpt: too many dimensions");
    detail::put_u8(os, std::uint8_t(dims.size()));
    for (std::size_t d : dims) detail::put_u64(os, d);
    detail::put_bytes(os, data, checked_product(dims) * sizeof(double));
}

inline Mpt read_mpt(std::istream& is) {
    char magic[4];
    detail::get_bytes(is, magic, 4, "mpt magic");
    if (std::memcmp(magic, "MPT1", 4) != 0) throw IoError("not an MPT1 container");
    Mpt out;
    out.dtype = detail::get_u8(is, "mpt dtype");
    if (out.dtype != 1 && out.dtype != 2)
        throw IoError("mpt: unknown dtype code " + std::to_string(int(out.dtype)));
    const std::uint8_t ndim = detail::get_u8(is, "mpt ndim");
    out.dims.resize(ndim);
    for (auto& d : out.dims) d = std::size_t(detail::get_u64(is, "mpt dims"));
    const std::size_t n = out.numel();
    if (out.dtype == 1) {
        out.f32.resize(n);
        detail::get_bytes(is, out.f32.data(), n * sizeof(float), "mpt payload");
    } else {
        out.f64.resize(n);
        detail::get_bytes(is, out.f64.data(), n * sizeof(double), "mpt payload");
    }
    return out;
}

template <typename Real>
void save_tensor(const std::filesystem::path& path, const std::vector<std::size_t>& dims,
                 const std::vector<Real>& data) {
    MP_REQUIRE(checked_product(dims) == data.size(), "mpt: dims do not match payload length");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    write_mpt(os, dims, data.data());
    if (!os) throw IoError("write failed: " + path.string());
}

inline Mpt load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    return read_mpt(is);
}

// --- checkpoint container ------------------------------------------------------
// magic "MPCK" | u32 version | u64 config fingerprint | u32 manifest length |
// manifest text | u32 tensor count | per tensor: u32 name length, name bytes,
// inline MPT record.

constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint64_t fingerprint = 0;
    std::string manifest;
    std::vector<std::pair<std::string, Mpt>> tensors;

    const Mpt& tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw IoError("checkpoint has no tensor named '" + name + "'");
    }
};

template <typename Real>
void write_checkpoint(const std::filesystem::path& path, const fusion::ModelConfig& cfg,
                      const nn::ParamStore<Real>& ps,
                      const std::map<std::string, std::string>& extra = {}) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    detail::put_bytes(os, "MPCK", 4);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u64(os, cfg.fingerprint());

    std::ostringstream manifest;
    manifest << cfg.canonical_string();
    manifest << "note.heads=independent\n";
    manifest << "note.slot_gradients=flow_through\n";
    manifest << "scalar_bytes=" << sizeof(Real) << '\n';
    for (const auto& [k, v] : extra) manifest << k << '=' << v << '\n';
    const std::string m = manifest.str();
    detail::put_u32(os, std::uint32_t(m.size()));
    detail::put_bytes(os, m.data(), m.size());

    detail::put_u32(os, std::uint32_t(ps.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& e = ps.entry(i);
        detail::put_u32(os, std::uint32_t(e.name.size()));
        detail::put_bytes(os, e.name.data(), e.name.size());
        write_mpt(os, e.shape, e.value.data());
    }
    if (!os) throw IoError("write failed: " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char magic[4];
    detail::get_bytes(is, magic, 4, "checkpoint magic");
    if (std::memcmp(magic, "MPCK", 4) != 0)
        throw IoError("not an MPCK checkpoint: " + path.string());
    const std::uint32_t version = detail::get_u32(is, "checkpoint version");
    if (version != kCheckpointVersion)
        throw IoError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
    Checkpoint out;
    out.fingerprint = detail::get_u64(is, "checkpoint fingerprint");
    const std::uint32_t mlen = detail::get_u32(is, "manifest length");
    out.manifest.resize(mlen);
    detail::get_bytes(is, out.manifest.data(), mlen, "manifest");
    const std::uint32_t count = detail::get_u32(is, "tensor count");
    out.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t nlen = detail::get_u32(is, "tensor name length");
        std::string name(nlen, '\0');
        detail::get_bytes(is, name.data(), nlen, "tensor name");
        out.tensors.emplace_back(std::move(name), read_mpt(is));
    }
    return out;
}

// Loads checkpoint values into a model built from cfg. The stored fingerprint
// must match, so a checkpoint can never silently drive a different variant.
template <typename Real>
void restore_params(const Checkpoint& ck, const fusion::ModelConfig& cfg,
                    nn::ParamStore<Real>& ps) {
    if (ck.fingerprint != cfg.fingerprint())
        throw ConfigError("checkpoint was trained under a different config (fingerprint " +
                          std::to_string(ck.fingerprint) + " vs " +
                          std::to_string(cfg.fingerprint()) + ")");
    if (ck.tensors.size() != ps.size())
        throw IoError("checkpoint tensor count does not match the model");
    for (const auto& [name, t] : ck.tensors) {
        auto& e = ps.entry(name);
        if (t.dims != e.shape) throw IoError("checkpoint tensor '" + name + "' has wrong shape");
        if (t.dtype == 1) {
            e.value.assign(t.f32.begin(), t.f32.end());
        } else {
            e.value.assign(t.f64.begin(), t.f64.end());
        }
    }
}

// --- flat key=value run configuration -------------------------------------------

class RunConfig {
public:
    static std::map<std::string, std::string> defaults() {
        return {
            {"alpha", "10"},
            {"attn_depth", "2"},
            {"b", "64"},
            {"batch_size", "16"},
            {"checkpoint", ""},
            {"classes", "6"},
            {"conditions", "all"},
            {"dataset", "data/benchmark"},
            {"dot_radius", "3"},
            {"epochs", "40"},
            {"feat_channels", "32"},
            {"feat_seed", "2026"},
            {"features", "data/features"},
            {"human_ref", ""},
            {"jitter", "0.15"},
            {"first_frame_ref_only", "0"},
            {"fsn", "1"},
            {"gamma", "0.2"},
            {"gamma_enabled", "1"},
            {"grid_h", "14"},
            {"grid_w", "14"},
            {"inference_refine", "1"},
            {"jobs", "1"},
            {"k", "6"},
            {"keyframe_repeats", "200"},
            {"keyframe_xs", "1,8,16,24,28,31"},
            {"lr", "1e-4"},
            {"min", "1"},
            {"mu", "0.05"},
            {"num_classes", "6"},
            {"out", "out"},
            {"p", "3"},
            {"per_class", "140"},
            {"px", "224"},
            {"seed", "1"},
            {"single_scale", "0"},
            {"slot_loss", "1"},
            {"slots_enabled", "1"},
            {"strides", "1,2,4,8"},
            {"t", "32"},
            {"tau", "0.001"},
            {"temporal_augmentation", "0"},
            {"time_embedding", "1"},
            {"train_condition", "RGB"},
            {"val_fraction", "0.25"},
            {"video", ""},
            {"weight_decay", "0.01"},
        };
    }

    RunConfig() : kv_(defaults()) {}

    void set(const std::string& key, const std::string& value) {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw ConfigError("unknown config key '" + key + "'");
        it->second = value;
    }

    void load_line(const std::string& raw, const std::string& where) {
        std::string line = raw;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        const auto begin = line.find_first_not_of(" \t\r\n");
        if (begin == std::string::npos) return;
        const auto end = line.find_last_not_of(" \t\r\n");
        line = line.substr(begin, end - begin + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(where + ": expected key=value, got '" + line + "'");
        std::string key = line.substr(0, eq);
        if (auto kend = key.find_last_not_of(" \t"); kend != std::string::npos)
            key.erase(kend + 1);
        std::string value = line.substr(eq + 1);
        if (auto vstart = value.find_first_not_of(" \t"); vstart != std::string::npos)
            value.erase(0, vstart);
        else
            value.clear();
        set(key, value);
    }

    void load_file(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config file: " + path.string());
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            load_line(line, path.string() + ":" + std::to_string(lineno));
        }
    }

    const std::string& str(const std::string& key) const {
        auto it = kv_.find(key);
        MP_CONFIG_REQUIRE(it != kv_.end(), "unknown config key '" + key + "'");
        return it->second;
    }

    double dbl(const std::string& key) const {
        const std::string& s = str(key);
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            MP_CONFIG_REQUIRE(used == s.size(), "trailing junk");
            return v;
        } catch (const ConfigError&) {
            throw;
        } catch (...) {
            throw ConfigError("config key '" + key + "': '" + s + "' is not a number");
        }
    }

    std::size_t size_of(const std::string& key) const {
        const double v = dbl(key);
        MP_CONFIG_REQUIRE(v >= 0 && v == double(std::size_t(v)),
                          "config key '" + key + "' must be a nonnegative integer");
        return std::size_t(v);
    }

    std::uint64_t seed_of(const std::string& key) const {
        const double v = dbl(key);
        MP_CONFIG_REQUIRE(v >= 0 && v == double(std::uint64_t(v)),
                          "config key '" + key + "' must be a nonnegative integer");
        return std::uint64_t(v);
    }

    bool flag(const std::string& key) const {
        const std::string& s = str(key);
        if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
        if (s == "0" || s == "false" || s == "off" || s == "no") return false;
        throw ConfigError("config key '" + key + "': '" + s + "' is not a boolean");
    }

    std::vector<std::size_t> sizes(const std::string& key) const {
        const std::string& s = str(key);
        std::vector<std::size_t> out;
        std::stringstream ss(s);
        std::string part;
        while (std::getline(ss, part, ',')) {
            MP_CONFIG_REQUIRE(!part.empty(), "config key '" + key + "': empty list entry");
            try {
                out.push_back(std::size_t(std::stoull(part)));
            } catch (...) {
                throw ConfigError("config key '" + key + "': '" + part + "' is not an integer");
            }
        }
        MP_CONFIG_REQUIRE(!out.empty(), "config key '" + key + "' must not be empty");
        return out;
    }

    // Sorted key=value lines; parsing this back reproduces the config.
    std::string echo() const {
        std::ostringstream os;
        for (const auto& [k, v] : kv_) os << k << '=' << v << '\n';
        return os.str();
    }

    void write_echo(const std::filesystem::path& path) const {
        std::ofstream os(path);
        if (!os) throw IoError("cannot write config echo: " + path.string());
        os << echo();
        if (!os) throw IoError("write failed: " + path.string());
    }

private:
    std::map<std::string, std::string> kv_;
};

inline fusion::ModelConfig model_from_config(const RunConfig& rc) {
    fusion::ModelConfig cfg;
    cfg.num_classes = rc.size_of("num_classes");
    cfg.T = rc.size_of("t");
    cfg.grid_h = rc.size_of("grid_h");
    cfg.grid_w = rc.size_of("grid_w");
    cfg.K = rc.size_of("k");
    cfg.P = rc.size_of("p");
    cfg.B = rc.size_of("b");
    cfg.strides = rc.sizes("strides");
    cfg.tau = rc.dbl("tau");
    cfg.gamma = rc.dbl("gamma");
    cfg.mu = rc.dbl("mu");
    cfg.alpha = rc.dbl("alpha");
    cfg.attn_depth = rc.size_of("attn_depth");
    cfg.min_enabled = rc.flag("min");
    cfg.fsn_enabled = rc.flag("fsn");
    cfg.single_scale = rc.flag("single_scale");
    cfg.slots_enabled = rc.flag("slots_enabled");
    cfg.gamma_enabled = rc.flag("gamma_enabled");
    cfg.temporal_augmentation = rc.flag("temporal_augmentation");
    cfg.time_embedding = rc.flag("time_embedding");
    cfg.slot_loss = rc.flag("slot_loss");
    cfg.inference_refine = rc.flag("inference_refine");
    cfg.first_frame_ref_only = rc.flag("first_frame_ref_only");
    cfg.validate();
    return cfg;
}

}  // namespace mp::io
