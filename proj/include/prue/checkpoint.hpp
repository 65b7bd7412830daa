#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "prue/arch.hpp"
#include "prue/errors.hpp"
#include "prue/model.hpp"
#include "prue/pruning.hpp"

// Portable model container: magic "PRUE", one version byte (0x01), a u32
// little-endian length prefix, a UTF-8 JSON header (architecture, dtype,
// config hash, tensor manifest), then tightly packed little-endian buffers.
// Floats travel as raw IEEE-754 bits, masks as one byte per element in
// {0,1}, score vectors as float64 named "score/<method>". Round trips are
// bit-exact.
namespace prue {

inline constexpr char kCheckpointMagic[4] = {'P', 'R', 'U', 'E'};
inline constexpr std::uint8_t kCheckpointVersion = 0x01;

struct TensorEntry {
    std::string name;
    std::string dtype;  // "float32" | "float64" | "u8"
    Shape shape;
    std::uint64_t offset = 0;  // into the buffer region that follows the header
    std::uint64_t nbytes = 0;
};

struct CheckpointHeader {
    ArchitectureSpec arch;
    std::string dtype;        // dtype of the model's value tensors
    std::string config_hash;  // empty when the producer had no config
    std::vector<TensorEntry> manifest;
    nlohmann::json score_meta = nlohmann::json::object();  // method -> {split, sample_count, seed}
};

namespace detail {

std::vector<unsigned char> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes);

std::size_t dtype_size(const std::string& dtype);  // ConfigError on unknown names

nlohmann::json header_to_json(const CheckpointHeader& h);
CheckpointHeader header_from_json(const nlohmann::json& j, const std::string& path);

// Splits a raw file into (header, buffer region). Validates magic, version,
// the length prefix, manifest geometry, and the total byte count.
CheckpointHeader parse_container(const std::string& path, const std::vector<unsigned char>& bytes,
                                 std::size_t& buffers_begin);

// Assembles magic + version + length prefix + header + buffers.
std::vector<unsigned char> build_container(const CheckpointHeader& h,
                                           std::vector<unsigned char> buffers);

template <class T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() {
    return "float32";
}
template <>
inline const char* dtype_name<double>() {
    return "float64";
}

template <class T>
void pack_values(std::vector<unsigned char>& out, const std::vector<T>& v) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (T x : v) {
        Bits b = std::bit_cast<Bits>(x);
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            out.push_back(static_cast<unsigned char>((b >> (8 * i)) & 0xff));
        }
    }
}

template <class T>
std::vector<T> unpack_values(const unsigned char* p, std::size_t count) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    std::vector<T> v(count);
    for (std::size_t i = 0; i < count; ++i) {
        Bits b = 0;
        for (std::size_t k = 0; k < sizeof(T); ++k) {
            b |= static_cast<Bits>(p[i * sizeof(T) + k]) << (8 * k);
        }
        v[i] = std::bit_cast<T>(b);
    }
    return v;
}

}  // namespace detail

template <class T>
void checkpoint_save(const std::string& path, const Model<T>& model,
                     const std::vector<ScoreVector>& scores = {},
                     const std::string& config_hash = "") {
    CheckpointHeader h;
    h.arch = model.spec();
    h.dtype = detail::dtype_name<T>();
    h.config_hash = config_hash;

    std::vector<unsigned char> buffers;
    auto add_entry = [&](const std::string& name, const std::string& dtype, Shape shape,
                         std::uint64_t nbytes) {
        TensorEntry e;
        e.name = name;
        e.dtype = dtype;
        e.shape = std::move(shape);
        e.offset = buffers.size();
        e.nbytes = nbytes;
        h.manifest.push_back(std::move(e));
    };

    for (const auto& p : model.params()) {
        add_entry(p.name, h.dtype, p.value.shape(), p.value.size() * sizeof(T));
        detail::pack_values(buffers, p.value.values());
        if (p.prunable) {
            add_entry("mask/" + p.name, "u8", p.mask.shape(), p.mask.size());
            for (T m : p.mask.values()) {
                if (m != T(0) && m != T(1)) {
                    throw Error("checkpoint_save: mask '" + p.name + "' holds " +
                                std::to_string(static_cast<double>(m)) + ", expected 0 or 1");
                }
                buffers.push_back(m == T(1) ? 1 : 0);
            }
        }
    }
    for (const auto& sv : scores) {
        sv.validate();
        std::string method = to_string(sv.method);
        if (h.score_meta.contains(method)) {
            throw ConfigError("checkpoint_save: duplicate score vector for method '" + method + "'");
        }
        add_entry("score/" + method, "float64", Shape{sv.scores.size()},
                  sv.scores.size() * sizeof(double));
        detail::pack_values(buffers, sv.scores);
        h.score_meta[method] = {{"split", sv.split},
                                {"sample_count", sv.sample_count},
                                {"seed", sv.seed}};
    }

    detail::write_file_bytes(path, detail::build_container(h, std::move(buffers)));
}

template <class T>
struct LoadedCheckpoint {
    Model<T> model;
    std::vector<ScoreVector> scores;  // manifest order
    CheckpointHeader header;
};

// Rebuilds the model from the embedded architecture and restores every
// buffer bit-exactly. When `expected` is given, the stored architecture
// must match it; shapes are never silently adapted.
template <class T>
LoadedCheckpoint<T> checkpoint_load(const std::string& path,
                                    const ArchitectureSpec* expected = nullptr) {
    auto bytes = detail::read_file_bytes(path);
    std::size_t buffers_begin = 0;
    CheckpointHeader h = detail::parse_container(path, bytes, buffers_begin);

    if (h.dtype != detail::dtype_name<T>()) {
        throw ConfigError("checkpoint '" + path + "' stores " + h.dtype + " values, requested " +
                          detail::dtype_name<T>());
    }
    if (expected != nullptr && !(*expected == h.arch)) {
        throw ConfigError("checkpoint '" + path + "' holds architecture '" + h.arch.name +
                          "' but '" + expected->name + "' was requested");
    }

    const unsigned char* base = bytes.data() + buffers_begin;
    auto find = [&](const std::string& name) -> const TensorEntry* {
        for (const auto& e : h.manifest) {
            if (e.name == name) return &e;
        }
        return nullptr;
    };

    LoadedCheckpoint<T> out{Model<T>::build(h.arch, 0), {}, {}};
    for (auto& p : out.model.params()) {
        const TensorEntry* e = find(p.name);
        if (e == nullptr) {
            throw IoError("'" + path + "': manifest has no tensor '" + p.name + "'");
        }
        if (e->shape != p.value.shape()) {
            throw IoError("'" + path + "': tensor '" + p.name + "' has shape " +
                          shape_to_string(e->shape) + ", architecture implies " +
                          shape_to_string(p.value.shape()));
        }
        p.value = Tensor<T>::from_vector(e->shape,
                                         detail::unpack_values<T>(base + e->offset, p.value.size()));
        if (p.prunable) {
            const TensorEntry* me = find("mask/" + p.name);
            if (me == nullptr) {
                throw IoError("'" + path + "': manifest has no tensor 'mask/" + p.name + "'");
            }
            if (me->shape != p.value.shape()) {
                throw IoError("'" + path + "': tensor 'mask/" + p.name + "' has shape " +
                              shape_to_string(me->shape) + ", architecture implies " +
                              shape_to_string(p.value.shape()));
            }
            std::vector<T> mv(p.value.size());
            for (std::size_t i = 0; i < mv.size(); ++i) {
                unsigned char b = base[me->offset + i];
                if (b > 1) {
                    throw IoError("'" + path + "': mask 'mask/" + p.name + "' byte " +
                                  std::to_string(i) + " is " + std::to_string(int(b)) +
                                  ", expected 0 or 1");
                }
                mv[i] = static_cast<T>(b);
            }
            p.mask = Tensor<T>::from_vector(me->shape, std::move(mv));
        }
    }

    for (const auto& e : h.manifest) {
        if (e.name.rfind("score/", 0) != 0) continue;
        std::string method = e.name.substr(6);
        ScoreVector sv;
        sv.method = score_method_from_string(method);
        sv.scores = detail::unpack_values<double>(base + e.offset, numel(e.shape));
        if (h.score_meta.contains(method)) {
            const auto& m = h.score_meta[method];
            sv.split = m.value("split", std::string{});
            sv.sample_count = m.value("sample_count", std::size_t{0});
            sv.seed = m.value("seed", std::uint64_t{0});
        }
        sv.validate();
        out.scores.push_back(std::move(sv));
    }

    out.header = std::move(h);
    return out;
}

}  // namespace prue
