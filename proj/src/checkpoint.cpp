#include "prue/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace prue {
namespace detail {

std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    if (f.bad()) throw IoError("read failure on '" + path + "'");
    return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw IoError("write failure on '" + path + "'");
}

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "float32") return 4;
    if (dtype == "float64") return 8;
    if (dtype == "u8") return 1;
    throw ConfigError("checkpoint: unknown dtype '" + dtype + "'");
}

nlohmann::json header_to_json(const CheckpointHeader& h) {
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& e : h.manifest) {
        manifest.push_back({{"name", e.name},
                            {"dtype", e.dtype},
                            {"shape", e.shape},
                            {"offset", e.offset},
                            {"nbytes", e.nbytes}});
    }
    return {{"arch", h.arch.to_json()},
            {"dtype", h.dtype},
            {"config_hash", h.config_hash},
            {"manifest", manifest},
            {"scores", h.score_meta}};
}

CheckpointHeader header_from_json(const nlohmann::json& j, const std::string& path) {
    CheckpointHeader h;
    try {
        h.arch = ArchitectureSpec::from_json(j.at("arch"));
        h.dtype = j.at("dtype").get<std::string>();
        h.config_hash = j.value("config_hash", std::string{});
        h.score_meta = j.value("scores", nlohmann::json::object());
        for (const auto& e : j.at("manifest")) {
            TensorEntry t;
            t.name = e.at("name").get<std::string>();
            t.dtype = e.at("dtype").get<std::string>();
            t.shape = e.at("shape").get<Shape>();
            t.offset = e.at("offset").get<std::uint64_t>();
            t.nbytes = e.at("nbytes").get<std::uint64_t>();
            h.manifest.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("'" + path + "': malformed checkpoint header: " + e.what());
    }
    return h;
}

CheckpointHeader parse_container(const std::string& path, const std::vector<unsigned char>& bytes,
                                 std::size_t& buffers_begin) {
    constexpr std::size_t frame = 4 + 1 + 4;  // magic + version + length prefix
    if (bytes.size() < frame) {
        throw IoError("'" + path + "': expected at least " + std::to_string(frame) +
                      " bytes, got " + std::to_string(bytes.size()));
    }
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw IoError("'" + path + "': bad magic, not a PRUE checkpoint");
    }
    if (bytes[4] != kCheckpointVersion) {
        throw IoError("'" + path + "': unsupported format version " + std::to_string(int(bytes[4])) +
                      " (expected " + std::to_string(int(kCheckpointVersion)) + ")");
    }
    std::uint32_t header_len = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        header_len |= static_cast<std::uint32_t>(bytes[5 + i]) << (8 * i);
    }
    if (bytes.size() < frame + header_len) {
        throw IoError("'" + path + "': expected " + std::to_string(frame + header_len) +
                      " bytes of frame and header, got " + std::to_string(bytes.size()));
    }

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin() + frame, bytes.begin() + frame + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("'" + path + "': checkpoint header is not valid JSON: " + e.what());
    }
    CheckpointHeader h = header_from_json(j, path);

    // Buffers are packed back to back; each entry must sit exactly where the
    // previous one ended and declare the byte count its shape implies.
    std::uint64_t cursor = 0;
    for (const auto& e : h.manifest) {
        std::uint64_t implied = numel(e.shape) * dtype_size(e.dtype);
        if (e.nbytes != implied) {
            throw IoError("'" + path + "': tensor '" + e.name + "' declares " +
                          std::to_string(e.nbytes) + " bytes but shape " +
                          shape_to_string(e.shape) + " of " + e.dtype + " implies " +
                          std::to_string(implied));
        }
        if (e.offset != cursor) {
            throw IoError("'" + path + "': tensor '" + e.name + "' at offset " +
                          std::to_string(e.offset) + ", expected " + std::to_string(cursor));
        }
        cursor += e.nbytes;
    }
    std::uint64_t expected_total = frame + header_len + cursor;
    if (bytes.size() != expected_total) {
        throw IoError("'" + path + "': expected " + std::to_string(expected_total) +
                      " bytes, got " + std::to_string(bytes.size()));
    }
    buffers_begin = frame + header_len;
    return h;
}

std::vector<unsigned char> build_container(const CheckpointHeader& h,
                                           std::vector<unsigned char> buffers) {
    std::string header = header_to_json(h).dump();
    if (header.size() > 0xffffffffull) {
        throw IoError("checkpoint header too large: " + std::to_string(header.size()) + " bytes");
    }
    std::vector<unsigned char> out;
    out.reserve(4 + 1 + 4 + header.size() + buffers.size());
    out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 4);
    out.push_back(kCheckpointVersion);
    auto len = static_cast<std::uint32_t>(header.size());
    for (std::size_t i = 0; i < 4; ++i) {
        out.push_back(static_cast<unsigned char>((len >> (8 * i)) & 0xff));
    }
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), buffers.begin(), buffers.end());
    return out;
}

}  // namespace detail
}  // namespace prue
