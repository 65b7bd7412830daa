#include "prue/data_io.hpp"

#include <fstream>

#include "prue/errors.hpp"

namespace prue {

namespace {

std::vector<std::uint8_t> read_all(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) throw IoError("read failure on '" + path + "'");
    return bytes;
}

std::uint32_t read_u32_be(const std::vector<std::uint8_t>& b, std::size_t off) {
    return (static_cast<std::uint32_t>(b[off]) << 24) | (static_cast<std::uint32_t>(b[off + 1]) << 16) |
           (static_cast<std::uint32_t>(b[off + 2]) << 8) | static_cast<std::uint32_t>(b[off + 3]);
}

void write_u32_be(std::ofstream& f, std::uint32_t v) {
    char buf[4] = {static_cast<char>((v >> 24) & 0xff), static_cast<char>((v >> 16) & 0xff),
                   static_cast<char>((v >> 8) & 0xff), static_cast<char>(v & 0xff)};
    f.write(buf, 4);
}

void check_magic(const std::string& path, const std::vector<std::uint8_t>& bytes,
                 std::uint32_t expected, std::size_t header_len) {
    if (bytes.size() < header_len) {
        throw IoError("'" + path + "': truncated header, expected " + std::to_string(header_len) +
                      " bytes but file ends at byte offset " + std::to_string(bytes.size()));
    }
    std::uint32_t magic = read_u32_be(bytes, 0);
    if (magic != expected) {
        throw IoError("'" + path + "': bad magic " + std::to_string(magic) + " (expected " +
                      std::to_string(expected) + ") at byte offset 0");
    }
}

}  // namespace

RawImages load_idx_images(const std::string& path) {
    auto bytes = read_all(path);
    check_magic(path, bytes, 2051, 16);
    RawImages out;
    out.count = read_u32_be(bytes, 4);
    out.rows = read_u32_be(bytes, 8);
    out.cols = read_u32_be(bytes, 12);
    std::size_t expected = 16 + out.count * out.rows * out.cols;
    if (bytes.size() != expected) {
        throw IoError("'" + path + "': expected " + std::to_string(expected) + " bytes for " +
                      std::to_string(out.count) + " images, got " + std::to_string(bytes.size()) +
                      " (file ends at byte offset " + std::to_string(bytes.size()) + ")");
    }
    out.pixels.assign(bytes.begin() + 16, bytes.end());
    return out;
}

std::vector<std::uint8_t> load_idx_labels(const std::string& path) {
    auto bytes = read_all(path);
    check_magic(path, bytes, 2049, 8);
    std::size_t count = read_u32_be(bytes, 4);
    std::size_t expected = 8 + count;
    if (bytes.size() != expected) {
        throw IoError("'" + path + "': expected " + std::to_string(expected) + " bytes for " +
                      std::to_string(count) + " labels, got " + std::to_string(bytes.size()) +
                      " (file ends at byte offset " + std::to_string(bytes.size()) + ")");
    }
    return std::vector<std::uint8_t>(bytes.begin() + 8, bytes.end());
}

void write_idx_images(const std::string& path, std::size_t rows, std::size_t cols,
                      const std::vector<std::uint8_t>& pixels) {
    if (rows == 0 || cols == 0 || pixels.size() % (rows * cols) != 0) {
        throw IoError("write_idx_images: pixel buffer of " + std::to_string(pixels.size()) +
                      " bytes is not a multiple of " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    write_u32_be(f, 2051);
    write_u32_be(f, static_cast<std::uint32_t>(pixels.size() / (rows * cols)));
    write_u32_be(f, static_cast<std::uint32_t>(rows));
    write_u32_be(f, static_cast<std::uint32_t>(cols));
    f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!f) throw IoError("write failure on '" + path + "'");
}

void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    write_u32_be(f, 2049);
    write_u32_be(f, static_cast<std::uint32_t>(labels.size()));
    f.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
    if (!f) throw IoError("write failure on '" + path + "'");
}

RawCifar load_cifar10_binary(const std::string& path) {
    auto bytes = read_all(path);
    const std::size_t record = 3073;
    if (bytes.empty() || bytes.size() % record != 0) {
        throw IoError("'" + path + "': size " + std::to_string(bytes.size()) +
                      " is not a positive multiple of 3073-byte records (truncated record starts at byte "
                      "offset " +
                      std::to_string(bytes.size() - bytes.size() % record) + ")");
    }
    RawCifar out;
    out.count = bytes.size() / record;
    out.labels.reserve(out.count);
    out.pixels.reserve(out.count * 3072);
    for (std::size_t i = 0; i < out.count; ++i) {
        const std::uint8_t* rec = &bytes[i * record];
        out.labels.push_back(rec[0]);
        out.pixels.insert(out.pixels.end(), rec + 1, rec + record);
    }
    return out;
}

}  // namespace prue
