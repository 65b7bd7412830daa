#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace prue {

// Raw little helpers for the two on-disk dataset formats. Pixel bytes are
// returned untouched; scaling to [0,1] happens in the typed dataset layer.

struct RawImages {
    std::size_t count = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> pixels;  // count * rows * cols
};

// IDX image file: u32 big-endian magic 2051, count, rows, cols, then bytes.
RawImages load_idx_images(const std::string& path);

// IDX label file: u32 big-endian magic 2049, count, then label bytes.
std::vector<std::uint8_t> load_idx_labels(const std::string& path);

void write_idx_images(const std::string& path, std::size_t rows, std::size_t cols,
                      const std::vector<std::uint8_t>& pixels);
void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels);

struct RawCifar {
    std::size_t count = 0;
    std::vector<std::uint8_t> labels;  // count
    std::vector<std::uint8_t> pixels;  // count * 3072, channel-major RGB
};

// CIFAR-10 binary: 3073-byte records of 1 label byte + 3072 pixel bytes.
RawCifar load_cifar10_binary(const std::string& path);

}  // namespace prue
