#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "prue/data_io.hpp"
#include "prue/errors.hpp"
#include "prue/rng.hpp"
#include "prue/tensor.hpp"

namespace prue {

// Immutable labeled sample store. Inputs share one per-sample shape and are
// kept in one flat row-major buffer.
template <class T>
struct Dataset {
    Shape input_shape;
    std::size_t num_classes = 0;
    std::string split;  // "train" or "val"
    std::vector<T> data;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t sample_numel() const { return numel(input_shape); }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> n(num_classes, 0);
        for (int y : labels) n[static_cast<std::size_t>(y)]++;
        return n;
    }

    void validate() const {
        if (num_classes < 2) throw ConfigError("dataset: num_classes must be >= 2");
        if (data.size() != size() * sample_numel()) {
            throw ShapeError("dataset: buffer length " + std::to_string(data.size()) +
                             " does not match " + std::to_string(size()) + " samples of shape " +
                             shape_to_string(input_shape));
        }
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
                throw IoError("dataset: label " + std::to_string(labels[i]) + " out of range [0," +
                              std::to_string(num_classes) + ") at sample " + std::to_string(i));
            }
        }
    }
};

template <class T>
struct Batch {
    Tensor<T> x;  // [B, input_shape...]
    std::vector<int> labels;
    std::vector<std::size_t> indices;  // positions in the source dataset
    Tensor<T> soft;                    // optional [B,K] soft-label rows
    bool has_soft = false;
};

template <class T>
Batch<T> make_batch(const Dataset<T>& ds, const std::vector<std::size_t>& indices) {
    std::size_t stride = ds.sample_numel();
    std::vector<T> buf(indices.size() * stride);
    std::vector<int> labels(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::size_t src = indices[i];
        std::copy_n(ds.data.begin() + static_cast<std::ptrdiff_t>(src * stride), stride,
                    buf.begin() + static_cast<std::ptrdiff_t>(i * stride));
        labels[i] = ds.labels[src];
    }
    Shape s{indices.size()};
    s.insert(s.end(), ds.input_shape.begin(), ds.input_shape.end());
    Batch<T> b;
    b.x = Tensor<T>::from_vector(std::move(s), std::move(buf));
    b.labels = std::move(labels);
    b.indices = indices;
    return b;
}

enum class IterOrder { shuffled, class_sorted };

// Index plan for one pass over the dataset. Shuffled order is a seeded
// permutation cut into batchsize chunks. Class-sorted order groups samples
// by label (stable within a class) and cuts at class boundaries so every
// batch is class-pure.
template <class T>
std::vector<std::vector<std::size_t>> batch_plan(const Dataset<T>& ds, std::size_t batchsize,
                                                 IterOrder order, Rng* shuffle_rng = nullptr) {
    if (batchsize < 1) throw ConfigError("batch_plan: batchsize must be >= 1");
    std::vector<std::vector<std::size_t>> plan;
    if (order == IterOrder::shuffled) {
        if (shuffle_rng == nullptr) throw ConfigError("batch_plan: shuffled order needs an rng");
        std::vector<std::size_t> perm(ds.size());
        std::iota(perm.begin(), perm.end(), std::size_t(0));
        shuffle(perm, *shuffle_rng);
        for (std::size_t i = 0; i < perm.size(); i += batchsize) {
            std::size_t end = std::min(perm.size(), i + batchsize);
            plan.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                              perm.begin() + static_cast<std::ptrdiff_t>(end));
        }
    } else {
        for (std::size_t c = 0; c < ds.num_classes; ++c) {
            std::vector<std::size_t> members;
            for (std::size_t i = 0; i < ds.labels.size(); ++i) {
                if (static_cast<std::size_t>(ds.labels[i]) == c) members.push_back(i);
            }
            for (std::size_t i = 0; i < members.size(); i += batchsize) {
                std::size_t end = std::min(members.size(), i + batchsize);
                plan.emplace_back(members.begin() + static_cast<std::ptrdiff_t>(i),
                                  members.begin() + static_cast<std::ptrdiff_t>(end));
            }
        }
    }
    return plan;
}

// Stratified subsample: exactly per_class samples of every class, chosen by
// a seeded within-class shuffle, emitted class by class.
template <class T>
Dataset<T> subset(const Dataset<T>& ds, std::size_t per_class, std::uint64_t seed) {
    auto counts = ds.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] < per_class) {
            throw ConfigError("subset: class " + std::to_string(c) + " has only " +
                              std::to_string(counts[c]) + " samples, requested " +
                              std::to_string(per_class) + " per class");
        }
    }
    Rng rng = derive(seed, "subset");
    Dataset<T> out;
    out.input_shape = ds.input_shape;
    out.num_classes = ds.num_classes;
    out.split = ds.split;
    std::size_t stride = ds.sample_numel();
    out.data.reserve(per_class * ds.num_classes * stride);
    out.labels.reserve(per_class * ds.num_classes);
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < ds.labels.size(); ++i) {
            if (static_cast<std::size_t>(ds.labels[i]) == c) members.push_back(i);
        }
        shuffle(members, rng);
        members.resize(per_class);
        for (std::size_t src : members) {
            out.data.insert(out.data.end(), ds.data.begin() + static_cast<std::ptrdiff_t>(src * stride),
                            ds.data.begin() + static_cast<std::ptrdiff_t>((src + 1) * stride));
            out.labels.push_back(static_cast<int>(c));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic sources
// ---------------------------------------------------------------------------

struct BlobsOptions {
    std::size_t num_classes = 3;
    std::size_t per_class = 100;
    std::size_t dim = 2;
    double separation = 6.0;  // minimum center distance in noise-sigma units
    std::uint64_t seed = 0;
    std::string split = "train";
};

// Gaussian blobs: class centers drawn once per task seed (shared between
// splits), scaled so the minimum pairwise center distance equals
// `separation`; samples are center + unit normal noise.
template <class T>
Dataset<T> make_blobs(const BlobsOptions& opt) {
    if (opt.num_classes < 2) throw ConfigError("make_blobs: need at least 2 classes");
    if (opt.per_class < 1 || opt.dim < 1) throw ConfigError("make_blobs: per_class and dim must be >= 1");
    Rng centers_rng = derive(opt.seed, "synthetic-centers");
    std::vector<double> centers(opt.num_classes * opt.dim);
    for (auto& v : centers) v = centers_rng.normal();
    double min_dist = 0.0;
    bool first = true;
    for (std::size_t a = 0; a < opt.num_classes; ++a) {
        for (std::size_t b = a + 1; b < opt.num_classes; ++b) {
            double d2 = 0;
            for (std::size_t j = 0; j < opt.dim; ++j) {
                double diff = centers[a * opt.dim + j] - centers[b * opt.dim + j];
                d2 += diff * diff;
            }
            double d = std::sqrt(d2);
            if (first || d < min_dist) min_dist = d;
            first = false;
        }
    }
    if (min_dist <= 0) throw NumericError("make_blobs: degenerate centers");
    double scale_factor = opt.separation / min_dist;
    for (auto& v : centers) v *= scale_factor;

    Rng noise_rng = derive(opt.seed, opt.split == "val" ? "synthetic-val" : "synthetic-train");
    Dataset<T> ds;
    ds.input_shape = {opt.dim};
    ds.num_classes = opt.num_classes;
    ds.split = opt.split;
    ds.data.reserve(opt.num_classes * opt.per_class * opt.dim);
    ds.labels.reserve(opt.num_classes * opt.per_class);
    for (std::size_t c = 0; c < opt.num_classes; ++c) {
        for (std::size_t i = 0; i < opt.per_class; ++i) {
            for (std::size_t j = 0; j < opt.dim; ++j) {
                ds.data.push_back(static_cast<T>(centers[c * opt.dim + j] + noise_rng.normal()));
            }
            ds.labels.push_back(static_cast<int>(c));
        }
    }
    return ds;
}

struct ProtoImageOptions {
    std::size_t num_classes = 10;
    std::size_t per_class = 100;
    std::size_t height = 14;
    std::size_t width = 14;
    std::size_t max_shift = 2;   // integer translation radius in pixels
    double noise_sigma = 0.25;   // per-pixel Gaussian noise before clamping
    std::uint64_t seed = 0;
    std::string split = "train";
};

// Prototype images: one smoothed random field per class (shared between
// splits), each sample a randomly shifted copy plus pixel noise, clamped to
// [0,1]. Single channel; input shape {1,H,W}.
template <class T>
Dataset<T> make_proto_images(const ProtoImageOptions& opt) {
    if (opt.num_classes < 2) throw ConfigError("make_proto_images: need at least 2 classes");
    if (opt.height < 4 || opt.width < 4) throw ConfigError("make_proto_images: image too small");
    const std::size_t h = opt.height, w = opt.width, hw = h * w;

    Rng proto_rng = derive(opt.seed, "synthetic-centers");
    std::vector<double> protos(opt.num_classes * hw);
    std::vector<double> field(hw), blurred(hw);
    for (std::size_t c = 0; c < opt.num_classes; ++c) {
        for (auto& v : field) v = proto_rng.normal();
        // Two passes of 3x3 box smoothing (zero boundary) give broad shapes
        // that survive small shifts.
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    double acc = 0;
                    for (int dy = -1; dy <= 1; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                            std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy;
                            std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x) + dx;
                            if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) ||
                                xx >= static_cast<std::ptrdiff_t>(w)) {
                                continue;
                            }
                            acc += field[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
                        }
                    }
                    blurred[y * w + x] = acc / 9.0;
                }
            }
            field = blurred;
        }
        double mean = 0;
        for (double v : field) mean += v;
        mean /= static_cast<double>(hw);
        double var = 0;
        for (double v : field) var += (v - mean) * (v - mean);
        var /= static_cast<double>(hw);
        double sd = std::sqrt(var > 0 ? var : 1.0);
        for (std::size_t i = 0; i < hw; ++i) {
            double z = (field[i] - mean) / sd;
            protos[c * hw + i] = std::clamp(0.5 + 0.25 * z, 0.0, 1.0);
        }
    }

    Rng sample_rng = derive(opt.seed, opt.split == "val" ? "synthetic-val" : "synthetic-train");
    Dataset<T> ds;
    ds.input_shape = {1, h, w};
    ds.num_classes = opt.num_classes;
    ds.split = opt.split;
    ds.data.reserve(opt.num_classes * opt.per_class * hw);
    ds.labels.reserve(opt.num_classes * opt.per_class);
    const std::size_t span = 2 * opt.max_shift + 1;
    for (std::size_t c = 0; c < opt.num_classes; ++c) {
        const double* proto = &protos[c * hw];
        for (std::size_t i = 0; i < opt.per_class; ++i) {
            std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(sample_rng.below(span)) -
                                static_cast<std::ptrdiff_t>(opt.max_shift);
            std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(sample_rng.below(span)) -
                                static_cast<std::ptrdiff_t>(opt.max_shift);
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) - dy;
                    std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) - dx;
                    double v = 0.0;
                    if (sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) &&
                        sx < static_cast<std::ptrdiff_t>(w)) {
                        v = proto[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)];
                    }
                    v += opt.noise_sigma * sample_rng.normal();
                    ds.data.push_back(static_cast<T>(std::clamp(v, 0.0, 1.0)));
                }
            }
            ds.labels.push_back(static_cast<int>(c));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Typed loaders for the binary formats
// ---------------------------------------------------------------------------

struct NormalizeOptions {
    bool standardize = false;
    std::vector<double> mean;  // per channel
    std::vector<double> std;   // per channel
};

template <class T>
void apply_normalization(Dataset<T>& ds, const NormalizeOptions& norm) {
    if (!norm.standardize) return;
    std::size_t channels = ds.input_shape.size() == 3 ? ds.input_shape[0] : 1;
    if (norm.mean.size() != channels || norm.std.size() != channels) {
        throw ConfigError("normalize: need " + std::to_string(channels) +
                          " per-channel mean/std values, got " + std::to_string(norm.mean.size()) + "/" +
                          std::to_string(norm.std.size()));
    }
    for (double s : norm.std) {
        if (s <= 0) throw ConfigError("normalize: std values must be > 0");
    }
    std::size_t per_channel = ds.sample_numel() / channels;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        T* sample = &ds.data[i * ds.sample_numel()];
        for (std::size_t c = 0; c < channels; ++c) {
            T m = static_cast<T>(norm.mean[c]);
            T s = static_cast<T>(norm.std[c]);
            for (std::size_t j = 0; j < per_channel; ++j) {
                sample[c * per_channel + j] = (sample[c * per_channel + j] - m) / s;
            }
        }
    }
}

// IDX image/label pair -> dataset with pixels in [0,1], shape {1,H,W}.
template <class T>
Dataset<T> dataset_from_idx(const std::string& images_path, const std::string& labels_path,
                            std::size_t num_classes, const std::string& split,
                            const NormalizeOptions& norm = {}) {
    RawImages imgs = load_idx_images(images_path);
    auto labels = load_idx_labels(labels_path);
    if (labels.size() != imgs.count) {
        throw IoError("idx pair mismatch: " + std::to_string(imgs.count) + " images in '" + images_path +
                      "' vs " + std::to_string(labels.size()) + " labels in '" + labels_path + "'");
    }
    Dataset<T> ds;
    ds.input_shape = {1, imgs.rows, imgs.cols};
    ds.num_classes = num_classes;
    ds.split = split;
    ds.data.resize(imgs.pixels.size());
    for (std::size_t i = 0; i < imgs.pixels.size(); ++i) {
        ds.data[i] = static_cast<T>(imgs.pixels[i]) / T(255);
    }
    ds.labels.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) {
            throw IoError("'" + labels_path + "': label " + std::to_string(labels[i]) + " >= K=" +
                          std::to_string(num_classes) + " at byte offset " + std::to_string(8 + i));
        }
        ds.labels[i] = static_cast<int>(labels[i]);
    }
    apply_normalization(ds, norm);
    return ds;
}

// CIFAR-10 binary file(s) -> dataset with pixels in [0,1], shape {3,32,32}.
template <class T>
Dataset<T> dataset_from_cifar10(const std::vector<std::string>& paths, const std::string& split,
                                const NormalizeOptions& norm = {}) {
    Dataset<T> ds;
    ds.input_shape = {3, 32, 32};
    ds.num_classes = 10;
    ds.split = split;
    for (const auto& path : paths) {
        RawCifar raw = load_cifar10_binary(path);
        for (std::size_t i = 0; i < raw.count; ++i) {
            if (raw.labels[i] >= 10) {
                throw IoError("'" + path + "': label " + std::to_string(raw.labels[i]) +
                              " >= K=10 at byte offset " + std::to_string(i * 3073));
            }
            ds.labels.push_back(static_cast<int>(raw.labels[i]));
        }
        std::size_t base = ds.data.size();
        ds.data.resize(base + raw.pixels.size());
        for (std::size_t i = 0; i < raw.pixels.size(); ++i) {
            ds.data[base + i] = static_cast<T>(raw.pixels[i]) / T(255);
        }
    }
    if (ds.size() == 0) throw ConfigError("dataset_from_cifar10: no input files");
    apply_normalization(ds, norm);
    return ds;
}

}  // namespace prue
