#include "prue/arch.hpp"

#include <sstream>

#include "prue/errors.hpp"

namespace prue {

std::string layer_to_string(const Layer& layer) {
    std::ostringstream os;
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
        os << "dense " << d->in << "->" << d->out;
    } else if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
        os << "conv2d " << c->in_ch << "->" << c->out_ch << " k" << c->kernel << " pad" << c->pad;
    } else if (std::holds_alternative<ReluLayer>(layer)) {
        os << "relu";
    } else if (std::holds_alternative<AvgPool2Layer>(layer)) {
        os << "avg_pool2";
    } else {
        os << "flatten";
    }
    return os.str();
}

namespace {

[[noreturn]] void pair_error(const ArchitectureSpec& spec, std::size_t i, const std::string& why) {
    std::ostringstream os;
    os << "architecture '" << spec.name << "': layer " << i << " (" << layer_to_string(spec.layers[i])
       << ") cannot follow ";
    if (i == 0) {
        os << "input " << shape_to_string(spec.input_shape);
    } else {
        os << "layer " << (i - 1) << " (" << layer_to_string(spec.layers[i - 1]) << ")";
    }
    os << ": " << why;
    throw ConfigError(os.str());
}

}  // namespace

Shape ArchitectureSpec::validate() const {
    if (input_shape.empty() || numel(input_shape) == 0) {
        throw ConfigError("architecture '" + name + "': empty input shape");
    }
    if (num_classes < 2) {
        throw ConfigError("architecture '" + name + "': num_classes must be >= 2");
    }
    Shape cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Layer& layer = layers[i];
        if (const auto* d = std::get_if<DenseLayer>(&layer)) {
            if (d->in == 0 || d->out == 0) pair_error(*this, i, "zero layer width");
            if (cur.size() != 1) {
                pair_error(*this, i, "dense needs a flat input, got " + shape_to_string(cur));
            }
            if (cur[0] != d->in) {
                pair_error(*this, i,
                           "expected input width " + std::to_string(d->in) + ", got " +
                               std::to_string(cur[0]));
            }
            cur = {d->out};
        } else if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
            if (c->in_ch == 0 || c->out_ch == 0 || c->kernel == 0) {
                pair_error(*this, i, "zero channel count or kernel size");
            }
            if (cur.size() != 3) {
                pair_error(*this, i, "conv2d needs a [C,H,W] input, got " + shape_to_string(cur));
            }
            if (cur[0] != c->in_ch) {
                pair_error(*this, i,
                           "expected " + std::to_string(c->in_ch) + " channels, got " +
                               std::to_string(cur[0]));
            }
            std::ptrdiff_t h = static_cast<std::ptrdiff_t>(cur[1] + 2 * c->pad) -
                               static_cast<std::ptrdiff_t>(c->kernel) + 1;
            std::ptrdiff_t w = static_cast<std::ptrdiff_t>(cur[2] + 2 * c->pad) -
                               static_cast<std::ptrdiff_t>(c->kernel) + 1;
            if (h < 1 || w < 1) pair_error(*this, i, "kernel larger than padded input");
            cur = {c->out_ch, static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
        } else if (std::holds_alternative<AvgPool2Layer>(layer)) {
            if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2) {
                pair_error(*this, i, "avg_pool2 needs a [C,H,W] input with H,W >= 2, got " +
                                         shape_to_string(cur));
            }
            cur = {cur[0], cur[1] / 2, cur[2] / 2};
        } else if (std::holds_alternative<FlattenLayer>(layer)) {
            cur = {numel(cur)};
        }
        // relu keeps the shape
    }
    if (cur.size() != 1 || cur[0] != num_classes) {
        throw ConfigError("architecture '" + name + "': final output shape " + shape_to_string(cur) +
                          " does not match num_classes " + std::to_string(num_classes));
    }
    return cur;
}

nlohmann::json ArchitectureSpec::to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["input_shape"] = input_shape;
    j["num_classes"] = num_classes;
    nlohmann::json ls = nlohmann::json::array();
    for (const Layer& layer : layers) {
        nlohmann::json lj;
        if (const auto* d = std::get_if<DenseLayer>(&layer)) {
            lj["kind"] = "dense";
            lj["in"] = d->in;
            lj["out"] = d->out;
        } else if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
            lj["kind"] = "conv2d";
            lj["in_ch"] = c->in_ch;
            lj["out_ch"] = c->out_ch;
            lj["kernel"] = c->kernel;
            lj["pad"] = c->pad;
        } else if (std::holds_alternative<ReluLayer>(layer)) {
            lj["kind"] = "relu";
        } else if (std::holds_alternative<AvgPool2Layer>(layer)) {
            lj["kind"] = "avg_pool2";
        } else {
            lj["kind"] = "flatten";
        }
        ls.push_back(lj);
    }
    j["layers"] = ls;
    return j;
}

ArchitectureSpec ArchitectureSpec::from_json(const nlohmann::json& j) {
    ArchitectureSpec spec;
    try {
        spec.name = j.at("name").get<std::string>();
        spec.input_shape = j.at("input_shape").get<Shape>();
        spec.num_classes = j.at("num_classes").get<std::size_t>();
        for (const auto& lj : j.at("layers")) {
            std::string kind = lj.at("kind").get<std::string>();
            if (kind == "dense") {
                spec.layers.push_back(
                    DenseLayer{lj.at("in").get<std::size_t>(), lj.at("out").get<std::size_t>()});
            } else if (kind == "conv2d") {
                spec.layers.push_back(Conv2dLayer{lj.at("in_ch").get<std::size_t>(),
                                                  lj.at("out_ch").get<std::size_t>(),
                                                  lj.at("kernel").get<std::size_t>(),
                                                  lj.at("pad").get<std::size_t>()});
            } else if (kind == "relu") {
                spec.layers.push_back(ReluLayer{});
            } else if (kind == "avg_pool2") {
                spec.layers.push_back(AvgPool2Layer{});
            } else if (kind == "flatten") {
                spec.layers.push_back(FlattenLayer{});
            } else {
                throw ConfigError("architecture: unknown layer kind '" + kind + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("architecture: malformed description: ") + e.what());
    }
    return spec;
}

bool is_known_preset(const std::string& name) {
    return name == "mlp-s" || name == "mlp-l" || name == "cnn-s" || name == "cnn-l";
}

ArchitectureSpec make_preset(const std::string& name, const Shape& input_shape, std::size_t num_classes) {
    ArchitectureSpec spec;
    spec.name = name;
    spec.input_shape = input_shape;
    spec.num_classes = num_classes;
    std::size_t d = numel(input_shape);
    if (name == "mlp-s") {
        spec.layers = {FlattenLayer{}, DenseLayer{d, 64}, ReluLayer{}, DenseLayer{64, num_classes}};
    } else if (name == "mlp-l") {
        spec.layers = {FlattenLayer{},       DenseLayer{d, 256},   ReluLayer{},
                       DenseLayer{256, 128}, ReluLayer{},          DenseLayer{128, num_classes}};
    } else if (name == "cnn-s" || name == "cnn-l") {
        if (input_shape.size() != 3) {
            throw ConfigError("architecture '" + name + "': needs a [C,H,W] input shape, got " +
                              shape_to_string(input_shape));
        }
        std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
        std::vector<std::size_t> channels =
            name == "cnn-s" ? std::vector<std::size_t>{8, 16} : std::vector<std::size_t>{16, 32, 64};
        std::size_t in_ch = c;
        for (std::size_t out_ch : channels) {
            spec.layers.push_back(Conv2dLayer{in_ch, out_ch, 3, 1});
            spec.layers.push_back(ReluLayer{});
            spec.layers.push_back(AvgPool2Layer{});
            if (h < 2 || w < 2) {
                throw ConfigError("architecture '" + name + "': input " + shape_to_string(input_shape) +
                                  " too small for " + std::to_string(channels.size()) + " pooling stages");
            }
            h /= 2;
            w /= 2;
            in_ch = out_ch;
        }
        spec.layers.push_back(FlattenLayer{});
        spec.layers.push_back(DenseLayer{in_ch * h * w, num_classes});
    } else {
        throw ConfigError("architecture: unknown preset '" + name +
                          "' (known: mlp-s, mlp-l, cnn-s, cnn-l)");
    }
    spec.validate();
    return spec;
}

}  // namespace prue
