#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "prue/tensor.hpp"

namespace prue {

struct DenseLayer {
    std::size_t in = 0;
    std::size_t out = 0;
};

struct Conv2dLayer {
    std::size_t in_ch = 0;
    std::size_t out_ch = 0;
    std::size_t kernel = 0;
    std::size_t pad = 0;  // stride is always 1
};

struct ReluLayer {};
struct AvgPool2Layer {};
struct FlattenLayer {};

using Layer = std::variant<DenseLayer, Conv2dLayer, ReluLayer, AvgPool2Layer, FlattenLayer>;

std::string layer_to_string(const Layer& layer);

// Architecture description: an ordered layer list plus the per-sample input
// shape and class count. Validation simulates shapes through the stack.
struct ArchitectureSpec {
    std::string name;
    Shape input_shape;  // per-sample, e.g. {1, 14, 14} or {784}
    std::size_t num_classes = 0;
    std::vector<Layer> layers;

    // Throws ConfigError naming the offending layer pair on any mismatch;
    // returns the per-sample output shape (must equal {num_classes}).
    Shape validate() const;

    nlohmann::json to_json() const;
    static ArchitectureSpec from_json(const nlohmann::json& j);

    bool operator==(const ArchitectureSpec& other) const {
        return to_json() == other.to_json();
    }
};

// Desk-scale presets: "mlp-s" (flatten-64-K), "mlp-l" (flatten-256-128-K),
// "cnn-s" (conv8-conv16-fc), "cnn-l" (conv16-conv32-conv64-fc). The dense
// head adapts to the input shape; cnn presets require a 3-d input shape.
ArchitectureSpec make_preset(const std::string& name, const Shape& input_shape, std::size_t num_classes);

bool is_known_preset(const std::string& name);

}  // namespace prue
