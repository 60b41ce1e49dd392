#pragma once

#include "iconlab/transformer.hpp"

#include <json.hpp>

#include <filesystem>

namespace iconlab {

// Checkpoint layout: the magic line "ICONLAB-CKPT/1\n", an 8-byte little-endian
// header length, a JSON header {config, meta, tensors:[{name, shape, offset}]},
// then every tensor as little-endian float64 in header order.

nlohmann::json config_to_json(const TransformerConfig& c);
TransformerConfig config_from_json(const nlohmann::json& j);
/// Keys present in `j` override the fields of `base`.
TransformerConfig merge_config(const nlohmann::json& j, TransformerConfig base);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const nlohmann::json& meta = nlohmann::json::object());

struct Checkpoint {
    ModelParams params;
    nlohmann::json meta;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace iconlab
