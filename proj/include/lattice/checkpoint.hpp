// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: the 5-byte magic "LATC1", a little-endian u64 header
// length, a JSON header {"config": {...}, "arrays": [{"name", "shape",
// "offset"}]} and then the arrays as little-endian f64, offsets counted from
// the first byte after the header.

#pragma once

#include <string>

#include <json.hpp>

#include "lattice/model.hpp"

namespace lattice {

nlohmann::json model_config_to_json(const ModelConfig& cfg);
// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig model_config_from_json(const nlohmann::json& j);

std::string encode_checkpoint(const Model& model);
Model decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

}  // namespace lattice
