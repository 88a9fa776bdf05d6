// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include "lattice/checkpoint.hpp"

#include <stdexcept>

#include "lattice/io.hpp"

namespace lattice {

namespace {

constexpr char kMagic[] = "LATC1";
constexpr std::size_t kMagicLen = 5;

std::string s0_name(std::size_t idx) { return "s0." + std::to_string(idx); }

}  // namespace

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"d_model", c.d_model},
          {"n_blocks", c.n_blocks},
          {"n_heads", c.n_heads},
          {"m", c.m},
          {"d_head", c.d_head},
          {"conv_width", c.conv_width},
          {"mixer", c.mixer},
          {"scan", std::string(scan_kind_name(c.scan))},
          {"chunk_size", c.chunk_size},
          {"shared_qk", c.shared_qk},
          {"tie_embeddings", c.tie_embeddings},
          {"qk_activation", c.qk_activation},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  ModelConfig c;
  for (const auto& [key, val] : j.items()) {
    if (key == "vocab_size") c.vocab_size = val.get<std::size_t>();
    else if (key == "d_model") c.d_model = val.get<std::size_t>();
    else if (key == "n_blocks") c.n_blocks = val.get<std::size_t>();
    else if (key == "n_heads") c.n_heads = val.get<std::size_t>();
    else if (key == "m") c.m = val.get<std::size_t>();
    else if (key == "d_head") c.d_head = val.get<std::size_t>();
    else if (key == "conv_width") c.conv_width = val.get<std::size_t>();
    else if (key == "mixer") c.mixer = val.get<std::string>();
    else if (key == "scan") c.scan = parse_scan_kind(val.get<std::string>());
    else if (key == "chunk_size") c.chunk_size = val.get<std::size_t>();
    else if (key == "shared_qk") c.shared_qk = val.get<bool>();
    else if (key == "tie_embeddings") c.tie_embeddings = val.get<bool>();
    else if (key == "qk_activation") c.qk_activation = val.get<std::string>();
    else if (key == "seed") c.seed = val.get<std::uint64_t>();
    else throw std::invalid_argument("unknown model config key '" + key + "'");
  }
  c.validate();
  return c;
}

std::string encode_checkpoint(const Model& model) {
  nlohmann::json arrays = nlohmann::json::array();
  std::string data;
  auto add = [&](const std::string& name, const Mat& m) {
    arrays.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", data.size()}});
    for (double x : m.storage()) put_f64(data, x);
  };
  for (const auto& p : model.params()) add(p.name, p.value);
  for (std::size_t i = 0; i < model.initial_states().size(); ++i) add(s0_name(i), model.initial_states()[i]);

  const nlohmann::json header = {{"config", model_config_to_json(model.config())}, {"arrays", arrays}};
  const std::string h = header.dump();
  std::string out(kMagic, kMagicLen);
  put_u64(out, h.size());
  out += h;
  out += data;
  return out;
}

Model decode_checkpoint(const std::string& bytes) {
  ByteReader r(bytes, "checkpoint");
  if (r.raw(kMagicLen) != std::string(kMagic, kMagicLen)) throw IoError("checkpoint: bad magic");
  const std::uint64_t hlen = r.u64();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.raw(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const std::size_t base = r.pos();
  Model model(model_config_from_json(header.at("config")));

  std::map<std::string, Mat*> targets;
  for (auto& p : model.params()) targets[p.name] = &p.value;
  for (std::size_t i = 0; i < model.initial_states().size(); ++i)
    targets[s0_name(i)] = &model.initial_states()[i];

  std::size_t seen = 0;
  for (const auto& a : header.at("arrays")) {
    const std::string name = a.at("name").get<std::string>();
    const auto it = targets.find(name);
    if (it == targets.end()) throw IoError("checkpoint: unexpected array '" + name + "'");
    Mat& dst = *it->second;
    const auto shape = a.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2 || shape[0] != dst.rows() || shape[1] != dst.cols()) {
      throw IoError("checkpoint: array '" + name + "' has shape incompatible with config");
    }
    r.seek(base + a.at("offset").get<std::size_t>());
    for (double& x : dst.storage()) x = r.f64();
    ++seen;
  }
  if (seen != targets.size()) throw IoError("checkpoint: missing arrays");
  return model;
}

void save_checkpoint(const std::string& path, const Model& model) {
  write_file_atomic(path, encode_checkpoint(model));
}

Model load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace lattice
