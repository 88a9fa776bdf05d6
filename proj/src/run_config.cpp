// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include "lattice/run_config.hpp"

#include <cstdlib>
#include <functional>
#include <map>

#include "lattice/io.hpp"

namespace lattice {

namespace {

using nlohmann::json;

constexpr std::uint64_t kEvalSeedOffset = 1000000;

std::uint64_t env_seed() {
  const char* s = std::getenv("LATTICE_SEED");
  if (s == nullptr || *s == '\0') return 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw ConfigError(std::string("LATTICE_SEED is not an integer: ") + s);
  return v;
}

struct Field {
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <class T, class Member>
Field field(Member member) {
  return {[member](const RunConfig& c) { return json(member(const_cast<RunConfig&>(c))); },
          [member](RunConfig& c, const json& v) { member(c) = v.get<T>(); }};
}

#define LATTICE_FIELD(T, expr) field<T>([](RunConfig& c) -> T& { return expr; })

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> f = {
      {"model", LATTICE_FIELD(std::string, c.model.mixer)},
      {"scan",
       {[](const RunConfig& c) { return json(std::string(scan_kind_name(c.model.scan))); },
        [](RunConfig& c, const json& v) { c.model.scan = parse_scan_kind(v.get<std::string>()); }}},
      {"chunk_size", LATTICE_FIELD(std::size_t, c.model.chunk_size)},
      {"vocab_size", LATTICE_FIELD(std::size_t, c.model.vocab_size)},
      {"d_model", LATTICE_FIELD(std::size_t, c.model.d_model)},
      {"n_blocks", LATTICE_FIELD(std::size_t, c.model.n_blocks)},
      {"n_heads", LATTICE_FIELD(std::size_t, c.model.n_heads)},
      {"m", LATTICE_FIELD(std::size_t, c.model.m)},
      {"d_head", LATTICE_FIELD(std::size_t, c.model.d_head)},
      {"conv_width", LATTICE_FIELD(std::size_t, c.model.conv_width)},
      {"shared_qk", LATTICE_FIELD(bool, c.model.shared_qk)},
      {"tie_embeddings", LATTICE_FIELD(bool, c.model.tie_embeddings)},
      {"qk_activation", LATTICE_FIELD(std::string, c.model.qk_activation)},
      {"seed", LATTICE_FIELD(std::uint64_t, c.model.seed)},
      {"seq_len", LATTICE_FIELD(std::size_t, c.data.seq_len)},
      {"num_kv_pairs", LATTICE_FIELD(std::size_t, c.data.num_kv_pairs)},
      {"num_samples", LATTICE_FIELD(std::size_t, c.data.num_samples)},
      {"data_seed", LATTICE_FIELD(std::uint64_t, c.data.seed)},
      {"eval_samples", LATTICE_FIELD(std::size_t, c.eval_samples)},
      {"eval_seed", LATTICE_FIELD(std::uint64_t, c.eval_seed)},
      {"min_accuracy", LATTICE_FIELD(double, c.min_accuracy)},
      {"base_lr", LATTICE_FIELD(double, c.train.optim.base_lr)},
      {"final_lr", LATTICE_FIELD(double, c.train.optim.final_lr)},
      {"warmup_steps", LATTICE_FIELD(std::size_t, c.train.optim.warmup_steps)},
      {"weight_decay", LATTICE_FIELD(double, c.train.optim.weight_decay)},
      {"clip_norm", LATTICE_FIELD(double, c.train.optim.clip_norm)},
      {"beta1", LATTICE_FIELD(double, c.train.optim.beta1)},
      {"beta2", LATTICE_FIELD(double, c.train.optim.beta2)},
      {"adam_eps", LATTICE_FIELD(double, c.train.optim.eps)},
      {"epochs", LATTICE_FIELD(std::size_t, c.train.epochs)},
      {"batch_size", LATTICE_FIELD(std::size_t, c.train.batch_size)},
      {"dataset", LATTICE_FIELD(std::string, c.dataset)},
      {"checkpoint", LATTICE_FIELD(std::string, c.checkpoint)},
      {"metrics", LATTICE_FIELD(std::string, c.metrics)},
      {"eval_out", LATTICE_FIELD(std::string, c.eval_out)},
      {"trace_out", LATTICE_FIELD(std::string, c.trace_out)},
      {"trace_steps", LATTICE_FIELD(std::size_t, c.trace_steps)},
      {"trace_gamma", LATTICE_FIELD(double, c.trace_gamma)},
      {"trace_mu", LATTICE_FIELD(double, c.trace_mu)},
  };
  return f;
}

#undef LATTICE_FIELD

void sync_derived(RunConfig& c) {
  c.data.vocab_size = c.model.vocab_size;
  c.train.shuffle_seed = c.model.seed;
}

}  // namespace

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  try {
    model.validate();
    data.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  need(data.vocab_size == model.vocab_size, "dataset and model vocab sizes differ");
  need(train.batch_size >= 1, "batch_size must be >= 1");
  need(train.optim.base_lr > 0.0 && train.optim.final_lr >= 0.0, "learning rates must be positive");
  need(train.optim.weight_decay >= 0.0, "weight_decay must be >= 0");
  need(train.optim.clip_norm > 0.0, "clip_norm must be > 0");
  need(train.optim.beta1 >= 0.0 && train.optim.beta1 < 1.0 && train.optim.beta2 >= 0.0 &&
           train.optim.beta2 < 1.0,
       "adam betas must lie in [0, 1)");
  need(train.optim.eps > 0.0, "adam_eps must be > 0");
  need(eval_samples >= 1, "eval_samples must be >= 1");
  need(min_accuracy >= 0.0 && min_accuracy <= 1.0, "min_accuracy must lie in [0, 1]");
  need(trace_steps >= 1, "trace_steps must be >= 1");
  need(trace_gamma >= 0.0 && trace_gamma <= 1.0, "trace_gamma must lie in [0, 1]");
  need(trace_mu > 0.0 && trace_mu <= 1.0, "trace_mu must lie in (0, 1]");
}

RunConfig default_run_config() {
  RunConfig c;
  c.model.seed = env_seed();
  c.data.seed = c.model.seed;
  c.eval_seed = c.model.seed + kEvalSeedOffset;
  sync_derived(c);
  return c;
}

json run_config_to_json(const RunConfig& cfg) {
  json j = {{"version", kRunConfigVersion}};
  for (const auto& [key, f] : fields()) j[key] = f.get(cfg);
  return j;
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  if (!j.contains("version")) throw ConfigError("run config needs \"version\": 1");
  if (!j["version"].is_number_integer() || j["version"].get<int>() != kRunConfigVersion) {
    throw ConfigError("unsupported run config version " + j["version"].dump());
  }
  RunConfig c = default_run_config();
  for (const auto& [key, val] : j.items()) {
    if (key == "version") continue;
    const auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      it->second.set(c, val);
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
  if (!j.contains("data_seed")) c.data.seed = c.model.seed;
  if (!j.contains("eval_seed")) c.eval_seed = c.data.seed + kEvalSeedOffset;
  sync_derived(c);
  c.validate();
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  j[key] = value;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file " + path + " is not valid JSON");
  for (const std::string& o : overrides) apply_override(j, o);
  return run_config_from_json(j);
}

}  // namespace lattice
