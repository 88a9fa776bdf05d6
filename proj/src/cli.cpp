// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include "lattice/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lattice/autodiff.hpp"
#include "lattice/checkpoint.hpp"
#include "lattice/chunkwise.hpp"
#include "lattice/experiment.hpp"
#include "lattice/io.hpp"
#include "lattice/recurrence.hpp"
#include "lattice/run_config.hpp"
#include "lattice/tasks.hpp"
#include "lattice/verify.hpp"

namespace lattice {

namespace {

using nlohmann::json;

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& sets) {
  if (!path.empty()) return load_run_config(path, sets);
  json j = {{"version", kRunConfigVersion}};
  for (const std::string& s : sets) apply_override(j, s);
  return run_config_from_json(j);
}

int cmd_verify(const std::string& filter, std::uint64_t seed, bool corrupt, std::ostream& out) {
  std::optional<ad::ScopedCorruptAdjoint> fault;
  if (corrupt) fault.emplace();
  const std::vector<SuiteResult> results = run_suites(filter, seed);
  out << format_suite_table(results);
  const auto failed = std::count_if(results.begin(), results.end(),
                                    [](const SuiteResult& r) { return !r.passed; });
  out << (failed == 0 ? "all suites passed" : std::to_string(failed) + " suite(s) failed") << "\n";
  return failed == 0 ? kExitOk : kExitFailure;
}

int cmd_gen(const RunConfig& cfg, std::ostream& out) {
  save_dataset(cfg.dataset, {cfg.data, mqar_generate(cfg.data)});
  out << "wrote " << cfg.data.num_samples << " samples to " << cfg.dataset << "\n";
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const MqarDataset ds = load_dataset(cfg.dataset);
  if (ds.config.vocab_size != cfg.model.vocab_size) {
    throw ConfigError("dataset vocab " + std::to_string(ds.config.vocab_size) + " != model vocab " +
                      std::to_string(cfg.model.vocab_size));
  }
  const std::vector<Sequence> data = mqar_sequences(ds.samples);
  Model model(cfg.model);
  std::error_code ec;
  std::filesystem::remove(cfg.metrics, ec);
  MetricsWriter metrics(cfg.metrics);
  const std::size_t total = total_train_steps(data.size(), cfg.train);
  train(model, data, cfg.train, [&](const MetricRow& row) {
    metrics.write(row);
    if (row.step % 50 == 0 || row.step == total) {
      out << "step " << row.step << "/" << total << " loss " << row.loss << " lr " << row.lr << "\n";
    }
  });
  save_checkpoint(cfg.checkpoint, model);
  out << "saved " << cfg.checkpoint << " after " << (cfg.train.epochs == 0 ? 0 : total)
      << " steps\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const Model model = load_checkpoint(cfg.checkpoint);
  if (model.config().vocab_size != cfg.model.vocab_size) {
    throw ConfigError("checkpoint vocab " + std::to_string(model.config().vocab_size) +
                      " != config vocab " + std::to_string(cfg.model.vocab_size));
  }
  const double acc = mqar_evaluate(model, mqar_generate(eval_task(cfg)));
  const json result = {{"model", model.config().mixer},
                       {"accuracy", acc},
                       {"config", run_config_to_json(cfg)}};
  write_file_atomic(cfg.eval_out, result.dump(2) + "\n");
  out << "accuracy " << acc << " (" << model.config().mixer << ", " << cfg.eval_samples
      << " samples)\n";
  if (acc < cfg.min_accuracy) {
    out << "below min_accuracy " << cfg.min_accuracy << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

int cmd_trace(const RunConfig& cfg, const std::string& out_path, std::ostream& out) {
  const MixerSpec spec = parse_mixer(cfg.model.mixer);
  if (spec.family != MixerFamily::Lattice) {
    throw ConfigError("trace needs a lattice mixer, got '" + cfg.model.mixer + "'");
  }
  if (cfg.model.scan != ScanKind::Sequential) {
    throw ConfigError("trace is per-token; scan '" + std::string(scan_kind_name(cfg.model.scan)) +
                      "' is unsupported");
  }
  const std::string path = out_path.empty() ? cfg.trace_out : out_path;
  const std::size_t m = cfg.model.m, d = cfg.model.d_head;
  std::mt19937_64 rng(cfg.model.seed * 1000003ULL + 17);
  std::normal_distribution<double> normal;
  auto draw = [&](std::size_t n) {
    Vec v(n);
    for (double& x : v) x = normal(rng);
    return v;
  };
  StateMatrix S = init_state(m, d, cfg.model.seed);
  std::string lines;
  for (std::size_t step = 0; step < cfg.trace_steps; ++step) {
    const TokenTriple tok{draw(m), draw(d), draw(m), cfg.trace_gamma, cfg.trace_mu};
    StepResult r = lattice_step(S, tok, spec.mode);
    double orth = 0.0, orth_rel = 0.0, delta_max = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const auto dl = r.trace.delta.row(i);
      const double inner = std::abs(dot(dl, S.slot(i)));
      const double scale = norm2(dl) * S.slot_norm(i);
      orth = std::max(orth, inner);
      if (scale > 0.0) orth_rel = std::max(orth_rel, inner / scale);
      delta_max = std::max(delta_max, norm2(dl));
    }
    const auto [bmin, bmax] = std::minmax_element(r.trace.beta.begin(), r.trace.beta.end());
    S = std::move(r.state);
    const json line = {{"step", step},
                       {"loss", r.trace.loss},
                       {"slot_norms", S.slot_norms()},
                       {"max_orth", orth},
                       {"max_orth_rel", orth_rel},
                       {"max_delta_norm", delta_max},
                       {"beta_min", *bmin},
                       {"beta_max", *bmax}};
    lines += line.dump() + "\n";
  }
  write_file_atomic(path, lines);
  out << "wrote " << cfg.trace_steps << " trace lines to " << path << "\n";
  return kExitOk;
}

std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& list) {
  std::vector<std::size_t> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v == 0) throw ConfigError("bench grid: bad " + key + " value '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("bench grid: empty list for " + key);
  return out;
}

int cmd_bench(const std::string& grid, const std::string& out_path, std::uint64_t seed,
              std::ostream& out) {
  const std::vector<BenchPoint> points = parse_bench_grid(grid);
  std::string csv = "kind,T,d,m,C,tokens_per_sec,min_seconds,max_seconds\n";
  for (const BenchPoint& p : points) {
    std::mt19937_64 rng(seed + p.T * 131 + p.d * 7 + p.m);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto draw = [&](std::size_t n) {
      Vec v(n);
      for (double& x : v) x = normal(rng);
      return v;
    };
    std::vector<TokenTriple> tokens;
    for (std::size_t t = 0; t < p.T; ++t)
      tokens.push_back({draw(p.m), draw(p.d), draw(p.m), 0.5 * unit(rng), 0.9 + 0.1 * unit(rng)});
    const StateMatrix S0 = init_state(p.m, p.d, seed);
    double best = INFINITY, worst = 0.0;
    for (int rep = 0; rep < 3; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      double sink = 0.0;
      if (p.kind == "sequential") {
        sink = lattice_scan(S0, tokens, Mode::Dec, false).outputs.back()[0];
      } else if (p.kind == "chunk-full") {
        sink = scan_chunkwise_full(S0, tokens, Mode::Dec, p.C).outputs.back()[0];
      } else {
        sink = scan_chunkwise_rank1(S0, tokens, Mode::Dec, p.C).outputs.back()[0];
      }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (!std::isfinite(sink)) throw std::runtime_error("bench: non-finite output");
      best = std::min(best, secs);
      worst = std::max(worst, secs);
    }
    std::ostringstream row;
    row << p.kind << ',' << p.T << ',' << p.d << ',' << p.m << ',' << p.C << ','
        << static_cast<double>(p.T) / best << ',' << best << ',' << worst << '\n';
    csv += row.str();
  }
  if (out_path.empty()) out << csv;
  else write_file_atomic(out_path, csv);
  return kExitOk;
}

}  // namespace

std::vector<BenchPoint> parse_bench_grid(const std::string& spec) {
  std::map<std::string, std::string> kv = {
      {"T", "1024"}, {"d", "64"}, {"m", "64"}, {"C", "16"}, {"kind", "sequential,chunk-full,chunk-rank1"}};
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ';')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("bench grid: expected key=list, got '" + part + "'");
    const std::string key = part.substr(0, eq);
    if (!kv.count(key)) throw ConfigError("bench grid: unknown key '" + key + "'");
    kv[key] = part.substr(eq + 1);
  }
  std::vector<std::string> kinds;
  std::stringstream ks(kv["kind"]);
  for (std::string k; std::getline(ks, k, ',');) {
    if (k != "sequential" && k != "chunk-full" && k != "chunk-rank1") {
      throw ConfigError("bench grid: unknown kind '" + k + "'");
    }
    kinds.push_back(k);
  }
  if (kinds.empty()) throw ConfigError("bench grid: no kinds");
  std::vector<BenchPoint> out;
  for (const std::string& k : kinds)
    for (std::size_t T : parse_sizes("T", kv["T"]))
      for (std::size_t d : parse_sizes("d", kv["d"]))
        for (std::size_t m : parse_sizes("m", kv["m"])) {
          if (k == "sequential") {
            out.push_back({k, T, d, m, 1});
            continue;
          }
          for (std::size_t C : parse_sizes("C", kv["C"])) out.push_back({k, T, d, m, C});
        }
  return out;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Orthogonal state recurrence toolkit"};
  app.require_subcommand(1);

  std::string filter;
  std::uint64_t seed = 0;
  bool corrupt = false;
  std::string config_path, out_path, grid;
  std::vector<std::string> sets;

  auto* verify = app.add_subcommand("verify", "Run the property suites");
  verify->add_option("--filter", filter, "Only suites whose name contains this");
  verify->add_option("--seed", seed, "Seed for the random instances (default LATTICE_SEED or 0)");
  verify->add_flag("--corrupt-adjoint", corrupt, "Test fixture: perturb the matmul adjoint");

  auto* mqar = app.add_subcommand("mqar", "Associative recall data, training and evaluation");
  mqar->require_subcommand(1);
  std::vector<CLI::App*> mqar_cmds;
  const std::pair<const char*, const char*> mqar_help[] = {
      {"gen", "Write the training dataset"},
      {"train", "Train on the dataset, write metrics and a checkpoint"},
      {"eval", "Score a checkpoint on fresh samples, write accuracy JSON"}};
  for (const auto& [name, help] : mqar_help) {
    auto* sub = mqar->add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON run config");
    sub->add_option("--set", sets, "Override a config key: key=value")->take_all();
    mqar_cmds.push_back(sub);
  }

  auto* trace = app.add_subcommand("trace", "Per-token diagnostics as JSON lines");
  trace->add_option("--config", config_path, "JSON run config");
  trace->add_option("--set", sets, "Override a config key: key=value")->take_all();
  trace->add_option("--out", out_path, "Output path (default: trace_out)");

  auto* bench = app.add_subcommand("bench", "Scan throughput");
  bench->add_option("--grid", grid, "T=..;d=..;m=..;C=..;kind=..");
  bench->add_option("--out", out_path, "Write the CSV here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (verify->parsed()) {
      if (verify->count("--seed") == 0) seed = default_run_config().model.seed;
      return cmd_verify(filter, seed, corrupt, out);
    }
    if (bench->parsed()) return cmd_bench(grid, out_path, default_run_config().model.seed, out);
    const RunConfig cfg = resolve_config(config_path, sets);
    if (trace->parsed()) return cmd_trace(cfg, out_path, out);
    if (mqar_cmds[0]->parsed()) return cmd_gen(cfg, out);
    if (mqar_cmds[1]->parsed()) return cmd_train(cfg, out);
    if (mqar_cmds[2]->parsed()) return cmd_eval(cfg, out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const json::exception& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"lattice"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace lattice
