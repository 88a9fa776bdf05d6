// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include <json.hpp>

#include "lattice/checkpoint.hpp"
#include "lattice/cli.hpp"
#include "lattice/experiment.hpp"
#include "lattice/io.hpp"
#include "lattice/run_config.hpp"

using namespace lattice;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("lattice_cli_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct Result {
  int code;
  std::string out, err;
};

Result cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

// Small task used by the file-level tests.
std::vector<std::string> small_task(const TempDir& dir) {
  return {"--set", "vocab_size=16", "--set", "seq_len=16", "--set", "num_kv_pairs=2",
          "--set", "num_samples=20", "--set", "d_model=8", "--set", "m=4",
          "--set", "d_head=8", "--set", "n_blocks=1",
          "--set", "dataset=" + (dir / "d.bin"), "--set", "checkpoint=" + (dir / "m.ckpt"),
          "--set", "metrics=" + (dir / "m.csv"), "--set", "eval_out=" + (dir / "e.json")};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// A one-block linear-attention model that solves MQAR by construction on
// vocab 16: one-hot embeddings, the shared q/k map sends key j to slot j-1,
// both convolutions look one token back (so a value is written under the
// preceding key and the query marker reads under the preceding key), v keeps
// only value tokens and the post-gate opens only at the query marker.
Model lookup_fixture() {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 16;
  c.n_blocks = 1;
  c.n_heads = 1;
  c.m = 7;
  c.d_head = 16;
  c.conv_width = 2;
  c.mixer = "la";
  c.qk_activation = "identity";
  Model model(c);
  const MqarVocab voc = mqar_vocab(16);
  for (Parameter& p : model.params()) p.value = Mat(p.value.rows(), p.value.cols());
  model.param("block0.norm").value = Mat(1, 16, 1.0);
  model.param("final_norm").value = Mat(1, 16, 1.0);
  Mat& embed = model.param("embed").value;
  Mat& head = model.param("head").value;
  Mat& w_out = model.param("block0.w_out").value;
  for (std::size_t i = 0; i < 16; ++i) {
    embed(i, i) = 0.02;
    head(i, i) = 1.0;
    w_out(i, i) = 1.0;
  }
  Mat& w_qk = model.param("block0.w_qk").value;
  for (int k = voc.key_begin; k < voc.key_end; ++k) w_qk(k, k - voc.key_begin) = 1.0;
  Mat& w_v = model.param("block0.w_v").value;
  for (int v = voc.value_begin; v < voc.value_end; ++v) w_v(v, v) = 1.0;
  for (std::size_t j = 0; j < 7; ++j) {
    model.param("block0.conv_q").value(1, j) = 1.0;
    model.param("block0.conv_k").value(1, j) = 1.0;
  }
  Mat& w_gate = model.param("block0.w_gate").value;
  for (std::size_t a = 0; a < 16; ++a) w_gate(voc.query, a) = 1.0;
  return model;
}

}  // namespace

TEST_CASE("run config round-trip and overrides") {
  const RunConfig d = default_run_config();
  const json j = run_config_to_json(d);
  CHECK(j.at("version") == kRunConfigVersion);
  CHECK(run_config_to_json(run_config_from_json(j)) == j);

  json k = j;
  apply_override(k, "model=la");
  apply_override(k, "base_lr=0.01");
  apply_override(k, "shared_qk=false");
  const RunConfig r = run_config_from_json(k);
  CHECK(r.model.mixer == "la");
  CHECK(r.train.optim.base_lr == 0.01);
  CHECK_FALSE(r.model.shared_qk);
  CHECK(run_config_to_json(run_config_from_json(run_config_to_json(r))) == run_config_to_json(r));

  json bad = j;
  bad["colour"] = "blue";
  CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);
  json unversioned = j;
  unversioned.erase("version");
  CHECK_THROWS_AS(run_config_from_json(unversioned), ConfigError);
  CHECK_THROWS(apply_override(k, "no-equals-sign"));

  // Defaults reproduce the desk configuration.
  CHECK(d.model.vocab_size == 64);
  CHECK(d.data.seq_len == 64);
  CHECK(d.data.num_kv_pairs == 4);
  CHECK(d.model.d_model == 64);
  CHECK(d.model.n_blocks == 2);
  CHECK(d.model.n_heads == 1);
  CHECK(d.model.m == 32);
  CHECK(d.model.d_head == 32);
  CHECK(d.model.chunk_size == 1);
  CHECK(d.data.num_samples == 5000);
  CHECK(d.train.optim.base_lr == 3e-3);
  CHECK(d.train.epochs == 20);
}

TEST_CASE("config file precedence") {
  TempDir dir;
  json j = run_config_to_json(default_run_config());
  j["epochs"] = 3;
  j["model"] = "gla";
  write_text(dir / "c.json", j.dump());
  const RunConfig a = load_run_config(dir / "c.json", {});
  CHECK(a.train.epochs == 3);
  CHECK(a.model.mixer == "gla");
  const RunConfig b = load_run_config(dir / "c.json", {"epochs=5"});
  CHECK(b.train.epochs == 5);
  CHECK_THROWS_AS(load_run_config(dir / "missing.json", {}), IoError);
}

TEST_CASE("exit codes") {
  TempDir dir;
  CHECK(cli({"verify", "--filter", "orthogonality"}).code == kExitOk);
  const Result only = cli({"verify", "--filter", "delta-rule"});
  CHECK(only.out.find("delta-rule") != std::string::npos);
  CHECK(only.out.find("orthogonality") == std::string::npos);
  CHECK(cli({"verify", "--filter", "no-such-suite"}).code == kExitConfig);
  CHECK(cli({"verify", "--filter", "gradcheck", "--corrupt-adjoint"}).code == kExitFailure);
  CHECK(cli({"mqar", "gen", "--set", "colour=blue"}).code == kExitConfig);
  CHECK(cli({"mqar", "gen", "--set", "seq_len=3"}).code == kExitConfig);
  CHECK(cli({"frobnicate"}).code == kExitConfig);
  CHECK(cli({"mqar", "train", "--set", "dataset=" + (dir / "absent.bin")}).code == kExitIo);
  CHECK(cli({"mqar", "eval", "--config", dir / "absent.json"}).code == kExitIo);
  write_text(dir / "broken.json", "{ not json");
  CHECK(cli({"mqar", "gen", "--config", dir / "broken.json"}).code == kExitConfig);
}

TEST_CASE("gen is deterministic") {
  TempDir dir;
  const auto task = small_task(dir);
  REQUIRE(cli(concat({"mqar", "gen", "--set", "seed=7"}, task)).code == kExitOk);
  const std::string first = slurp(dir / "d.bin");
  REQUIRE(cli(concat({"mqar", "gen", "--set", "seed=7"}, task)).code == kExitOk);
  CHECK(slurp(dir / "d.bin") == first);
  CHECK(first.substr(0, 4) == "MQAR");
}

TEST_CASE("train with zero epochs saves the initial model") {
  TempDir dir;
  const auto task = small_task(dir);
  REQUIRE(cli(concat({"mqar", "gen"}, task)).code == kExitOk);
  REQUIRE(cli(concat({"mqar", "train", "--set", "epochs=0"}, task)).code == kExitOk);
  json j = run_config_to_json(default_run_config());
  for (const char* o : {"vocab_size=16", "seq_len=16", "num_kv_pairs=2", "num_samples=20", "d_model=8",
                        "m=4", "d_head=8", "n_blocks=1"})
    apply_override(j, o);
  const RunConfig cfg = run_config_from_json(j);
  CHECK(slurp(dir / "m.ckpt") == encode_checkpoint(Model(cfg.model)));

  REQUIRE(cli(concat({"mqar", "train", "--set", "epochs=1", "--set", "batch_size=8"}, task)).code == kExitOk);
  const std::string csv = slurp(dir / "m.csv");
  CHECK(csv.rfind("step,lr,loss,grad_norm,tokens_per_sec\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(slurp(dir / "m.ckpt") != encode_checkpoint(Model(cfg.model)));

  // A dataset built for another vocabulary is rejected.
  CHECK(cli(concat(concat({"mqar", "train"}, task), {"--set", "vocab_size=20"})).code == kExitConfig);
}

TEST_CASE("eval of the lookup fixture is perfect") {
  TempDir dir;
  save_checkpoint(dir / "fixture.ckpt", lookup_fixture());
  const std::vector<std::string> args = {
      "mqar", "eval", "--set", "model=la", "--set", "vocab_size=16", "--set", "seq_len=16",
      "--set", "num_kv_pairs=2", "--set", "eval_samples=300", "--set", "min_accuracy=1.0",
      "--set", "checkpoint=" + (dir / "fixture.ckpt"), "--set", "eval_out=" + (dir / "e.json")};
  const Result r = cli(args);
  CHECK_MESSAGE(r.code == kExitOk, r.out << r.err);
  const json j = json::parse(slurp(dir / "e.json"));
  CHECK(j.at("model") == "la");
  CHECK(j.at("accuracy") == 1.0);
  CHECK(j.at("config").at("seq_len") == 16);

  // An untrained model falls short of the threshold.
  ModelConfig c = lookup_fixture().config();
  save_checkpoint(dir / "fresh.ckpt", Model(c));
  auto fresh = args;
  fresh[fresh.size() - 3] = "checkpoint=" + (dir / "fresh.ckpt");
  CHECK(cli(fresh).code == kExitFailure);
}

TEST_CASE("trace") {
  TempDir dir;
  const std::string out = dir / "t.jsonl";
  auto lines_of = [&] {
    std::vector<json> lines;
    std::istringstream in(slurp(out));
    for (std::string line; std::getline(in, line);) lines.push_back(json::parse(line));
    return lines;
  };
  REQUIRE(cli({"trace", "--out", out, "--set", "trace_steps=50", "--set", "trace_gamma=0"}).code == kExitOk);
  auto lines = lines_of();
  REQUIRE(lines.size() == 50);
  for (const json& l : lines) {
    CHECK(l.at("max_delta_norm") == 0.0);
    for (double n : l.at("slot_norms")) CHECK(std::abs(n - 1.0) <= 1e-12);
  }
  REQUIRE(cli({"trace", "--out", out, "--set", "trace_steps=200", "--set", "model=lattice-enc",
               "--set", "trace_mu=0.9"}).code == kExitOk);
  lines = lines_of();
  REQUIRE(lines.size() == 200);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const json& l = lines[i];
    CHECK(l.at("step") == i);
    CHECK(l.at("max_orth_rel").get<double>() <= 1e-9);
    CHECK(l.at("beta_min").get<double>() <= l.at("beta_max").get<double>());
    for (double n : l.at("slot_norms")) CHECK(std::abs(n - 1.0) <= 1e-6);
  }
  CHECK(cli({"trace", "--out", out, "--set", "scan=chunk-full", "--set", "chunk_size=4"}).code == kExitConfig);
  CHECK(cli({"trace", "--out", out, "--set", "model=la"}).code == kExitConfig);
  CHECK(cli({"trace", "--out", dir / "no/such/dir/t.jsonl"}).code == kExitIo);
}

TEST_CASE("bench") {
  const auto grid = parse_bench_grid("T=64;d=8;m=8;C=4");
  CHECK(grid.size() == 3);
  for (const auto& p : grid) {
    CHECK(p.T == 64);
    CHECK(p.C == (p.kind == "sequential" ? 1u : 4u));
  }
  CHECK(parse_bench_grid("").front().T == 1024);
  CHECK_THROWS(parse_bench_grid("T=abc"));
  CHECK_THROWS(parse_bench_grid("Q=3"));

  const Result r = cli({"bench", "--grid", "T=32,64;d=8;m=8;C=8;kind=sequential,chunk-full"});
  REQUIRE(r.code == kExitOk);
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  CHECK(line == "kind,T,d,m,C,tokens_per_sec,min_seconds,max_seconds");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 7);
  }
  CHECK(rows == 4);
}
