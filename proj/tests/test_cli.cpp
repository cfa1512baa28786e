#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "srb/config.hpp"
#include "srb/report.hpp"

using namespace srb;

#ifndef SRB_CLI_BIN
#error "SRB_CLI_BIN must point at the CLI binary"
#endif

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("srb_cli_" + std::to_string(std::rand()) + std::to_string(std::rand()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

struct CliResult {
  int code = -1;
  std::string output;  // stdout + stderr
};

CliResult run_cli(const TempDir& tmp, const std::string& args) {
  const std::string log = tmp.file("cli_log.txt");
  const std::string cmd = std::string(SRB_CLI_BIN) + " " + args + " > " + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WEXITSTATUS(status);
  std::ifstream in(log, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Tiny but complete experiment config written to disk for the CLI.
std::string write_tiny_config(const TempDir& tmp, const std::string& out_dir,
                              bool with_defense = false) {
  ExperimentConfig c;
  c.dataset.num_samples = 24;
  c.dataset.image_size = 8;
  c.dataset.num_shape_classes = 2;
  c.encoder.patch_size = 4;
  c.encoder.dim = 16;
  c.encoder.depth = 1;
  c.encoder.heads = 2;
  c.encoder.mlp_ratio = 2.0;
  c.pretrain = true;
  c.pretrain_config.epochs = 1;
  c.pretrain_config.batch_size = 8;
  c.head.epochs = 2;
  c.head.batch_size = 8;
  c.embed_attack = AttackBudget{4.0 / 255.0, 2.0 / 255.0, 2, true};
  c.task_attack = AttackBudget{4.0 / 255.0, 2.0 / 255.0, 2, true};
  c.seeds = {0};
  c.out_dir = out_dir;
  c.eval_batch_size = 8;
  if (with_defense) {
    DeACLConfig d;
    d.epochs = 1;
    d.warmup_epochs = 0;
    d.batch_size = 8;
    d.attack_steps = 1;
    d.eval_every = 1;
    c.defense = d;
  }
  const std::string path = tmp.file(with_defense ? "cfg_defense.json" : "cfg.json");
  save_experiment_config(c, path);
  return path;
}

}  // namespace

TEST_CASE("cli: usage errors exit 1, help exits 0") {
  TempDir tmp;
  CHECK(run_cli(tmp, "").code == 1);

  CliResult unknown = run_cli(tmp, "--frobnicate");
  CHECK(unknown.code == 1);
  CHECK(unknown.output.find("Usage") != std::string::npos);

  CliResult help = run_cli(tmp, "--help");
  CHECK(help.code == 0);
  CHECK(help.output.find("pretrain") != std::string::npos);
  CHECK(help.output.find("report") != std::string::npos);

  CHECK(run_cli(tmp, "pretrain").code == 1);  // --config is required

  TempDir tmp2;
  const std::string cfg = write_tiny_config(tmp2, tmp2.file("out"));
  CHECK(run_cli(tmp2, "pretrain --config " + cfg + " --device gpu").code == 1);
}

TEST_CASE("cli: runtime failures exit 2 with an explanatory message") {
  TempDir tmp;
  CliResult missing = run_cli(tmp, "pretrain --config " + tmp.file("nope.json"));
  CHECK(missing.code == 2);
  CHECK(missing.output.find("error:") != std::string::npos);

  std::ofstream bad(tmp.file("bad.json"));
  bad << "{\"version\": 1, \"test_fraction\": 2.0}";
  bad.close();
  CliResult invalid = run_cli(tmp, "pretrain --config " + tmp.file("bad.json"));
  CHECK(invalid.code == 2);
  CHECK(invalid.output.find("test_fraction") != std::string::npos);

  const std::string cfg = write_tiny_config(tmp, tmp.file("out"));
  CliResult no_head = run_cli(tmp, "evaluate --config " + cfg);
  CHECK(no_head.code == 2);
  CHECK(no_head.output.find("train-head") != std::string::npos);

  CliResult no_results = run_cli(tmp, "report --results " + tmp.file("out"));
  CHECK(no_results.code == 2);
  CHECK(no_results.output.find("evaluate") != std::string::npos);
}

TEST_CASE("cli: staged pipeline produces artifacts and deterministic attacks") {
  TempDir tmp;
  const std::string out = tmp.file("out");
  const std::string cfg = write_tiny_config(tmp, out);

  CHECK(run_cli(tmp, "pretrain --config " + cfg + " --seed 0").code == 0);
  CHECK(std::filesystem::exists(out + "/seed_0/encoder.ckpt"));

  CHECK(run_cli(tmp, "train-head --config " + cfg + " --seed 0").code == 0);
  CHECK(std::filesystem::exists(out + "/seed_0/head_classification.ckpt"));

  CHECK(run_cli(tmp, "attack --config " + cfg + " --seed 0").code == 0);
  const std::string attack_path = out + "/seed_0/attack_classification.json";
  REQUIRE(std::filesystem::exists(attack_path));
  const std::string first = slurp(attack_path);
  CHECK(run_cli(tmp, "attack --config " + cfg + " --seed 0").code == 0);
  CHECK(slurp(attack_path) == first);  // rerun with the same seed → identical file

  CHECK(run_cli(tmp, "evaluate --config " + cfg + " --seed 0").code == 0);
  CHECK(std::filesystem::exists(out + "/results.jsonl"));
  CHECK(std::filesystem::exists(out + "/results.csv"));

  CliResult report = run_cli(tmp, "report --results " + out);
  CHECK(report.code == 0);
  CHECK(report.output.find("| Dataset | SSL Framework | Encoder Type |") != std::string::npos);
  CHECK(std::filesystem::exists(out + "/tables.md"));

  std::vector<ResultRecord> records = read_records(out + "/results.jsonl");
  REQUIRE(records.size() == 1);
  CHECK(records[0].metric_name == "accuracy");
  CHECK(records[0].encoder_type == EncoderType::Standard);
}

TEST_CASE("cli: defense flow writes robust encoder, trace, and plot") {
  TempDir tmp;
  const std::string out = tmp.file("out");
  const std::string cfg = write_tiny_config(tmp, out, /*with_defense=*/true);

  CHECK(run_cli(tmp, "deacl --config " + cfg + " --seed 0").code == 0);
  CHECK(std::filesystem::exists(out + "/seed_0/encoder_robust.ckpt"));
  CHECK(std::filesystem::exists(out + "/seed_0/evolution.jsonl"));
  CHECK(std::filesystem::exists(out + "/seed_0/evolution.svg"));

  CHECK(run_cli(tmp, "train-head --config " + cfg + " --seed 0").code == 0);
  CHECK(run_cli(tmp, "evaluate --config " + cfg + " --seed 0").code == 0);
  std::vector<ResultRecord> records = read_records(out + "/results.jsonl");
  REQUIRE(records.size() == 1);
  CHECK(records[0].encoder_type == EncoderType::DeACL);

  // deacl without a defense block is a config error
  const std::string plain = write_tiny_config(tmp, tmp.file("out2"));
  CliResult no_defense = run_cli(tmp, "deacl --config " + plain);
  CHECK(no_defense.code == 2);
  CHECK(no_defense.output.find("defense") != std::string::npos);
}

TEST_CASE("cli: run subcommand executes the full pipeline per seed") {
  TempDir tmp;
  const std::string out = tmp.file("out");
  const std::string cfg = write_tiny_config(tmp, out);

  CliResult run = run_cli(tmp, "run --config " + cfg + " --seed 3");
  CHECK(run.code == 0);
  std::vector<ResultRecord> records = read_records(out + "/results.jsonl");
  REQUIRE(records.size() == 1);
  CHECK(records[0].seed == 3);
  CHECK(std::filesystem::exists(out + "/config.json"));
  CHECK(std::filesystem::exists(out + "/results.csv"));
}

TEST_CASE("cli: relative outputs rebase onto SRB_CACHE_DIR") {
  TempDir tmp;
  const std::string cfg = write_tiny_config(tmp, "rel_out");

  const std::string log = tmp.file("cli_log.txt");
  const std::string cmd = "SRB_CACHE_DIR=" + tmp.path.string() + " " + SRB_CLI_BIN +
                          " pretrain --config " + cfg + " --seed 0 > " + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  CHECK(WEXITSTATUS(status) == 0);
  CHECK(std::filesystem::exists(tmp.path / "rel_out" / "seed_0" / "encoder.ckpt"));
}
