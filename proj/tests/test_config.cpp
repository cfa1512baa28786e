#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "nlohmann/json.hpp"
#include "srb/config.hpp"

using namespace srb;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("srb_config_" + std::to_string(std::rand()) + std::to_string(std::rand()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

nlohmann::json minimal_json() { return nlohmann::json{{"version", 1}}; }

}  // namespace

TEST_CASE("experiment config: defaults validate and parse from minimal document") {
  ExperimentConfig def;
  CHECK_NOTHROW(def.validate());

  ExperimentConfig c = parse_experiment_config(minimal_json());
  CHECK(c.name == "toy-benchmark");
  CHECK(c.task == Task::Classification);
  CHECK(c.dataset_name == "toy-shapes");
  CHECK(c.framework == "toy-dino");
  CHECK(c.dataset.num_samples == 256);
  CHECK(c.dataset.image_size == 32);
  CHECK(c.test_fraction == doctest::Approx(0.25));
  CHECK(c.encoder.patch_size == 4);
  CHECK(c.encoder_checkpoint.empty());
  CHECK(c.pretrain);
  CHECK(c.head.task == Task::Classification);
  CHECK(c.embed_attack.epsilon == doctest::Approx(8.0 / 255.0));
  CHECK(c.embed_mode == EncodeMode::Cls);
  CHECK(c.task_attack.num_steps == 20);
  CHECK_FALSE(c.defense.has_value());
  CHECK(c.seeds == std::vector<int64_t>{0});
  CHECK(c.out_dir == "out");
  CHECK(c.eval_batch_size == 16);
}

TEST_CASE("experiment config: version is mandatory and pinned") {
  nlohmann::json j = nlohmann::json::object();
  CHECK_THROWS_AS(parse_experiment_config(j), ConfigError);
  j["version"] = 2;
  CHECK_THROWS_AS(parse_experiment_config(j), ConfigError);
  try {
    parse_experiment_config(j);
  } catch (const ConfigError& e) {
    CHECK(e.field_path == "version");
  }
  CHECK_THROWS_AS(parse_experiment_config(nlohmann::json::array()), ConfigError);
}

TEST_CASE("experiment config: task selection steers head defaults") {
  nlohmann::json j = minimal_json();
  j["task"] = "segmentation";
  ExperimentConfig c = parse_experiment_config(j);
  CHECK(c.task == Task::Segmentation);
  CHECK(c.head.task == Task::Segmentation);
  HeadTrainConfig seg_defaults = HeadTrainConfig::defaults_for(Task::Segmentation);
  CHECK(c.head.epochs == seg_defaults.epochs);
  CHECK(c.head.learning_rate == doctest::Approx(seg_defaults.learning_rate));

  j["task"] = "depth";
  c = parse_experiment_config(j);
  CHECK(c.task == Task::Depth);
  CHECK(c.head.task == Task::Depth);

  j["task"] = "pose-estimation";
  CHECK_THROWS_AS(parse_experiment_config(j), ConfigError);
  try {
    parse_experiment_config(j);
  } catch (const ConfigError& e) {
    CHECK(e.field_path == "task");
  }
}

TEST_CASE("experiment config: nested blocks override defaults field by field") {
  nlohmann::json j = minimal_json();
  j["dataset"] = {{"num_samples", 64}, {"image_size", 16}};
  j["encoder"] = {{"patch_size", 4}, {"dim", 32}, {"depth", 2}};
  j["pretrain_config"] = {{"epochs", 2}, {"teacher_momentum", 0.9}};
  j["head"] = {{"epochs", 3}};
  j["embed_attack"] = {{"epsilon", 4.0 / 255.0}, {"mode", "patch"}};
  j["task_attack"] = {{"num_steps", 5}};
  j["seeds"] = {3, 1, 4};
  j["out_dir"] = "results";
  ExperimentConfig c = parse_experiment_config(j);
  CHECK(c.dataset.num_samples == 64);
  CHECK(c.dataset.image_size == 16);
  CHECK(c.dataset.num_shape_classes == 3);  // untouched default
  CHECK(c.encoder.dim == 32);
  CHECK(c.encoder.depth == 2);
  CHECK(c.pretrain_config.epochs == 2);
  CHECK(c.pretrain_config.teacher_momentum == doctest::Approx(0.9));
  CHECK(c.head.epochs == 3);
  CHECK(c.embed_attack.epsilon == doctest::Approx(4.0 / 255.0));
  CHECK(c.embed_mode == EncodeMode::Patch);
  CHECK(c.task_attack.num_steps == 5);
  CHECK(c.seeds == std::vector<int64_t>{3, 1, 4});
  CHECK(c.out_dir == "results");
}

TEST_CASE("experiment config: defense block is optional and parsed when present") {
  nlohmann::json j = minimal_json();
  CHECK_FALSE(parse_experiment_config(j).defense.has_value());

  j["defense"] = nlohmann::json::object();
  ExperimentConfig c = parse_experiment_config(j);
  REQUIRE(c.defense.has_value());
  CHECK(c.defense->gamma == doctest::Approx(2.0));
  CHECK(c.defense->epochs == 100);

  j["defense"] = {{"epochs", 12}, {"warmup_epochs", 2}, {"gamma", 1.5}};
  c = parse_experiment_config(j);
  CHECK(c.defense->epochs == 12);
  CHECK(c.defense->warmup_epochs == 2);
  CHECK(c.defense->gamma == doctest::Approx(1.5));
}

TEST_CASE("experiment config: rejection names the offending field") {
  auto field_of = [](nlohmann::json j) {
    try {
      parse_experiment_config(j);
    } catch (const ConfigError& e) {
      return e.field_path;
    }
    return std::string("(no error)");
  };

  nlohmann::json j = minimal_json();
  j["test_fraction"] = 1.5;
  CHECK(field_of(j) == "test_fraction");

  j = minimal_json();
  j["test_fraction"] = "half";
  CHECK(field_of(j) == "test_fraction");

  j = minimal_json();
  j["dataset"] = {{"num_samples", -1}};
  CHECK(field_of(j) == "synthetic.num_samples");

  j = minimal_json();
  j["dataset"] = "lots";
  CHECK(field_of(j) == "dataset");

  j = minimal_json();
  j["encoder"] = {{"dim", 7}};  // not divisible by heads
  CHECK(field_of(j).substr(0, 8) == "encoder.");

  j = minimal_json();
  j["dataset"] = {{"image_size", 20}};  // 20 % 4 != 0 is fine; use patch 8
  j["encoder"] = {{"patch_size", 8}};
  CHECK(field_of(j) == "synthetic.image_size");

  j = minimal_json();
  j["embed_attack"] = {{"epsilon", -0.1}};
  CHECK(field_of(j) == "embed_attack");

  j = minimal_json();
  j["embed_attack"] = {{"mode", "pixel"}};
  CHECK(field_of(j) == "embed_attack.mode");

  j = minimal_json();
  j["task_attack"] = {{"num_steps", -3}};
  CHECK(field_of(j) == "task_attack");

  j = minimal_json();
  j["defense"] = {{"warmup_epochs", 100}};  // >= epochs
  CHECK(field_of(j) == "deacl.warmup_epochs");

  j = minimal_json();
  j["head"] = {{"optimizer", "lion"}};
  CHECK(field_of(j) == "head.optimizer");

  j = minimal_json();
  j["seeds"] = nlohmann::json::array();
  CHECK(field_of(j) == "seeds");

  j = minimal_json();
  j["seeds"] = "zero";
  CHECK(field_of(j) == "seeds");

  j = minimal_json();
  j["out_dir"] = "";
  CHECK(field_of(j) == "out_dir");

  j = minimal_json();
  j["eval_batch_size"] = 0;
  CHECK(field_of(j) == "eval_batch_size");

  j = minimal_json();
  j["pretrain_config"] = {{"teacher_momentum", 1.5}};
  CHECK(field_of(j) == "dino.teacher_momentum");
}

TEST_CASE("experiment config: JSON round-trip preserves every field") {
  nlohmann::json j = minimal_json();
  j["name"] = "ablation-7";
  j["task"] = "depth";
  j["dataset_name"] = "toy-shapes-16";
  j["framework"] = "toy-dino-v2";
  j["dataset"] = {{"num_samples", 96}, {"image_size", 16}, {"num_shape_classes", 4},
                  {"min_depth", 0.5}, {"max_depth", 7.5}, {"seed", 11}};
  j["test_fraction"] = 0.3;
  j["encoder"] = {{"patch_size", 4}, {"dim", 48}, {"depth", 2}, {"heads", 4},
                  {"mlp_ratio", 2.0}};
  j["pretrain"] = false;
  j["head"] = {{"epochs", 7}, {"optimizer", "adam"}};
  j["embed_attack"] = {{"epsilon", 0.05}, {"mode", "patch"}, {"num_steps", 7}};
  j["task_attack"] = {{"epsilon", 0.02}, {"random_init", false}};
  j["defense"] = {{"epochs", 20}, {"warmup_epochs", 3}, {"eval_every", 5},
                  {"adversary_on_student", true}};
  j["seeds"] = {7, 8};
  j["out_dir"] = "runs/ablation-7";
  j["eval_batch_size"] = 8;

  ExperimentConfig a = parse_experiment_config(j);
  ExperimentConfig b = parse_experiment_config(experiment_config_json(a));

  CHECK(b.name == a.name);
  CHECK(b.task == a.task);
  CHECK(b.dataset_name == a.dataset_name);
  CHECK(b.framework == a.framework);
  CHECK(b.dataset.num_samples == a.dataset.num_samples);
  CHECK(b.dataset.image_size == a.dataset.image_size);
  CHECK(b.dataset.num_shape_classes == a.dataset.num_shape_classes);
  CHECK(b.dataset.min_depth == doctest::Approx(a.dataset.min_depth));
  CHECK(b.dataset.max_depth == doctest::Approx(a.dataset.max_depth));
  CHECK(b.test_fraction == doctest::Approx(a.test_fraction));
  CHECK(b.encoder.dim == a.encoder.dim);
  CHECK(b.encoder.mlp_ratio == doctest::Approx(a.encoder.mlp_ratio));
  CHECK(b.pretrain == a.pretrain);
  CHECK(b.head.epochs == a.head.epochs);
  CHECK(b.head.optimizer == a.head.optimizer);
  CHECK(b.embed_attack.epsilon == doctest::Approx(a.embed_attack.epsilon));
  CHECK(b.embed_attack.num_steps == a.embed_attack.num_steps);
  CHECK(b.embed_mode == a.embed_mode);
  CHECK(b.task_attack.epsilon == doctest::Approx(a.task_attack.epsilon));
  CHECK(b.task_attack.random_init == a.task_attack.random_init);
  REQUIRE(b.defense.has_value());
  CHECK(b.defense->epochs == a.defense->epochs);
  CHECK(b.defense->warmup_epochs == a.defense->warmup_epochs);
  CHECK(b.defense->eval_every == a.defense->eval_every);
  CHECK(b.defense->adversary_on_student == a.defense->adversary_on_student);
  CHECK(b.seeds == a.seeds);
  CHECK(b.out_dir == a.out_dir);
  CHECK(b.eval_batch_size == a.eval_batch_size);
}

TEST_CASE("experiment config: file save/load round-trip and IO failure modes") {
  TempDir tmp;
  ExperimentConfig c;
  c.name = "disk-roundtrip";
  c.seeds = {1, 2, 3};
  save_experiment_config(c, tmp.file("cfg.json"));
  ExperimentConfig d = load_experiment_config(tmp.file("cfg.json"));
  CHECK(d.name == "disk-roundtrip");
  CHECK(d.seeds == std::vector<int64_t>{1, 2, 3});

  CHECK_THROWS_AS(load_experiment_config(tmp.file("missing.json")), NotFoundError);

  std::ofstream bad(tmp.file("bad.json"));
  bad << "{not json";
  bad.close();
  CHECK_THROWS_AS(load_experiment_config(tmp.file("bad.json")), IoError);
}
