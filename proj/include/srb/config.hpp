#pragma once

// Declarative experiment configuration: a single versioned JSON document
// describing the encoder, dataset, head training, attacks, optional defense,
// seeds, and output directory of one benchmark run. Parsing applies defaults
// for omitted fields; validation is total and names the offending field.

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "srb/attacks.hpp"
#include "srb/deacl.hpp"
#include "srb/dino.hpp"
#include "srb/encoder.hpp"
#include "srb/heads.hpp"
#include "srb/synthetic.hpp"

namespace srb {

inline constexpr int64_t kExperimentConfigVersion = 1;

namespace detail {

template <typename T>
T json_field(const nlohmann::json& j, const std::string& name, const T& fallback) {
  if (!j.contains(name)) return fallback;
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(name, "has the wrong type");
  }
}

inline nlohmann::json json_block(const nlohmann::json& j, const std::string& name) {
  if (!j.contains(name)) return nlohmann::json::object();
  if (!j.at(name).is_object()) throw ConfigError(name, "must be an object");
  return j.at(name);
}

}  // namespace detail

struct ExperimentConfig {
  std::string name = "toy-benchmark";
  Task task = Task::Classification;
  std::string dataset_name = "toy-shapes";
  std::string framework = "toy-dino";

  SyntheticShapesSpec dataset;
  Real test_fraction = 0.25;

  EncoderConfig encoder;
  std::string encoder_checkpoint;  // when set, loaded instead of initializing
  bool pretrain = true;            // toy self-distillation before probing
  DinoPretrainConfig pretrain_config;

  HeadTrainConfig head = HeadTrainConfig::defaults_for(Task::Classification);

  AttackBudget embed_attack;
  EncodeMode embed_mode = EncodeMode::Cls;
  AttackBudget task_attack;

  std::optional<DeACLConfig> defense;  // present -> DeACL fine-tuning runs

  std::vector<int64_t> seeds = {0};
  std::string out_dir = "out";
  int64_t eval_batch_size = 16;

  void validate() const {
    if (name.empty()) throw ConfigError("name", "must be non-empty");
    if (dataset_name.empty()) throw ConfigError("dataset_name", "must be non-empty");
    if (framework.empty()) throw ConfigError("framework", "must be non-empty");
    dataset.validate();
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
      throw ConfigError("test_fraction", "must lie in (0,1)");
    encoder.validate();
    if (dataset.image_size % encoder.patch_size != 0)
      throw ConfigError("synthetic.image_size", "must be divisible by encoder.patch_size");
    pretrain_config.validate();
    HeadTrainConfig h = head;
    if (h.task != task) throw ConfigError("head.task", "must match the experiment task");
    h.validate();
    try {
      embed_attack.validate();
    } catch (const InvalidBudgetError& e) {
      throw ConfigError("embed_attack", e.what());
    }
    try {
      task_attack.validate();
    } catch (const InvalidBudgetError& e) {
      throw ConfigError("task_attack", e.what());
    }
    if (defense) defense->validate();
    if (seeds.empty()) throw ConfigError("seeds", "must be non-empty");
    if (out_dir.empty()) throw ConfigError("out_dir", "must be non-empty");
    if (eval_batch_size < 1) throw ConfigError("eval_batch_size", "must be at least 1");
  }
};

namespace detail {

inline SyntheticShapesSpec parse_dataset_spec(const nlohmann::json& j) {
  SyntheticShapesSpec s;
  s.num_samples = json_field<int64_t>(j, "num_samples", s.num_samples);
  s.image_size = json_field<int64_t>(j, "image_size", s.image_size);
  s.num_shape_classes = json_field<int64_t>(j, "num_shape_classes", s.num_shape_classes);
  s.min_depth = json_field<Real>(j, "min_depth", s.min_depth);
  s.max_depth = json_field<Real>(j, "max_depth", s.max_depth);
  s.seed = json_field<uint64_t>(j, "seed", s.seed);
  return s;
}

inline EncoderConfig parse_encoder_config(const nlohmann::json& j) {
  EncoderConfig c;
  c.patch_size = json_field<int64_t>(j, "patch_size", c.patch_size);
  c.dim = json_field<int64_t>(j, "dim", c.dim);
  c.depth = json_field<int64_t>(j, "depth", c.depth);
  c.heads = json_field<int64_t>(j, "heads", c.heads);
  c.mlp_ratio = json_field<Real>(j, "mlp_ratio", c.mlp_ratio);
  return c;
}

inline DinoPretrainConfig parse_pretrain_config(const nlohmann::json& j) {
  DinoPretrainConfig c;
  c.teacher_momentum = json_field<Real>(j, "teacher_momentum", c.teacher_momentum);
  c.temperature_student = json_field<Real>(j, "temperature_student", c.temperature_student);
  c.temperature_teacher = json_field<Real>(j, "temperature_teacher", c.temperature_teacher);
  c.epochs = json_field<int64_t>(j, "epochs", c.epochs);
  c.batch_size = json_field<int64_t>(j, "batch_size", c.batch_size);
  c.learning_rate = json_field<Real>(j, "learning_rate", c.learning_rate);
  c.projection_dim = json_field<int64_t>(j, "projection_dim", c.projection_dim);
  c.augmentations = json_field<std::vector<std::string>>(j, "augmentations", c.augmentations);
  return c;
}

inline HeadTrainConfig parse_head_config(const nlohmann::json& j, Task task) {
  HeadTrainConfig c = HeadTrainConfig::defaults_for(task);
  c.learning_rate = json_field<Real>(j, "learning_rate", c.learning_rate);
  c.weight_decay = json_field<Real>(j, "weight_decay", c.weight_decay);
  c.batch_size = json_field<int64_t>(j, "batch_size", c.batch_size);
  c.epochs = json_field<int64_t>(j, "epochs", c.epochs);
  c.optimizer = json_field<std::string>(j, "optimizer", c.optimizer);
  c.augmentations = json_field<std::vector<std::string>>(j, "augmentations", c.augmentations);
  return c;
}

inline AttackBudget parse_budget(const nlohmann::json& j) {
  AttackBudget b;
  b.epsilon = json_field<Real>(j, "epsilon", b.epsilon);
  b.step_size = json_field<Real>(j, "step_size", b.step_size);
  b.num_steps = json_field<int64_t>(j, "num_steps", b.num_steps);
  b.random_init = json_field<bool>(j, "random_init", b.random_init);
  return b;
}

inline DeACLConfig parse_deacl_config(const nlohmann::json& j) {
  DeACLConfig c;
  c.gamma = json_field<Real>(j, "gamma", c.gamma);
  c.adv_epsilon = json_field<Real>(j, "adv_epsilon", c.adv_epsilon);
  c.attack_steps = json_field<int64_t>(j, "attack_steps", c.attack_steps);
  c.learning_rate = json_field<Real>(j, "learning_rate", c.learning_rate);
  c.warmup_epochs = json_field<int64_t>(j, "warmup_epochs", c.warmup_epochs);
  c.epochs = json_field<int64_t>(j, "epochs", c.epochs);
  c.sgd_momentum = json_field<Real>(j, "sgd_momentum", c.sgd_momentum);
  c.batch_size = json_field<int64_t>(j, "batch_size", c.batch_size);
  c.weight_decay = json_field<Real>(j, "weight_decay", c.weight_decay);
  c.augmentations = json_field<std::vector<std::string>>(j, "augmentations", c.augmentations);
  c.eval_every = json_field<int64_t>(j, "eval_every", c.eval_every);
  c.adversary_on_student = json_field<bool>(j, "adversary_on_student", c.adversary_on_student);
  return c;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("(root)", "must be a JSON object");
  const int64_t version = detail::json_field<int64_t>(j, "version", 0);
  if (version != kExperimentConfigVersion)
    throw ConfigError("version",
                      "must be " + std::to_string(kExperimentConfigVersion) +
                          " (found " + std::to_string(version) + ")");

  ExperimentConfig c;
  c.name = detail::json_field<std::string>(j, "name", c.name);
  const std::string task_str =
      detail::json_field<std::string>(j, "task", task_name(c.task));
  try {
    c.task = parse_task(task_str);
  } catch (const InvalidInputError&) {
    throw ConfigError("task", "unknown task '" + task_str + "'");
  }
  c.dataset_name = detail::json_field<std::string>(j, "dataset_name", c.dataset_name);
  c.framework = detail::json_field<std::string>(j, "framework", c.framework);
  c.dataset = detail::parse_dataset_spec(detail::json_block(j, "dataset"));
  c.test_fraction = detail::json_field<Real>(j, "test_fraction", c.test_fraction);
  c.encoder = detail::parse_encoder_config(detail::json_block(j, "encoder"));
  c.encoder_checkpoint = detail::json_field<std::string>(j, "encoder_checkpoint", "");
  c.pretrain = detail::json_field<bool>(j, "pretrain", c.pretrain);
  c.pretrain_config = detail::parse_pretrain_config(detail::json_block(j, "pretrain_config"));
  c.head = detail::parse_head_config(detail::json_block(j, "head"), c.task);
  c.embed_attack = detail::parse_budget(detail::json_block(j, "embed_attack"));
  const std::string mode =
      detail::json_field<std::string>(detail::json_block(j, "embed_attack"), "mode", "cls");
  if (mode == "cls")
    c.embed_mode = EncodeMode::Cls;
  else if (mode == "patch")
    c.embed_mode = EncodeMode::Patch;
  else
    throw ConfigError("embed_attack.mode", "must be cls or patch");
  c.task_attack = detail::parse_budget(detail::json_block(j, "task_attack"));
  if (j.contains("defense")) c.defense = detail::parse_deacl_config(detail::json_block(j, "defense"));
  c.seeds = detail::json_field<std::vector<int64_t>>(j, "seeds", c.seeds);
  c.out_dir = detail::json_field<std::string>(j, "out_dir", c.out_dir);
  c.eval_batch_size = detail::json_field<int64_t>(j, "eval_batch_size", c.eval_batch_size);
  c.validate();
  return c;
}

inline nlohmann::json experiment_config_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["version"] = kExperimentConfigVersion;
  j["name"] = c.name;
  j["task"] = task_name(c.task);
  j["dataset_name"] = c.dataset_name;
  j["framework"] = c.framework;
  j["dataset"] = {{"num_samples", c.dataset.num_samples},
                  {"image_size", c.dataset.image_size},
                  {"num_shape_classes", c.dataset.num_shape_classes},
                  {"min_depth", c.dataset.min_depth},
                  {"max_depth", c.dataset.max_depth},
                  {"seed", c.dataset.seed}};
  j["test_fraction"] = c.test_fraction;
  j["encoder"] = {{"patch_size", c.encoder.patch_size},
                  {"dim", c.encoder.dim},
                  {"depth", c.encoder.depth},
                  {"heads", c.encoder.heads},
                  {"mlp_ratio", c.encoder.mlp_ratio}};
  j["encoder_checkpoint"] = c.encoder_checkpoint;
  j["pretrain"] = c.pretrain;
  j["pretrain_config"] = {{"teacher_momentum", c.pretrain_config.teacher_momentum},
                          {"temperature_student", c.pretrain_config.temperature_student},
                          {"temperature_teacher", c.pretrain_config.temperature_teacher},
                          {"epochs", c.pretrain_config.epochs},
                          {"batch_size", c.pretrain_config.batch_size},
                          {"learning_rate", c.pretrain_config.learning_rate},
                          {"projection_dim", c.pretrain_config.projection_dim},
                          {"augmentations", c.pretrain_config.augmentations}};
  j["head"] = {{"learning_rate", c.head.learning_rate},
               {"weight_decay", c.head.weight_decay},
               {"batch_size", c.head.batch_size},
               {"epochs", c.head.epochs},
               {"optimizer", c.head.optimizer},
               {"augmentations", c.head.augmentations}};
  j["embed_attack"] = {{"epsilon", c.embed_attack.epsilon},
                       {"step_size", c.embed_attack.step_size},
                       {"num_steps", c.embed_attack.num_steps},
                       {"random_init", c.embed_attack.random_init},
                       {"mode", c.embed_mode == EncodeMode::Cls ? "cls" : "patch"}};
  j["task_attack"] = {{"epsilon", c.task_attack.epsilon},
                      {"step_size", c.task_attack.step_size},
                      {"num_steps", c.task_attack.num_steps},
                      {"random_init", c.task_attack.random_init}};
  if (c.defense)
    j["defense"] = {{"gamma", c.defense->gamma},
                    {"adv_epsilon", c.defense->adv_epsilon},
                    {"attack_steps", c.defense->attack_steps},
                    {"learning_rate", c.defense->learning_rate},
                    {"warmup_epochs", c.defense->warmup_epochs},
                    {"epochs", c.defense->epochs},
                    {"sgd_momentum", c.defense->sgd_momentum},
                    {"batch_size", c.defense->batch_size},
                    {"weight_decay", c.defense->weight_decay},
                    {"augmentations", c.defense->augmentations},
                    {"eval_every", c.defense->eval_every},
                    {"adversary_on_student", c.defense->adversary_on_student}};
  j["seeds"] = c.seeds;
  j["out_dir"] = c.out_dir;
  j["eval_batch_size"] = c.eval_batch_size;
  return j;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("config file not found: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  nlohmann::json j = nlohmann::json::parse(ss.str(), nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw IoError("config file is not valid JSON: " + path);
  return parse_experiment_config(j);
}

inline void save_experiment_config(const ExperimentConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open config file for writing: " + path);
  out << experiment_config_json(c).dump(2) << "\n";
  if (!out) throw IoError("failed writing config file: " + path);
}

}  // namespace srb
