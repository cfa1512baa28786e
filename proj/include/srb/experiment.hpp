#pragma once

// Experiment orchestration: run the full per-seed pipeline — synthesize data,
// (optionally) pretrain or load an encoder, (optionally) fine-tune the
// defense, train the task head, evaluate clean / embedding-attack /
// task-attack metrics — and persist result records. A failing seed is
// recorded as a structured failure while the remaining seeds continue.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "srb/attacks.hpp"
#include "srb/config.hpp"
#include "srb/deacl.hpp"
#include "srb/dino.hpp"
#include "srb/heads.hpp"
#include "srb/metrics.hpp"
#include "srb/report.hpp"
#include "srb/synthetic.hpp"

namespace srb {

struct TaskEvaluation {
  Real clean = 0.0;
  Real embed_attack_metric = 0.0;
  Real task_attack_metric = 0.0;
};

namespace detail {

// per-stage seed derivation: one stream per (experiment seed, stage tag)
inline uint64_t stage_seed(int64_t seed, uint64_t tag) {
  return splitmix64(static_cast<uint64_t>(seed) ^ tag);
}

inline constexpr uint64_t kSeedData = 0x64617461ULL;      // "data"
inline constexpr uint64_t kSeedSplit = 0x73706c6974ULL;   // "split"
inline constexpr uint64_t kSeedEncoder = 0x656e63ULL;     // "enc"
inline constexpr uint64_t kSeedPretrain = 0x64696e6fULL;  // "dino"
inline constexpr uint64_t kSeedDefense = 0x646561636cULL; // "deacl"
inline constexpr uint64_t kSeedHead = 0x68656164ULL;      // "head"
inline constexpr uint64_t kSeedEval = 0x6576616cULL;      // "eval"

}  // namespace detail

inline TaskEvaluation evaluate_classification(const Encoder& encoder,
                                              const ClassificationHead& head,
                                              const Dataset& test, const AttackBudget& embed_b,
                                              EncodeMode embed_mode, const AttackBudget& task_b,
                                              uint64_t seed, int64_t batch_size = 16) {
  if (test.empty()) throw InvalidInputError("evaluation requires a non-empty dataset");
  AccuracyAccumulator clean, embed, task;
  const std::vector<int64_t> idx = all_indices(test);
  uint64_t batch_no = 0;
  for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(idx.size(), start + static_cast<size_t>(batch_size));
    const std::vector<int64_t> part(idx.begin() + start, idx.begin() + stop);
    ImageBatch x = stack_images(test, part);
    std::vector<int64_t> labels = gather_labels(test, part);

    auto score = [&](const ImageBatch& batch, AccuracyAccumulator& acc) {
      Tensor pred = argmax_classes(predict_classification(encoder, head, batch));
      for (size_t i = 0; i < labels.size(); ++i)
        acc.add(static_cast<int64_t>(pred[static_cast<int64_t>(i)]), labels[i]);
    };
    score(x, clean);
    score(embed_attack(encoder, x, embed_mode, embed_b, seed + batch_no).x_adv, embed);
    score(classification_attack(encoder, head, x, labels, task_b, seed + batch_no).x_adv, task);
    ++batch_no;
  }
  return {clean.value(), embed.value(), task.value()};
}

inline TaskEvaluation evaluate_segmentation(const Encoder& encoder, const SegmentationHead& head,
                                            const Dataset& test, const AttackBudget& embed_b,
                                            EncodeMode embed_mode, const AttackBudget& task_b,
                                            uint64_t seed, int64_t batch_size = 16) {
  if (test.empty()) throw InvalidInputError("evaluation requires a non-empty dataset");
  MiouAccumulator clean(test.num_seg_classes), embed(test.num_seg_classes),
      task(test.num_seg_classes);
  const std::vector<int64_t> idx = all_indices(test);
  uint64_t batch_no = 0;
  for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(idx.size(), start + static_cast<size_t>(batch_size));
    const std::vector<int64_t> part(idx.begin() + start, idx.begin() + stop);
    ImageBatch x = stack_images(test, part);
    Tensor masks = stack_masks(test, part);

    auto score = [&](const ImageBatch& batch, MiouAccumulator& acc) {
      acc.add(argmax_classes(predict_segmentation(encoder, head, batch)), masks);
    };
    score(x, clean);
    score(embed_attack(encoder, x, embed_mode, embed_b, seed + batch_no).x_adv, embed);
    score(segpgd_attack(encoder, head, x, masks, task_b, seed + batch_no).x_adv, task);
    ++batch_no;
  }
  return {clean.value(), embed.value(), task.value()};
}

inline TaskEvaluation evaluate_depth(const Encoder& encoder, const DepthHead& head,
                                     const Dataset& test, const AttackBudget& embed_b,
                                     EncodeMode embed_mode, const AttackBudget& task_b,
                                     uint64_t seed, int64_t batch_size = 16) {
  if (test.empty()) throw InvalidInputError("evaluation requires a non-empty dataset");
  RmseAccumulator clean, embed, task;
  const std::vector<int64_t> idx = all_indices(test);
  uint64_t batch_no = 0;
  for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(idx.size(), start + static_cast<size_t>(batch_size));
    const std::vector<int64_t> part(idx.begin() + start, idx.begin() + stop);
    ImageBatch x = stack_images(test, part);
    Tensor depths = stack_depths(test, part);

    auto score = [&](const ImageBatch& batch, RmseAccumulator& acc) {
      acc.add(predict_depth(encoder, head, batch), depths);
    };
    score(x, clean);
    score(embed_attack(encoder, x, embed_mode, embed_b, seed + batch_no).x_adv, embed);
    score(depth_attack(encoder, head, x, depths, task_b, seed + batch_no).x_adv, task);
    ++batch_no;
  }
  return {clean.value(), embed.value(), task.value()};
}

// Train the task head for one frozen encoder and score it on the test split.
inline TaskEvaluation train_and_evaluate_task(const Encoder& frozen, Task task,
                                              const Dataset& train, const Dataset& test,
                                              const HeadTrainConfig& head_cfg,
                                              const AttackBudget& embed_b, EncodeMode embed_mode,
                                              const AttackBudget& task_b, uint64_t head_seed,
                                              uint64_t eval_seed, int64_t eval_batch) {
  switch (task) {
    case Task::Classification: {
      ClassificationHead head(frozen.config().dim, train.num_classes, head_seed);
      train_head(frozen, head, train, head_cfg, head_seed);
      return evaluate_classification(frozen, head, test, embed_b, embed_mode, task_b, eval_seed,
                                     eval_batch);
    }
    case Task::Segmentation: {
      SegmentationHead head(frozen.config().dim, train.num_seg_classes, head_seed);
      train_head(frozen, head, train, head_cfg, head_seed);
      return evaluate_segmentation(frozen, head, test, embed_b, embed_mode, task_b, eval_seed,
                                   eval_batch);
    }
    case Task::Depth: {
      DepthHead head(frozen.config().dim, frozen.config().patch_size, head_seed);
      train_head(frozen, head, train, head_cfg, head_seed);
      return evaluate_depth(frozen, head, test, embed_b, embed_mode, task_b, eval_seed,
                            eval_batch);
    }
  }
  throw InvalidInputError("unknown task");
}

// Evolution-trace evaluator over all three tasks with shortened probe
// training, so cadence snapshots stay affordable inside fine-tuning loops.
inline EvolutionEvaluator make_evolution_evaluator(const ExperimentConfig& cfg,
                                                   const Dataset& train, const Dataset& test,
                                                   uint64_t seed) {
  return [cfg, &train, &test, seed](const Encoder& encoder, int64_t epoch) {
    Encoder frozen = encoder.clone();
    frozen.set_frozen(true);
    std::vector<EvolutionPoint> out;
    for (Task task : {Task::Classification, Task::Segmentation, Task::Depth}) {
      HeadTrainConfig head_cfg = HeadTrainConfig::defaults_for(task);
      head_cfg.epochs = std::min<int64_t>(head_cfg.epochs, task == Task::Segmentation ? 10 : 5);
      TaskEvaluation ev = train_and_evaluate_task(
          frozen, task, train, test, head_cfg, cfg.embed_attack, cfg.embed_mode,
          cfg.task_attack, seed ^ static_cast<uint64_t>(epoch), seed + 1, cfg.eval_batch_size);
      EvolutionPoint p;
      p.epoch = epoch;
      p.task = task;
      p.dataset = cfg.dataset_name;
      p.metric_clean = ev.clean;
      p.metric_embed_attack = ev.embed_attack_metric;
      p.metric_task_attack = ev.task_attack_metric;
      out.push_back(p);
    }
    return out;
  };
}

// Deterministic per-seed dataset synthesis and train/test split.
inline std::pair<Dataset, Dataset> experiment_data(const ExperimentConfig& cfg, int64_t seed) {
  SyntheticShapesSpec spec = cfg.dataset;
  spec.seed = detail::stage_seed(seed, detail::kSeedData);
  Dataset full = generate_synthetic_dataset(spec, cfg.encoder.patch_size);
  return split_dataset(full, cfg.test_fraction, detail::stage_seed(seed, detail::kSeedSplit));
}

// Encoder as configured: loaded from a checkpoint when one is named,
// freshly initialized from the seed otherwise.
inline Encoder experiment_encoder(const ExperimentConfig& cfg, int64_t seed) {
  return cfg.encoder_checkpoint.empty()
             ? Encoder(cfg.encoder, detail::stage_seed(seed, detail::kSeedEncoder))
             : checkpoint_load(cfg.encoder_checkpoint);
}

// Self-distillation pretraining with the seed stream this experiment assigns
// to it; the dataset passed in should be the train split.
inline Encoder experiment_pretrain(const ExperimentConfig& cfg, const Encoder& encoder,
                                   const Dataset& train, int64_t seed) {
  DinoPretrainConfig pc = cfg.pretrain_config;
  pc.seed = detail::stage_seed(seed, detail::kSeedPretrain);
  return toy_dino_pretrain(encoder, train, pc);
}

struct SeedFailure {
  int64_t seed = 0;
  std::string stage;
  std::string message;
};

struct ExperimentOutcome {
  std::vector<ResultRecord> records;
  std::vector<SeedFailure> failures;
};

namespace detail {

inline ResultRecord run_single_seed(const ExperimentConfig& cfg, int64_t seed,
                                    const std::string& seed_dir, std::string& stage) {
  stage = "dataset";
  auto [train, test] = experiment_data(cfg, seed);

  stage = "encoder";
  Encoder encoder = experiment_encoder(cfg, seed);

  if (cfg.encoder_checkpoint.empty() && cfg.pretrain) {
    stage = "pretrain";
    encoder = experiment_pretrain(cfg, encoder, train, seed);
  }

  EncoderType encoder_type = EncoderType::Standard;
  if (cfg.defense) {
    stage = "defense";
    DeACLConfig dc = *cfg.defense;
    dc.seed = stage_seed(seed, kSeedDefense);
    encoder = deacl_finetune(encoder, train, dc, {}, seed_dir).first;
    encoder_type = EncoderType::DeACL;
  }

  stage = "train_head";
  encoder.set_frozen(true);
  checkpoint_save(encoder, seed_dir + "/encoder.ckpt");
  HeadTrainConfig head_cfg = cfg.head;
  head_cfg.task = cfg.task;
  stage = "evaluate";
  TaskEvaluation ev = train_and_evaluate_task(
      encoder, cfg.task, train, test, head_cfg, cfg.embed_attack, cfg.embed_mode,
      cfg.task_attack, stage_seed(seed, kSeedHead), stage_seed(seed, kSeedEval),
      cfg.eval_batch_size);

  stage = "record";
  ResultRecord r;
  r.dataset = cfg.dataset_name;
  r.framework = cfg.framework;
  r.encoder_type = encoder_type;
  r.task = cfg.task;
  r.clean_metric = ev.clean;
  r.embed_attack_metric = ev.embed_attack_metric;
  r.task_attack_metric = ev.task_attack_metric;
  r.metric_name = metric_name_for(cfg.task);
  r.seed = seed;
  r.timestamp = now_timestamp();
  r.validate();
  return r;
}

}  // namespace detail

// Run every seed of the experiment. Records land in <out_dir>/results.jsonl,
// failures in <out_dir>/failures.jsonl; each seed additionally writes its
// encoder checkpoint (and any defense artifacts) under <out_dir>/seed_<s>/.
inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out_dir);
  save_experiment_config(cfg, cfg.out_dir + "/config.json");

  ExperimentOutcome outcome;
  for (int64_t seed : cfg.seeds) {
    const std::string seed_dir = cfg.out_dir + "/seed_" + std::to_string(seed);
    std::filesystem::create_directories(seed_dir);
    std::string stage = "start";
    try {
      ResultRecord r = detail::run_single_seed(cfg, seed, seed_dir, stage);
      append_records(cfg.out_dir + "/results.jsonl", {r});
      outcome.records.push_back(std::move(r));
    } catch (const std::exception& e) {
      SeedFailure f{seed, stage, e.what()};
      nlohmann::json j{{"seed", f.seed}, {"stage", f.stage}, {"message", f.message}};
      std::ofstream out(cfg.out_dir + "/failures.jsonl", std::ios::app);
      if (out) out << j.dump() << "\n";
      outcome.failures.push_back(std::move(f));
    }
  }
  return outcome;
}

}  // namespace srb
