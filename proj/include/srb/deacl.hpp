#pragma once

// Decoupled adversarial fine-tuning. A frozen copy of a pretrained encoder
// acts as teacher while a trainable copy (the robust encoder) is distilled to
// agree with the teacher on clean inputs and with itself on adversarial
// inputs:
//
//   L = -cos(f_R(x), f(x)) - gamma * cos(f_R(x_adv), f_R(x))
//
// where x_adv maximizes embedding displacement within an l-inf ball. Only
// the robust encoder receives gradients; the teacher stays bitwise constant.
// The learning rate ramps linearly over a warmup phase and then follows a
// cosine decay. Robustness is snapshotted into an evolution trace at a
// configurable epoch cadence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "nlohmann/json.hpp"
#include "srb/attacks.hpp"
#include "srb/augment.hpp"
#include "srb/checkpoint.hpp"
#include "srb/dataset.hpp"
#include "srb/encoder.hpp"
#include "srb/optim.hpp"

namespace srb {

struct DeACLConfig {
  Real gamma = 2.0;
  Real adv_epsilon = 4.0 / 255.0;
  int64_t attack_steps = 5;  // inner steps for x_adv generation, step size eps/4
  Real learning_rate = 0.05;
  int64_t warmup_epochs = 10;
  int64_t epochs = 100;
  Real sgd_momentum = 0.9;
  int64_t batch_size = 128;
  Real weight_decay = 0.0;
  std::vector<std::string> augmentations = {"random_crop", "hflip", "vflip"};
  int64_t eval_every = 10;
  // When set, adversarial examples are generated against the current student
  // instead of the frozen teacher. The two readings circulate in the
  // literature; the teacher is the default here.
  bool adversary_on_student = false;
  uint64_t seed = 0;

  void validate() const {
    if (!(gamma > 0.0)) throw ConfigError("deacl.gamma", "must be positive");
    if (!(adv_epsilon > 0.0 && adv_epsilon <= 1.0))
      throw ConfigError("deacl.adv_epsilon", "must lie in (0,1]");
    if (attack_steps < 0) throw ConfigError("deacl.attack_steps", "must be nonnegative");
    if (!(learning_rate > 0.0)) throw ConfigError("deacl.learning_rate", "must be positive");
    if (warmup_epochs < 0) throw ConfigError("deacl.warmup_epochs", "must be nonnegative");
    if (epochs < 1) throw ConfigError("deacl.epochs", "must be at least 1");
    if (warmup_epochs >= epochs)
      throw ConfigError("deacl.warmup_epochs", "must be smaller than epochs");
    if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0))
      throw ConfigError("deacl.sgd_momentum", "must lie in [0,1)");
    if (batch_size < 1) throw ConfigError("deacl.batch_size", "must be at least 1");
    if (weight_decay < 0.0) throw ConfigError("deacl.weight_decay", "must be nonnegative");
    if (eval_every < 1) throw ConfigError("deacl.eval_every", "must be at least 1");
  }
};

// One robustness snapshot: metrics for one task on one dataset at one epoch.
// Epoch 0 holds the pre-fine-tuning encoder's metrics.
struct EvolutionPoint {
  int64_t epoch = 0;
  Task task = Task::Classification;
  std::string dataset;
  Real metric_clean = 0.0;
  Real metric_embed_attack = 0.0;
  Real metric_task_attack = 0.0;
};
using EvolutionTrace = std::vector<EvolutionPoint>;

inline void to_json(nlohmann::json& j, const EvolutionPoint& p) {
  j = nlohmann::json{{"epoch", p.epoch},
                     {"task", task_name(p.task)},
                     {"dataset", p.dataset},
                     {"metric_clean", p.metric_clean},
                     {"metric_embed_attack", p.metric_embed_attack},
                     {"metric_task_attack", p.metric_task_attack}};
}

inline void from_json(const nlohmann::json& j, EvolutionPoint& p) {
  p.epoch = j.at("epoch").get<int64_t>();
  p.task = parse_task(j.at("task").get<std::string>());
  p.dataset = j.at("dataset").get<std::string>();
  p.metric_clean = j.at("metric_clean").get<Real>();
  p.metric_embed_attack = j.at("metric_embed_attack").get<Real>();
  p.metric_task_attack = j.at("metric_task_attack").get<Real>();
}

// Within each (task, dataset) series, epochs must be strictly increasing.
inline void validate_trace(const EvolutionTrace& trace) {
  for (size_t i = 0; i < trace.size(); ++i)
    for (size_t k = i + 1; k < trace.size(); ++k) {
      const EvolutionPoint& a = trace[i];
      const EvolutionPoint& b = trace[k];
      if (a.task == b.task && a.dataset == b.dataset && b.epoch <= a.epoch)
        throw InvalidInputError("evolution trace: epochs must be strictly increasing within the " +
                                task_name(a.task) + "/" + a.dataset + " series");
    }
}

inline void append_trace_jsonl(const std::string& path, const EvolutionTrace& entries) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open trace file for append: " + path);
  for (const auto& p : entries) {
    nlohmann::json j = p;
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("failed writing trace file: " + path);
}

inline EvolutionTrace read_trace_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("trace file not found: " + path);
  EvolutionTrace trace;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw IoError("trace file holds a malformed line: " + path);
    trace.push_back(j.get<EvolutionPoint>());
  }
  return trace;
}

// Distillation loss on precomputed embeddings. Teacher rows are detached by
// the caller (they arrive as plain constants); both student terms receive
// gradients. Norms are guarded by 1e-8 inside the cosine, so zero embeddings
// degrade to similarity 0 instead of dividing by zero.
inline ag::Var deacl_loss_from_embeddings(const ag::Var& student_clean,
                                          const ag::Var& teacher_clean,
                                          const ag::Var& student_adv, Real gamma) {
  if (!(gamma > 0.0)) throw InvalidInputError("deacl loss: gamma must be positive");
  ag::Var clean_term = ag::cosine_rows_mean(student_clean, ag::detach(teacher_clean));
  ag::Var adv_term = ag::cosine_rows_mean(student_adv, student_clean);
  return ag::sub(ag::neg(clean_term), ag::scale(adv_term, gamma));
}

// Encoder-level loss on a clean/adversarial batch pair (CLS embeddings).
inline ag::Var deacl_loss(const Encoder& robust, const Encoder& teacher, const ImageBatch& x,
                          const ImageBatch& x_adv, Real gamma) {
  if (x.data.shape() != x_adv.data.shape())
    throw InvalidInputError("deacl loss: clean and adversarial batches must share a shape");
  Tensor teacher_cls;
  {
    ag::NoGradGuard ng;
    teacher_cls = teacher.forward_vars(ag::constant(x.data)).first->value;
  }
  ag::Var student_clean = robust.forward_vars(ag::constant(x.data)).first;
  ag::Var student_adv = robust.forward_vars(ag::constant(x_adv.data)).first;
  return deacl_loss_from_embeddings(student_clean, ag::constant(teacher_cls), student_adv, gamma);
}

// Adversarial examples for fine-tuning: embedding-displacement attack on the
// generator encoder (CLS mode), a handful of steps at step size eps/4.
inline ImageBatch deacl_adversarial_examples(const Encoder& generator, const ImageBatch& x,
                                             Real adv_epsilon, int64_t steps, uint64_t seed) {
  AttackBudget budget;
  budget.epsilon = adv_epsilon;
  budget.step_size = adv_epsilon / 4.0;
  budget.num_steps = steps;
  budget.random_init = steps > 0;  // zero-step generation degrades to the identity
  return embed_attack(generator, x, EncodeMode::Cls, budget, seed).x_adv;
}

// Scheduled learning rate by epoch. Epochs are 0-indexed while training;
// passing epoch == epochs is allowed and evaluates the trajectory's endpoint.
// Linear ramp to the peak across the warmup epochs, cosine decay to zero
// afterwards.
inline Real deacl_lr_at(int64_t epoch, const DeACLConfig& config) {
  config.validate();
  if (epoch < 0 || epoch > config.epochs)
    throw InvalidInputError("deacl lr: epoch out of the schedule's range");
  if (epoch < config.warmup_epochs)
    return config.learning_rate * static_cast<Real>(epoch + 1) /
           static_cast<Real>(config.warmup_epochs);
  const Real progress = static_cast<Real>(epoch - config.warmup_epochs) /
                        static_cast<Real>(config.epochs - config.warmup_epochs);
  return config.learning_rate * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// Callback producing trace entries for the given encoder; invoked at epoch 0
// with the pretrained encoder and at every cadence point with the student.
using EvolutionEvaluator =
    std::function<std::vector<EvolutionPoint>(const Encoder& encoder, int64_t epoch)>;

// Fine-tune a pretrained encoder into its robust version. Returns the robust
// encoder and the collected evolution trace. When out_dir is non-empty, a
// checkpoint is written at each cadence point (deacl_epoch_<E>.ckpt) and the
// trace is appended to evolution.jsonl as entries arrive.
inline std::pair<Encoder, EvolutionTrace> deacl_finetune(const Encoder& pretrained,
                                                         const Dataset& dataset,
                                                         const DeACLConfig& config,
                                                         const EvolutionEvaluator& evaluator = {},
                                                         const std::string& out_dir = "") {
  config.validate();
  if (dataset.empty()) throw InvalidInputError("deacl finetune: dataset must be non-empty");

  Encoder teacher = pretrained.clone();
  teacher.set_frozen(true);
  Encoder robust = pretrained.clone();
  robust.set_frozen(false);

  Rng rng(splitmix64(config.seed ^ 0x646561636cULL));
  SgdMomentum opt(robust.param_vars(), config.learning_rate, config.sgd_momentum,
                  config.weight_decay);

  EvolutionTrace trace;
  const std::string trace_path = out_dir.empty() ? "" : out_dir + "/evolution.jsonl";
  auto snapshot = [&](const Encoder& enc, int64_t epoch) {
    if (!evaluator) return;
    std::vector<EvolutionPoint> entries = evaluator(enc, epoch);
    for (auto& e : entries) e.epoch = epoch;
    trace.insert(trace.end(), entries.begin(), entries.end());
    if (!trace_path.empty()) append_trace_jsonl(trace_path, entries);
  };

  snapshot(pretrained, 0);

  for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    opt.set_lr(deacl_lr_at(epoch, config));
    std::vector<int64_t> order = rng.permutation(static_cast<int64_t>(dataset.size()));
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(config.batch_size)) {
      const size_t stop =
          std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      std::vector<Sample> batch;
      batch.reserve(stop - start);
      for (size_t i = start; i < stop; ++i)
        batch.push_back(
            apply_augmentations(dataset.samples[static_cast<size_t>(order[i])],
                                config.augmentations, rng));
      ImageBatch x = stack_images(batch);
      const Encoder& generator = config.adversary_on_student ? robust : teacher;
      ImageBatch x_adv = deacl_adversarial_examples(generator, x, config.adv_epsilon,
                                                    config.attack_steps, rng.u64());
      ag::Var loss = deacl_loss(robust, teacher, x, x_adv, config.gamma);
      opt.zero_grad();
      ag::backward(loss);
      opt.step();
    }
    const int64_t done = epoch + 1;  // 1-based epoch number for cadence and naming
    if (done % config.eval_every == 0 || done == config.epochs) {
      snapshot(robust, done);
      if (!out_dir.empty())
        checkpoint_save(robust, out_dir + "/deacl_epoch_" + std::to_string(done) + ".ckpt");
    }
  }

  validate_trace(trace);
  return {std::move(robust), std::move(trace)};
}

}  // namespace srb
