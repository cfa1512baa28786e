// srb — benchmark harness for adversarial robustness of self-supervised
// vision encoders. Stage subcommands (pretrain, deacl, train-head, attack,
// evaluate) compose through artifacts under the output directory; report
// renders the aggregate tables and plots. Exit codes: 0 success, 1 usage
// error, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "srb/experiment.hpp"

namespace {

using namespace srb;

struct CliOptions {
  std::string config_path;
  std::string out_override;
  std::string device = "cpu";
  std::optional<int64_t> seed_override;
};

std::string env_or_empty(const char* name) {
  const char* v = std::getenv(name);
  return v ? std::string(v) : std::string();
}

// Relative input paths fall back to SRB_DATA_ROOT; relative output paths are
// rebased onto SRB_CACHE_DIR when it is set.
std::string resolve_input_path(const std::string& path) {
  if (path.empty() || std::filesystem::path(path).is_absolute()) return path;
  if (std::filesystem::exists(path)) return path;
  const std::string root = env_or_empty("SRB_DATA_ROOT");
  if (!root.empty() && std::filesystem::exists(std::filesystem::path(root) / path))
    return (std::filesystem::path(root) / path).string();
  return path;
}

std::string resolve_out_dir(const std::string& out_dir) {
  if (std::filesystem::path(out_dir).is_absolute()) return out_dir;
  const std::string cache = env_or_empty("SRB_CACHE_DIR");
  if (!cache.empty()) return (std::filesystem::path(cache) / out_dir).string();
  return out_dir;
}

ExperimentConfig load_cli_config(const CliOptions& opt) {
  ExperimentConfig cfg = load_experiment_config(resolve_input_path(opt.config_path));
  if (opt.seed_override) cfg.seeds = {*opt.seed_override};
  if (!opt.out_override.empty()) cfg.out_dir = opt.out_override;
  cfg.out_dir = resolve_out_dir(cfg.out_dir);
  cfg.encoder_checkpoint = resolve_input_path(cfg.encoder_checkpoint);
  cfg.validate();
  return cfg;
}

std::string seed_dir_of(const ExperimentConfig& cfg, int64_t seed) {
  return cfg.out_dir + "/seed_" + std::to_string(seed);
}

std::string head_path_of(const ExperimentConfig& cfg, int64_t seed) {
  return seed_dir_of(cfg, seed) + "/head_" + task_name(cfg.task) + ".ckpt";
}

// Encoder an evaluation-side stage works against: the defense artifact when a
// defense is configured, the pretraining artifact when present, otherwise the
// config's own resolution (checkpoint / fresh init + optional pretraining).
Encoder stage_encoder(const ExperimentConfig& cfg, const Dataset& train, int64_t seed) {
  const std::string seed_dir = seed_dir_of(cfg, seed);
  if (cfg.defense) {
    const std::string robust = seed_dir + "/encoder_robust.ckpt";
    if (!std::filesystem::exists(robust))
      throw NotFoundError("defense configured but '" + robust +
                          "' is missing; run the deacl command first");
    return checkpoint_load(robust);
  }
  const std::string pretrained = seed_dir + "/encoder.ckpt";
  if (std::filesystem::exists(pretrained)) return checkpoint_load(pretrained);
  Encoder encoder = experiment_encoder(cfg, seed);
  if (cfg.encoder_checkpoint.empty() && cfg.pretrain)
    encoder = experiment_pretrain(cfg, encoder, train, seed);
  return encoder;
}

TaskEvaluation evaluate_loaded(const ExperimentConfig& cfg, const Encoder& encoder,
                               const Dataset& test, int64_t seed, uint64_t eval_seed) {
  switch (cfg.task) {
    case Task::Classification: {
      ClassificationHead head = load_classification_head(head_path_of(cfg, seed));
      return evaluate_classification(encoder, head, test, cfg.embed_attack, cfg.embed_mode,
                                     cfg.task_attack, eval_seed, cfg.eval_batch_size);
    }
    case Task::Segmentation: {
      SegmentationHead head = load_segmentation_head(head_path_of(cfg, seed));
      return evaluate_segmentation(encoder, head, test, cfg.embed_attack, cfg.embed_mode,
                                   cfg.task_attack, eval_seed, cfg.eval_batch_size);
    }
    case Task::Depth: {
      DepthHead head = load_depth_head(head_path_of(cfg, seed));
      return evaluate_depth(encoder, head, test, cfg.embed_attack, cfg.embed_mode,
                            cfg.task_attack, eval_seed, cfg.eval_batch_size);
    }
  }
  throw InvalidInputError("unknown task");
}

void require_head(const ExperimentConfig& cfg, int64_t seed) {
  const std::string path = head_path_of(cfg, seed);
  if (!std::filesystem::exists(path))
    throw NotFoundError("no trained " + std::string(task_name(cfg.task)) + " head at '" +
                        path + "'; run the train-head command first");
}

int cmd_pretrain(const ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  save_experiment_config(cfg, cfg.out_dir + "/config.json");
  for (int64_t seed : cfg.seeds) {
    auto [train, test] = experiment_data(cfg, seed);
    (void)test;
    Encoder encoder = experiment_encoder(cfg, seed);
    std::vector<Real> losses;
    DinoPretrainConfig pc = cfg.pretrain_config;
    pc.seed = detail::stage_seed(seed, detail::kSeedPretrain);
    encoder = toy_dino_pretrain(encoder, train, pc, &losses);
    std::filesystem::create_directories(seed_dir_of(cfg, seed));
    checkpoint_save(encoder, seed_dir_of(cfg, seed) + "/encoder.ckpt");
    std::cout << "seed " << seed << ": pretrained " << pc.epochs << " epochs, final loss "
              << (losses.empty() ? 0.0 : losses.back()) << "\n";
  }
  return 0;
}

int cmd_deacl(const ExperimentConfig& cfg) {
  if (!cfg.defense)
    throw ConfigError("defense", "the deacl command needs a defense block in the config");
  std::filesystem::create_directories(cfg.out_dir);
  save_experiment_config(cfg, cfg.out_dir + "/config.json");
  for (int64_t seed : cfg.seeds) {
    auto [train, test] = experiment_data(cfg, seed);
    const std::string seed_dir = seed_dir_of(cfg, seed);
    std::filesystem::create_directories(seed_dir);

    Encoder base = [&] {
      const std::string pretrained = seed_dir + "/encoder.ckpt";
      if (std::filesystem::exists(pretrained)) return checkpoint_load(pretrained);
      Encoder encoder = experiment_encoder(cfg, seed);
      if (cfg.encoder_checkpoint.empty() && cfg.pretrain)
        encoder = experiment_pretrain(cfg, encoder, train, seed);
      return encoder;
    }();

    DeACLConfig dc = *cfg.defense;
    dc.seed = detail::stage_seed(seed, detail::kSeedDefense);
    EvolutionEvaluator evaluator =
        make_evolution_evaluator(cfg, train, test, detail::stage_seed(seed, detail::kSeedEval));
    auto [robust, trace] = deacl_finetune(base, train, dc, evaluator, seed_dir);
    checkpoint_save(robust, seed_dir + "/encoder_robust.ckpt");
    if (!trace.empty()) emit_evolution_plot(trace, seed_dir + "/evolution.svg");
    std::cout << "seed " << seed << ": defense fine-tuned " << dc.epochs << " epochs, "
              << trace.size() << " trace points\n";
  }
  return 0;
}

int cmd_train_head(const ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  save_experiment_config(cfg, cfg.out_dir + "/config.json");
  for (int64_t seed : cfg.seeds) {
    auto [train, test] = experiment_data(cfg, seed);
    (void)test;
    const std::string seed_dir = seed_dir_of(cfg, seed);
    std::filesystem::create_directories(seed_dir);
    Encoder encoder = stage_encoder(cfg, train, seed);
    encoder.set_frozen(true);
    if (!std::filesystem::exists(seed_dir + "/encoder.ckpt") && !cfg.defense)
      checkpoint_save(encoder, seed_dir + "/encoder.ckpt");

    const uint64_t head_seed = detail::stage_seed(seed, detail::kSeedHead);
    HeadTrainConfig head_cfg = cfg.head;
    head_cfg.task = cfg.task;
    std::vector<Real> losses;
    switch (cfg.task) {
      case Task::Classification: {
        ClassificationHead head(encoder.config().dim, train.num_classes, head_seed);
        losses = train_head(encoder, head, train, head_cfg, head_seed);
        head_save(head_path_of(cfg, seed), head);
        break;
      }
      case Task::Segmentation: {
        SegmentationHead head(encoder.config().dim, train.num_seg_classes, head_seed);
        losses = train_head(encoder, head, train, head_cfg, head_seed);
        head_save(head_path_of(cfg, seed), head);
        break;
      }
      case Task::Depth: {
        DepthHead head(encoder.config().dim, encoder.config().patch_size, head_seed);
        losses = train_head(encoder, head, train, head_cfg, head_seed);
        head_save(head_path_of(cfg, seed), head);
        break;
      }
    }
    std::cout << "seed " << seed << ": trained " << task_name(cfg.task) << " head, final loss "
              << (losses.empty() ? 0.0 : losses.back()) << "\n";
  }
  return 0;
}

int cmd_attack(const ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  for (int64_t seed : cfg.seeds) {
    require_head(cfg, seed);
    auto [train, test] = experiment_data(cfg, seed);
    Encoder encoder = stage_encoder(cfg, train, seed);
    encoder.set_frozen(true);
    TaskEvaluation ev =
        evaluate_loaded(cfg, encoder, test, seed, detail::stage_seed(seed, detail::kSeedEval));

    nlohmann::json j;
    j["task"] = task_name(cfg.task);
    j["metric_name"] = metric_name_for(cfg.task);
    j["seed"] = seed;
    j["clean"] = ev.clean;
    j["embed_attack"] = ev.embed_attack_metric;
    j["task_attack"] = ev.task_attack_metric;
    j["embed_budget"] = {{"epsilon", cfg.embed_attack.epsilon},
                         {"step_size", cfg.embed_attack.step_size},
                         {"num_steps", cfg.embed_attack.num_steps},
                         {"random_init", cfg.embed_attack.random_init}};
    j["task_budget"] = {{"epsilon", cfg.task_attack.epsilon},
                        {"step_size", cfg.task_attack.step_size},
                        {"num_steps", cfg.task_attack.num_steps},
                        {"random_init", cfg.task_attack.random_init}};
    const std::string path =
        seed_dir_of(cfg, seed) + "/attack_" + task_name(cfg.task) + ".json";
    write_text_file(path, j.dump(2) + "\n");
    std::cout << "seed " << seed << ": " << metric_name_for(cfg.task) << " clean " << ev.clean
              << ", embed-attacked " << ev.embed_attack_metric << ", task-attacked "
              << ev.task_attack_metric << "\n";
  }
  return 0;
}

int cmd_evaluate(const ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  std::vector<ResultRecord> records;
  for (int64_t seed : cfg.seeds) {
    require_head(cfg, seed);
    auto [train, test] = experiment_data(cfg, seed);
    Encoder encoder = stage_encoder(cfg, train, seed);
    encoder.set_frozen(true);
    TaskEvaluation ev =
        evaluate_loaded(cfg, encoder, test, seed, detail::stage_seed(seed, detail::kSeedEval));

    ResultRecord r;
    r.dataset = cfg.dataset_name;
    r.framework = cfg.framework;
    r.encoder_type = cfg.defense ? EncoderType::DeACL : EncoderType::Standard;
    r.task = cfg.task;
    r.clean_metric = ev.clean;
    r.embed_attack_metric = ev.embed_attack_metric;
    r.task_attack_metric = ev.task_attack_metric;
    r.metric_name = metric_name_for(cfg.task);
    r.seed = seed;
    r.timestamp = now_timestamp();
    r.validate();
    records.push_back(r);
    std::cout << "seed " << seed << ": " << r.metric_name << " clean " << r.clean_metric
              << ", embed-attacked " << r.embed_attack_metric << ", task-attacked "
              << r.task_attack_metric << "\n";
  }
  append_records(cfg.out_dir + "/results.jsonl", records);
  write_text_file(cfg.out_dir + "/results.csv",
                  summarize_csv(read_records(cfg.out_dir + "/results.jsonl")));
  return 0;
}

int cmd_report(const std::string& dir) {
  const std::string results = dir + "/results.jsonl";
  if (!std::filesystem::exists(results))
    throw NotFoundError("no results at '" + results + "'; run the evaluate command first");
  std::vector<ResultRecord> records = read_records(results);
  const std::string table = summarize(records);
  write_text_file(dir + "/tables.md", table);
  write_text_file(dir + "/results.csv", summarize_csv(records));
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_directory()) continue;
    const std::string trace_path = entry.path().string() + "/evolution.jsonl";
    if (!std::filesystem::exists(trace_path)) continue;
    EvolutionTrace trace = read_trace_jsonl(trace_path);
    if (!trace.empty()) emit_evolution_plot(trace, entry.path().string() + "/evolution.svg");
  }
  std::cout << table;
  return 0;
}

int cmd_run(const ExperimentConfig& cfg) {
  ExperimentOutcome out = run_experiment(cfg);
  for (const SeedFailure& f : out.failures)
    std::cerr << "seed " << f.seed << " failed at " << f.stage << ": " << f.message << "\n";
  for (const ResultRecord& r : out.records)
    std::cout << "seed " << r.seed << ": " << r.metric_name << " clean " << r.clean_metric
              << ", embed-attacked " << r.embed_attack_metric << ", task-attacked "
              << r.task_attack_metric << "\n";
  write_text_file(cfg.out_dir + "/results.csv",
                  summarize_csv(read_records(cfg.out_dir + "/results.jsonl")));
  if (out.records.empty()) throw Error("every seed failed; see failures.jsonl");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "srb: adversarial-robustness benchmark for self-supervised vision encoders\n"
      "Stages share one experiment config; artifacts land under the output directory."};
  app.require_subcommand(1);

  CliOptions opt;
  std::string report_dir;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    CLI::Option* c = sub->add_option("--config", opt.config_path, "experiment config file");
    if (config_required) c->required();
    sub->add_option("--seed", opt.seed_override,
                    "run only this seed (overrides the config's seed list)");
    sub->add_option("--out", opt.out_override, "output directory (overrides the config)");
    sub->add_option("--device", opt.device, "compute device")
        ->check(CLI::IsMember({"cpu"}))
        ->capture_default_str();
    return sub;
  };

  CLI::App* sc_pretrain =
      add_common(app.add_subcommand("pretrain", "self-distillation pretraining"), true);
  CLI::App* sc_deacl = add_common(
      app.add_subcommand("deacl", "adversarial fine-tuning defense (needs a defense block)"),
      true);
  CLI::App* sc_train_head =
      add_common(app.add_subcommand("train-head", "train the task head on the frozen encoder"),
                 true);
  CLI::App* sc_attack = add_common(
      app.add_subcommand("attack", "run embedding and task attacks against the trained head"),
      true);
  CLI::App* sc_evaluate = add_common(
      app.add_subcommand("evaluate", "clean + attacked evaluation into the result store"),
      true);
  CLI::App* sc_run = add_common(
      app.add_subcommand("run", "full pipeline: pretrain, defend, probe, attack, record"),
      true);
  CLI::App* sc_report = add_common(
      app.add_subcommand("report", "render summary tables, CSV, and evolution plots"), false);
  sc_report->add_option("--results", report_dir,
                        "results directory (defaults to the config's output directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    app.exit(e);
    std::cerr << "\n" << app.help();
    return 1;
  }

  try {
    if (sc_report->parsed()) {
      std::string dir = report_dir;
      if (dir.empty() && !opt.config_path.empty()) dir = load_cli_config(opt).out_dir;
      if (dir.empty())
        throw InvalidInputError("report needs --results or --config to locate results");
      return cmd_report(resolve_out_dir(dir));
    }
    ExperimentConfig cfg = load_cli_config(opt);
    if (sc_pretrain->parsed()) return cmd_pretrain(cfg);
    if (sc_deacl->parsed()) return cmd_deacl(cfg);
    if (sc_train_head->parsed()) return cmd_train_head(cfg);
    if (sc_attack->parsed()) return cmd_attack(cfg);
    if (sc_evaluate->parsed()) return cmd_evaluate(cfg);
    if (sc_run->parsed()) return cmd_run(cfg);
    std::cerr << "no subcommand\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
