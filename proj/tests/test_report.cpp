#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "srb/report.hpp"

using namespace srb;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("srb_report_" + std::to_string(std::rand()) + std::to_string(std::rand()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string str() const { return path.string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

size_t count_occurrences(const std::string& text, const std::string& needle) {
  size_t n = 0;
  for (size_t at = text.find(needle); at != std::string::npos; at = text.find(needle, at + 1))
    ++n;
  return n;
}

ResultRecord cifar_row(EncoderType type, Real clean, Real embed, Real task_attack) {
  ResultRecord r;
  r.dataset = "CIFAR10";
  r.framework = "DINO v1 ViT-B/16";
  r.encoder_type = type;
  r.task = Task::Classification;
  r.clean_metric = clean;
  r.embed_attack_metric = embed;
  r.task_attack_metric = task_attack;
  r.metric_name = "accuracy";
  r.seed = 0;
  r.timestamp = 1700000000;
  return r;
}

EvolutionPoint point(int64_t epoch, Task task, const std::string& dataset, Real clean,
                     Real embed, Real attack) {
  EvolutionPoint p;
  p.epoch = epoch;
  p.task = task;
  p.dataset = dataset;
  p.metric_clean = clean;
  p.metric_embed_attack = embed;
  p.metric_task_attack = attack;
  return p;
}

}  // namespace

TEST_CASE("record names and directions per task") {
  CHECK(metric_name_for(Task::Classification) == "accuracy");
  CHECK(metric_name_for(Task::Segmentation) == "mIoU");
  CHECK(metric_name_for(Task::Depth) == "RMSE");
  CHECK(task_attack_name(Task::Classification) == "PGD");
  CHECK(task_attack_name(Task::Segmentation) == "SegPGD");
  CHECK(task_attack_name(Task::Depth) == "DepthPGD");
  CHECK(metric_ascends("accuracy"));
  CHECK(metric_ascends("mIoU"));
  CHECK_FALSE(metric_ascends("RMSE"));
  CHECK(encoder_type_name(EncoderType::Standard) == "Standard");
  CHECK(parse_encoder_type("DeACL") == EncoderType::DeACL);
  CHECK_THROWS_AS(parse_encoder_type("robust"), InvalidInputError);
}

TEST_CASE("record validation enforces ranges per metric") {
  ResultRecord r = cifar_row(EncoderType::Standard, 0.94, 0.01, 0.0);
  CHECK_NOTHROW(r.validate());

  r.clean_metric = 1.2;
  CHECK_THROWS_AS(r.validate(), InvalidInputError);
  r = cifar_row(EncoderType::Standard, 0.94, -0.01, 0.0);
  CHECK_THROWS_AS(r.validate(), InvalidInputError);

  ResultRecord d;
  d.dataset = "toy";
  d.framework = "tiny";
  d.task = Task::Depth;
  d.metric_name = "RMSE";
  d.clean_metric = 2.7;  // RMSE above 1 is fine
  d.embed_attack_metric = 0.4;
  d.task_attack_metric = 5.0;
  CHECK_NOTHROW(d.validate());
  d.task_attack_metric = -0.5;
  CHECK_THROWS_AS(d.validate(), InvalidInputError);

  d.task_attack_metric = 1.0;
  d.metric_name = "mse";
  CHECK_THROWS_AS(d.validate(), InvalidInputError);
  d.metric_name = "RMSE";
  d.dataset = "";
  CHECK_THROWS_AS(d.validate(), InvalidInputError);
}

TEST_CASE("summary reproduces the classification table rows byte for byte") {
  std::vector<ResultRecord> records = {cifar_row(EncoderType::Standard, 0.94, 0.01, 0.00),
                                       cifar_row(EncoderType::DeACL, 0.91, 0.73, 0.02)};
  const std::string want =
      "## Classification\n"
      "\n"
      "| Dataset | SSL Framework | Encoder Type | Clean Accuracy↑ | EmbedAttack "
      "Accuracy↑ | PGD Accuracy↑ |\n"
      "| --- | --- | --- | --- | --- | --- |\n"
      "| CIFAR10 | DINO v1 ViT-B/16 | Standard | 0.94 | 0.01 | 0.00 |\n"
      "| CIFAR10 | DINO v1 ViT-B/16 | DeACL | 0.91 | 0.73 | 0.02 |\n";
  CHECK(summarize(records) == want);
  // byte-stability: a second render is identical, input order irrelevant
  std::swap(records[0], records[1]);
  CHECK(summarize(records) == want);
}

TEST_CASE("summary averages seeds and orders standard before fine-tuned") {
  std::vector<ResultRecord> records;
  for (int64_t seed : {0, 1}) {
    ResultRecord r = cifar_row(EncoderType::DeACL, seed == 0 ? 0.90 : 0.92, 0.73, 0.02);
    r.seed = seed;
    records.push_back(r);
  }
  records.push_back(cifar_row(EncoderType::Standard, 0.94, 0.01, 0.00));

  std::string table = summarize(records);
  size_t std_at = table.find("| Standard |");
  size_t deacl_at = table.find("| DeACL |");
  REQUIRE(std_at != std::string::npos);
  REQUIRE(deacl_at != std::string::npos);
  CHECK(std_at < deacl_at);
  CHECK(table.find("| DeACL | 0.91 |") != std::string::npos);  // (0.90+0.92)/2

  CHECK(summarize({}) == "");
}

TEST_CASE("summary renders one table per task with task-specific columns") {
  ResultRecord seg;
  seg.dataset = "toy-shapes";
  seg.framework = "tiny-vit";
  seg.task = Task::Segmentation;
  seg.metric_name = "mIoU";
  seg.clean_metric = 0.42;
  seg.embed_attack_metric = 0.01;
  seg.task_attack_metric = 0.01;
  ResultRecord dep = seg;
  dep.task = Task::Depth;
  dep.metric_name = "RMSE";
  dep.clean_metric = 0.49;
  dep.embed_attack_metric = 1.54;
  dep.task_attack_metric = 2.60;

  std::string table = summarize({dep, seg, cifar_row(EncoderType::Standard, 0.9, 0.1, 0.0)});
  CHECK(count_occurrences(table, "## ") == 3);
  size_t cls_at = table.find("## Classification");
  size_t seg_at = table.find("## Semantic Segmentation");
  size_t dep_at = table.find("## Depth Estimation");
  REQUIRE(cls_at != std::string::npos);
  REQUIRE(seg_at != std::string::npos);
  REQUIRE(dep_at != std::string::npos);
  CHECK(cls_at < seg_at);
  CHECK(seg_at < dep_at);
  CHECK(table.find("SegPGD mIoU↑") != std::string::npos);
  CHECK(table.find("DepthPGD RMSE↓") != std::string::npos);
  CHECK(table.find("| 0.49 | 1.54 | 2.60 |") != std::string::npos);
}

TEST_CASE("csv export carries the aggregated cells") {
  std::vector<ResultRecord> records = {cifar_row(EncoderType::Standard, 0.94, 0.01, 0.00)};
  std::string csv = summarize_csv(records);
  CHECK(csv.find("task,dataset,framework,encoder_type,metric_name,clean,embed_attack,"
                 "task_attack,seeds") == 0);
  CHECK(csv.find("classification,CIFAR10,DINO v1 ViT-B/16,Standard,accuracy,0.940000,0.010000,"
                 "0.000000,1") != std::string::npos);
}

TEST_CASE("jsonl store appends without touching earlier lines and roundtrips") {
  TempDir tmp;
  const std::string path = (tmp.path / "results.jsonl").string();
  std::vector<ResultRecord> first = {cifar_row(EncoderType::Standard, 0.94, 0.01, 0.00)};
  append_records(path, first);
  const std::string bytes_after_first = slurp(path);

  std::vector<ResultRecord> second = {cifar_row(EncoderType::DeACL, 0.91, 0.73, 0.02)};
  append_records(path, second);
  const std::string bytes_after_second = slurp(path);
  CHECK(bytes_after_second.substr(0, bytes_after_first.size()) == bytes_after_first);

  std::vector<ResultRecord> all = read_records(path);
  REQUIRE(all.size() == 2);
  CHECK(all[0].encoder_type == EncoderType::Standard);
  CHECK(all[0].clean_metric == 0.94);
  CHECK(all[0].timestamp == 1700000000);
  CHECK(all[1].encoder_type == EncoderType::DeACL);
  CHECK(all[1].embed_attack_metric == 0.73);

  // appending nothing leaves the store intact
  append_records(path, {});
  CHECK(slurp(path) == bytes_after_second);

  CHECK_THROWS_AS(read_records((tmp.path / "missing.jsonl").string()), NotFoundError);
  std::ofstream bad((tmp.path / "bad.jsonl").string());
  bad << "not json at all\n";
  bad.close();
  CHECK_THROWS_AS(read_records((tmp.path / "bad.jsonl").string()), IoError);
  std::ofstream old((tmp.path / "old.jsonl").string());
  old << "{\"version\": 99}\n";
  old.close();
  CHECK_THROWS_AS(read_records((tmp.path / "old.jsonl").string()), IoError);

  // invalid records never reach the store
  ResultRecord broken = cifar_row(EncoderType::Standard, 2.0, 0.0, 0.0);
  CHECK_THROWS_AS(append_records(path, {broken}), InvalidInputError);
  CHECK(slurp(path) == bytes_after_second);
}

TEST_CASE("evolution plot renders one panel per task and one series per dataset and kind") {
  EvolutionTrace trace;
  for (const std::string& ds : {std::string("alpha"), std::string("beta")}) {
    for (int64_t e : {0, 5, 10}) {
      trace.push_back(point(e, Task::Classification, ds, 0.9 - 0.01 * e, 0.1 + 0.05 * e,
                            0.02 * e));
      trace.push_back(point(e, Task::Segmentation, ds, 0.5, 0.1, 0.1));
      trace.push_back(point(e, Task::Depth, ds, 1.0 + 0.1 * e, 2.0, 2.5));
    }
  }
  TempDir tmp;
  const std::string path = (tmp.path / "evolution.svg").string();
  emit_evolution_plot(trace, path);
  std::string svg = slurp(path);
  CHECK(count_occurrences(svg, "<g class=\"panel\">") == 3);
  // 3 panels x 2 datasets x 3 metric kinds
  CHECK(count_occurrences(svg, "<polyline") == 18);
  CHECK(count_occurrences(svg, "stroke-dasharray") > 0);
  CHECK(svg.find("#1f77b4") != std::string::npos);
  CHECK(svg.find("#d62728") != std::string::npos);

  // single-epoch, single-task trace still renders a file with point markers
  EvolutionTrace tiny = {point(0, Task::Classification, "toy", 0.9, 0.1, 0.0)};
  const std::string tiny_path = (tmp.path / "tiny.svg").string();
  emit_evolution_plot(tiny, tiny_path);
  std::string tiny_svg = slurp(tiny_path);
  CHECK(count_occurrences(tiny_svg, "<g class=\"panel\">") == 1);
  CHECK(count_occurrences(tiny_svg, "<circle") == 3);

  CHECK_THROWS_AS(emit_evolution_plot({}, (tmp.path / "none.svg").string()),
                  InvalidInputError);
}
