#pragma once

// Result records, their JSON-lines persistence, table/CSV summaries, and the
// robustness-evolution plot. One record carries the three metric slots of a
// benchmark table row: clean, embedding-attack, and task-attack values of a
// single task metric for one (dataset, framework, encoder type, seed) cell.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "nlohmann/json.hpp"
#include "srb/dataset.hpp"
#include "srb/deacl.hpp"

namespace srb {

enum class EncoderType { Standard, DeACL };

inline std::string encoder_type_name(EncoderType t) {
  return t == EncoderType::Standard ? "Standard" : "DeACL";
}

inline EncoderType parse_encoder_type(const std::string& s) {
  if (s == "Standard") return EncoderType::Standard;
  if (s == "DeACL") return EncoderType::DeACL;
  throw InvalidInputError("unknown encoder type: '" + s + "'");
}

inline std::string metric_name_for(Task task) {
  switch (task) {
    case Task::Classification: return "accuracy";
    case Task::Segmentation: return "mIoU";
    case Task::Depth: return "RMSE";
  }
  throw InvalidInputError("unknown task");
}

inline std::string task_attack_name(Task task) {
  switch (task) {
    case Task::Classification: return "PGD";
    case Task::Segmentation: return "SegPGD";
    case Task::Depth: return "DepthPGD";
  }
  throw InvalidInputError("unknown task");
}

// table-header spelling of the task metric
inline std::string metric_display_name(Task task) {
  switch (task) {
    case Task::Classification: return "Accuracy";
    case Task::Segmentation: return "mIoU";
    case Task::Depth: return "RMSE";
  }
  throw InvalidInputError("unknown task");
}

// higher-is-better for accuracy/mIoU, lower-is-better for RMSE
inline bool metric_ascends(const std::string& metric_name) { return metric_name != "RMSE"; }

inline int64_t now_timestamp() { return static_cast<int64_t>(std::time(nullptr)); }

struct ResultRecord {
  std::string dataset;
  std::string framework;
  EncoderType encoder_type = EncoderType::Standard;
  Task task = Task::Classification;
  Real clean_metric = 0.0;
  Real embed_attack_metric = 0.0;
  Real task_attack_metric = 0.0;
  std::string metric_name = "accuracy";
  int64_t seed = 0;
  int64_t timestamp = 0;

  void validate() const {
    if (dataset.empty()) throw InvalidInputError("result record: dataset must be non-empty");
    if (framework.empty()) throw InvalidInputError("result record: framework must be non-empty");
    if (metric_name != "accuracy" && metric_name != "mIoU" && metric_name != "RMSE")
      throw InvalidInputError("result record: unknown metric name '" + metric_name + "'");
    for (Real v : {clean_metric, embed_attack_metric, task_attack_metric}) {
      if (metric_name == "RMSE") {
        if (v < 0.0) throw InvalidInputError("result record: RMSE values must be nonnegative");
      } else if (v < 0.0 || v > 1.0) {
        throw InvalidInputError("result record: " + metric_name + " values must lie in [0,1]");
      }
    }
  }
};

inline constexpr int64_t kResultRecordVersion = 1;

inline void to_json(nlohmann::json& j, const ResultRecord& r) {
  j = nlohmann::json{{"version", kResultRecordVersion},
                     {"dataset", r.dataset},
                     {"framework", r.framework},
                     {"encoder_type", encoder_type_name(r.encoder_type)},
                     {"task", task_name(r.task)},
                     {"clean_metric", r.clean_metric},
                     {"embed_attack_metric", r.embed_attack_metric},
                     {"task_attack_metric", r.task_attack_metric},
                     {"metric_name", r.metric_name},
                     {"seed", r.seed},
                     {"timestamp", r.timestamp}};
}

inline void from_json(const nlohmann::json& j, ResultRecord& r) {
  r.dataset = j.at("dataset").get<std::string>();
  r.framework = j.at("framework").get<std::string>();
  r.encoder_type = parse_encoder_type(j.at("encoder_type").get<std::string>());
  r.task = parse_task(j.at("task").get<std::string>());
  r.clean_metric = j.at("clean_metric").get<Real>();
  r.embed_attack_metric = j.at("embed_attack_metric").get<Real>();
  r.task_attack_metric = j.at("task_attack_metric").get<Real>();
  r.metric_name = j.at("metric_name").get<std::string>();
  r.seed = j.at("seed").get<int64_t>();
  r.timestamp = j.at("timestamp").get<int64_t>();
}

// Append-only JSON-lines store: one validated record per line, versioned.
inline void append_records(const std::string& path, const std::vector<ResultRecord>& records) {
  for (const auto& r : records) r.validate();
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open results file for append: " + path);
  for (const auto& r : records) {
    nlohmann::json j = r;
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("failed writing results file: " + path);
}

inline std::vector<ResultRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("results file not found: " + path);
  std::vector<ResultRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw IoError("results file holds a malformed line: " + path);
    if (j.value("version", int64_t{0}) != kResultRecordVersion)
      throw IoError("results file line has an unsupported version: " + path);
    records.push_back(j.get<ResultRecord>());
  }
  return records;
}

namespace detail {

inline std::string format_fixed(Real v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

// One aggregated table row: metrics averaged over the seeds of a cell.
struct SummaryRow {
  Task task = Task::Classification;
  std::string dataset;
  std::string framework;
  EncoderType encoder_type = EncoderType::Standard;
  Real clean = 0.0;
  Real embed = 0.0;
  Real task_attack = 0.0;
  int64_t seeds = 0;
};

inline std::vector<SummaryRow> summary_rows(const std::vector<ResultRecord>& records) {
  // key: (task, dataset, framework, encoder_type); Standard sorts before DeACL
  using Key = std::tuple<int, std::string, std::string, int>;
  std::map<Key, SummaryRow> cells;
  for (const auto& r : records) {
    r.validate();
    Key key{static_cast<int>(r.task), r.dataset, r.framework, static_cast<int>(r.encoder_type)};
    SummaryRow& row = cells[key];
    if (row.seeds == 0) {
      row.task = r.task;
      row.dataset = r.dataset;
      row.framework = r.framework;
      row.encoder_type = r.encoder_type;
    }
    row.clean += r.clean_metric;
    row.embed += r.embed_attack_metric;
    row.task_attack += r.task_attack_metric;
    ++row.seeds;
  }
  std::vector<SummaryRow> rows;
  rows.reserve(cells.size());
  for (auto& [key, row] : cells) {
    row.clean /= row.seeds;
    row.embed /= row.seeds;
    row.task_attack /= row.seeds;
    rows.push_back(row);
  }
  return rows;
}

inline std::string task_section_title(Task task) {
  switch (task) {
    case Task::Classification: return "Classification";
    case Task::Segmentation: return "Semantic Segmentation";
    case Task::Depth: return "Depth Estimation";
  }
  throw InvalidInputError("unknown task");
}

}  // namespace detail

// Markdown tables mirroring the benchmark layout: one table per task, rows
// grouped by dataset/framework with Standard encoders listed before DeACL,
// metrics averaged over seeds and printed at two decimals.
inline std::string summarize(const std::vector<ResultRecord>& records) {
  std::vector<detail::SummaryRow> rows = detail::summary_rows(records);
  std::string out;
  for (Task task : {Task::Classification, Task::Segmentation, Task::Depth}) {
    std::vector<const detail::SummaryRow*> in_task;
    for (const auto& row : rows)
      if (row.task == task) in_task.push_back(&row);
    if (in_task.empty()) continue;

    const std::string metric = metric_display_name(task);
    const std::string arrow = metric_ascends(metric_name_for(task)) ? "↑" : "↓";
    if (!out.empty()) out += "\n";
    out += "## " + detail::task_section_title(task) + "\n\n";
    out += "| Dataset | SSL Framework | Encoder Type | Clean " + metric + arrow +
           " | EmbedAttack " + metric + arrow + " | " + task_attack_name(task) + " " + metric +
           arrow + " |\n";
    out += "| --- | --- | --- | --- | --- | --- |\n";
    for (const auto* row : in_task) {
      out += "| " + row->dataset + " | " + row->framework + " | " +
             encoder_type_name(row->encoder_type) + " | " + detail::format_fixed(row->clean, 2) +
             " | " + detail::format_fixed(row->embed, 2) + " | " +
             detail::format_fixed(row->task_attack, 2) + " |\n";
    }
  }
  return out;
}

// CSV form of the same aggregation, at full precision.
inline std::string summarize_csv(const std::vector<ResultRecord>& records) {
  std::vector<detail::SummaryRow> rows = detail::summary_rows(records);
  std::string out =
      "task,dataset,framework,encoder_type,metric_name,clean,embed_attack,task_attack,seeds\n";
  for (const auto& row : rows) {
    out += task_name(row.task) + "," + row.dataset + "," + row.framework + "," +
           encoder_type_name(row.encoder_type) + "," + metric_name_for(row.task) + "," +
           detail::format_fixed(row.clean, 6) + "," + detail::format_fixed(row.embed, 6) + "," +
           detail::format_fixed(row.task_attack, 6) + "," + std::to_string(row.seeds) + "\n";
  }
  return out;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open file for writing: " + path);
  out << content;
  if (!out) throw IoError("failed writing file: " + path);
}

namespace detail {

inline const char* dataset_color(size_t index) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c",
                                  "#9467bd", "#ff7f0e", "#8c564b"};
  return palette[index % (sizeof(palette) / sizeof(palette[0]))];
}

inline const char* metric_kind_dash(int kind) {
  switch (kind) {
    case 0: return "";       // clean: solid
    case 1: return "7 3";    // embed attack: dashed
    default: return "2 3";   // task attack: dotted
  }
}

inline const char* metric_kind_label(int kind) {
  switch (kind) {
    case 0: return "clean";
    case 1: return "embed attack";
    default: return "task attack";
  }
}

}  // namespace detail

// Robustness-evolution figure: one panel per task present in the trace,
// epoch on x, the task metric on y; line color encodes the dataset and line
// style the metric kind (clean solid, embed-attack dashed, task-attack
// dotted). Written as a self-contained SVG.
inline void emit_evolution_plot(const EvolutionTrace& trace, const std::string& path) {
  if (trace.empty()) throw InvalidInputError("evolution plot: trace must be non-empty");
  validate_trace(trace);

  std::vector<Task> tasks;
  for (Task t : {Task::Classification, Task::Segmentation, Task::Depth})
    for (const auto& p : trace)
      if (p.task == t) {
        tasks.push_back(t);
        break;
      }
  std::set<std::string> dataset_set;
  for (const auto& p : trace) dataset_set.insert(p.dataset);
  std::vector<std::string> datasets(dataset_set.begin(), dataset_set.end());

  const Real panel_w = 360.0, panel_h = 300.0;
  const Real ml = 54.0, mr = 16.0, mt = 34.0, mb = 88.0;
  const Real width = panel_w * tasks.size(), height = panel_h;

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                    detail::format_fixed(width, 0) + "\" height=\"" +
                    detail::format_fixed(height, 0) + "\" viewBox=\"0 0 " +
                    detail::format_fixed(width, 0) + " " + detail::format_fixed(height, 0) +
                    "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  for (size_t ti = 0; ti < tasks.size(); ++ti) {
    const Task task = tasks[ti];
    const Real x0 = ti * panel_w + ml, x1 = (ti + 1) * panel_w - mr;
    const Real y0 = mt, y1 = panel_h - mb;

    int64_t emin = 0, emax = 0;
    Real vmin = 0.0, vmax = 0.0;
    bool first = true;
    for (const auto& p : trace) {
      if (p.task != task) continue;
      for (Real v : {p.metric_clean, p.metric_embed_attack, p.metric_task_attack}) {
        if (first || v < vmin) vmin = v;
        if (first || v > vmax) vmax = v;
      }
      if (first || p.epoch < emin) emin = p.epoch;
      if (first || p.epoch > emax) emax = p.epoch;
      first = false;
    }
    if (emax == emin) ++emax;          // degenerate single-epoch domain
    if (vmax - vmin < 1e-12) vmax = vmin + 1.0;
    const Real pad = 0.05 * (vmax - vmin);
    vmin -= pad;
    vmax += pad;

    auto sx = [&](int64_t e) {
      return x0 + (x1 - x0) * static_cast<Real>(e - emin) / static_cast<Real>(emax - emin);
    };
    auto sy = [&](Real v) { return y1 - (y1 - y0) * (v - vmin) / (vmax - vmin); };

    svg += "<g class=\"panel\">\n";
    svg += "<text x=\"" + detail::format_fixed((x0 + x1) / 2, 1) + "\" y=\"" +
           detail::format_fixed(mt - 14.0, 1) + "\" text-anchor=\"middle\" font-weight=\"bold\">" +
           detail::task_section_title(task) + " (" + metric_name_for(task) + ")</text>\n";
    svg += "<line x1=\"" + detail::format_fixed(x0, 1) + "\" y1=\"" +
           detail::format_fixed(y1, 1) + "\" x2=\"" + detail::format_fixed(x1, 1) + "\" y2=\"" +
           detail::format_fixed(y1, 1) + "\" stroke=\"black\"/>\n";
    svg += "<line x1=\"" + detail::format_fixed(x0, 1) + "\" y1=\"" +
           detail::format_fixed(y0, 1) + "\" x2=\"" + detail::format_fixed(x0, 1) + "\" y2=\"" +
           detail::format_fixed(y1, 1) + "\" stroke=\"black\"/>\n";
    svg += "<text x=\"" + detail::format_fixed(x0 - 6.0, 1) + "\" y=\"" +
           detail::format_fixed(sy(vmin + pad), 1) + "\" text-anchor=\"end\">" +
           detail::format_fixed(vmin + pad, 2) + "</text>\n";
    svg += "<text x=\"" + detail::format_fixed(x0 - 6.0, 1) + "\" y=\"" +
           detail::format_fixed(sy(vmax - pad) + 4.0, 1) + "\" text-anchor=\"end\">" +
           detail::format_fixed(vmax - pad, 2) + "</text>\n";
    svg += "<text x=\"" + detail::format_fixed(x0, 1) + "\" y=\"" +
           detail::format_fixed(y1 + 16.0, 1) + "\" text-anchor=\"middle\">" +
           std::to_string(emin) + "</text>\n";
    svg += "<text x=\"" + detail::format_fixed(x1, 1) + "\" y=\"" +
           detail::format_fixed(y1 + 16.0, 1) + "\" text-anchor=\"middle\">" +
           std::to_string(emax) + "</text>\n";
    svg += "<text x=\"" + detail::format_fixed((x0 + x1) / 2, 1) + "\" y=\"" +
           detail::format_fixed(y1 + 30.0, 1) + "\" text-anchor=\"middle\">epoch</text>\n";

    for (size_t di = 0; di < datasets.size(); ++di) {
      std::vector<const EvolutionPoint*> series;
      for (const auto& p : trace)
        if (p.task == task && p.dataset == datasets[di]) series.push_back(&p);
      if (series.empty()) continue;
      std::sort(series.begin(), series.end(),
                [](const EvolutionPoint* a, const EvolutionPoint* b) {
                  return a->epoch < b->epoch;
                });
      for (int kind = 0; kind < 3; ++kind) {
        auto value_of = [&](const EvolutionPoint* p) {
          return kind == 0   ? p->metric_clean
                 : kind == 1 ? p->metric_embed_attack
                             : p->metric_task_attack;
        };
        std::string points;
        for (const auto* p : series) {
          if (!points.empty()) points += " ";
          points += detail::format_fixed(sx(p->epoch), 1) + "," +
                    detail::format_fixed(sy(value_of(p)), 1);
        }
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(detail::dataset_color(di)) +
               "\" stroke-width=\"1.5\"";
        if (*detail::metric_kind_dash(kind))
          svg += " stroke-dasharray=\"" + std::string(detail::metric_kind_dash(kind)) + "\"";
        svg += " points=\"" + points + "\"/>\n";
        for (const auto* p : series)
          svg += "<circle cx=\"" + detail::format_fixed(sx(p->epoch), 1) + "\" cy=\"" +
                 detail::format_fixed(sy(value_of(p)), 1) + "\" r=\"2\" fill=\"" +
                 detail::dataset_color(di) + "\"/>\n";
      }
    }

    // legend: line styles (metric kinds) then colors (datasets)
    Real ly = y1 + 46.0;
    for (int kind = 0; kind < 3; ++kind) {
      const Real lx = x0 + kind * 100.0;
      svg += "<line x1=\"" + detail::format_fixed(lx, 1) + "\" y1=\"" +
             detail::format_fixed(ly - 4.0, 1) + "\" x2=\"" + detail::format_fixed(lx + 26.0, 1) +
             "\" y2=\"" + detail::format_fixed(ly - 4.0, 1) + "\" stroke=\"black\"";
      if (*detail::metric_kind_dash(kind))
        svg += " stroke-dasharray=\"" + std::string(detail::metric_kind_dash(kind)) + "\"";
      svg += "/>\n";
      svg += "<text x=\"" + detail::format_fixed(lx + 30.0, 1) + "\" y=\"" +
             detail::format_fixed(ly, 1) + "\">" + detail::metric_kind_label(kind) + "</text>\n";
    }
    ly += 18.0;
    for (size_t di = 0; di < datasets.size(); ++di) {
      const Real lx = x0 + di * 100.0;
      svg += "<rect x=\"" + detail::format_fixed(lx, 1) + "\" y=\"" +
             detail::format_fixed(ly - 9.0, 1) + "\" width=\"10\" height=\"10\" fill=\"" +
             detail::dataset_color(di) + "\"/>\n";
      svg += "<text x=\"" + detail::format_fixed(lx + 14.0, 1) + "\" y=\"" +
             detail::format_fixed(ly, 1) + "\">" + datasets[di] + "</text>\n";
    }
    svg += "</g>\n";
  }
  svg += "</svg>\n";
  write_text_file(path, svg);
}

}  // namespace srb
