#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaicl/corpus.hpp"
#include "metaicl/model.hpp"
#include "metaicl/scorer.hpp"

namespace metaicl {

// Unweighted mean of per-class F1 over `options`. Classes that occur in
// neither gold nor pred are left out of the mean.
double macro_f1(std::span<const std::string> gold, std::span<const std::string> pred,
                std::span<const std::string> options);
double accuracy(std::span<const std::string> gold, std::span<const std::string> pred);

// "macro_f1" for classification tasks, "accuracy" otherwise.
std::string_view metric_name(TaskFormat format);
double task_metric(TaskFormat format, std::span<const std::string> gold, std::span<const std::string> pred,
                   std::span<const std::string> options);

inline const std::vector<std::uint64_t>& protocol_seeds() {
  static const std::vector<std::uint64_t> seeds{100, 13, 21, 42, 87};
  return seeds;
}

struct PredictionRecord {
  std::string task;
  std::uint64_t seed = 0;
  std::size_t example_index = 0;
  std::string method;
  std::vector<double> scores;
  std::string prediction;
  std::string gold;
  bool correct = false;
};

nlohmann::json to_json(const PredictionRecord& r);
PredictionRecord prediction_from_json(const nlohmann::json& j);

struct SeedResult {
  std::uint64_t seed = 0;
  double value = 0.0;     // the task's primary metric
  double accuracy = 0.0;  // always reported
  std::size_t test_size = 0;
};

struct TaskReport {
  std::string task;
  TaskFormat format = TaskFormat::classification;
  std::string metric;
  bool unseen_domain = false;
  std::vector<SeedResult> seeds;
  double mean = 0.0;
  double min = 0.0;
  double accuracy_mean = 0.0;
  double accuracy_min = 0.0;
};

struct SubsetSummary {
  std::size_t tasks = 0;
  double macro_mean = 0.0;
  double macro_min = 0.0;
  double accuracy_mean = 0.0;
};

struct EvalReport {
  std::vector<TaskReport> tasks;
  SubsetSummary all;
  std::optional<SubsetSummary> unseen;
  nlohmann::json metadata = nlohmann::json::object();

  const TaskReport* find(std::string_view task) const;
  // Summary over the named tasks only.
  SubsetSummary subset(std::span<const std::string> names) const;
};

nlohmann::json to_json(const EvalReport& report);

// What the report needs to know about a task besides its predictions.
struct TaskInfo {
  std::string name;
  TaskFormat format = TaskFormat::classification;
  // Empty when labels vary per seed; the metric then uses the labels seen.
  std::vector<std::string> options;
  bool unseen_domain = false;
};

// Folds predictions into per-seed metrics, per-task mean/min, and macro
// averages. Tasks and seeds keep their first-seen order.
EvalReport fold_report(std::span<const PredictionRecord> records, std::span<const TaskInfo> tasks,
                       nlohmann::json metadata = nlohmann::json::object());

struct ProtocolConfig {
  ScoreConfig score;
  std::vector<std::uint64_t> seeds = protocol_seeds();
  std::size_t test_cap = 1000;
  // Evaluate on tasks whose labels are swapped for random words per seed.
  bool replace_labels = false;
  std::uint64_t label_seed = 0;
  // Restrict to these target tasks; all targets when empty.
  std::vector<std::string> tasks;

  void validate() const;
};

nlohmann::json to_json(const ProtocolConfig& cfg);
ProtocolConfig protocol_config_from_json(const nlohmann::json& j, ProtocolConfig base = {});

// Model adaptation per (task, shot set); used by the fine-tuning baselines.
using AdaptFn = std::function<ModelParams<float>(const Task&, const FewShotSet&)>;

struct ProtocolResult {
  EvalReport report;
  std::vector<PredictionRecord> predictions;
  std::vector<TaskInfo> task_info;
};

// For each target task and seed: draw k shots once, score every remaining
// example (up to test_cap, in index order), fold metrics.
ProtocolResult run_protocol(const ModelParams<float>& model, const Corpus& corpus, const Split& split,
                            const ProtocolConfig& cfg, const AdaptFn& adapt = {},
                            nlohmann::json metadata = nlohmann::json::object());

// Report JSON, flat CSV (one row per task x seed, '#' header lines), and the
// prediction dump (header record, then one record per prediction).
std::string serialize_report(const EvalReport& report);
std::string report_csv(const EvalReport& report);
std::string serialize_dump(const ProtocolResult& result);

struct Dump {
  nlohmann::json header;
  std::vector<TaskInfo> tasks;
  std::vector<PredictionRecord> records;
};

Dump parse_dump(std::string_view jsonl);
EvalReport recompute_from_dump(const Dump& dump);

}  // namespace metaicl
