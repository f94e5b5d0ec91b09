#include "metaicl/eval.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "metaicl/error.hpp"
#include "metaicl/rng.hpp"

namespace metaicl {

using nlohmann::json;

namespace {

void check_lengths(std::span<const std::string> gold, std::span<const std::string> pred) {
  if (gold.size() != pred.size()) {
    throw ConfigError(fmt::format("metric: {} gold labels vs {} predictions", gold.size(), pred.size()));
  }
  if (gold.empty()) throw ConfigError("metric: empty input");
}

}  // namespace

double macro_f1(std::span<const std::string> gold, std::span<const std::string> pred,
                std::span<const std::string> options) {
  check_lengths(gold, pred);
  double sum = 0.0;
  std::size_t classes = 0;
  for (const auto& c : options) {
    std::size_t tp = 0, n_gold = 0, n_pred = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      const bool g = gold[i] == c;
      const bool p = pred[i] == c;
      n_gold += g;
      n_pred += p;
      tp += g && p;
    }
    if (n_gold == 0 && n_pred == 0) continue;
    ++classes;
    // F1 = 2 tp / (|gold| + |pred|), zero when there are no hits.
    sum += tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(n_gold + n_pred);
  }
  return classes == 0 ? 0.0 : sum / static_cast<double>(classes);
}

double accuracy(std::span<const std::string> gold, std::span<const std::string> pred) {
  check_lengths(gold, pred);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += gold[i] == pred[i];
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

std::string_view metric_name(TaskFormat format) {
  return format == TaskFormat::classification ? "macro_f1" : "accuracy";
}

double task_metric(TaskFormat format, std::span<const std::string> gold, std::span<const std::string> pred,
                   std::span<const std::string> options) {
  return format == TaskFormat::classification ? macro_f1(gold, pred, options) : accuracy(gold, pred);
}

// --- Records ---------------------------------------------------------------------------

json to_json(const PredictionRecord& r) {
  return json{{"task", r.task},     {"seed", r.seed},   {"example_index", r.example_index},
              {"method", r.method}, {"scores", r.scores}, {"prediction", r.prediction},
              {"gold", r.gold},     {"correct", r.correct}};
}

PredictionRecord prediction_from_json(const json& j) {
  PredictionRecord r;
  r.task = j.at("task").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.example_index = j.at("example_index").get<std::size_t>();
  r.method = j.at("method").get<std::string>();
  r.scores = j.at("scores").get<std::vector<double>>();
  r.prediction = j.at("prediction").get<std::string>();
  r.gold = j.at("gold").get<std::string>();
  r.correct = j.at("correct").get<bool>();
  return r;
}

// --- Report ----------------------------------------------------------------------------

const TaskReport* EvalReport::find(std::string_view task) const {
  for (const auto& t : tasks) {
    if (t.task == task) return &t;
  }
  return nullptr;
}

namespace {

SubsetSummary summarize(const std::vector<const TaskReport*>& tasks) {
  SubsetSummary s;
  s.tasks = tasks.size();
  if (tasks.empty()) return s;
  for (const auto* t : tasks) {
    s.macro_mean += t->mean;
    s.macro_min += t->min;
    s.accuracy_mean += t->accuracy_mean;
  }
  const double n = static_cast<double>(tasks.size());
  s.macro_mean /= n;
  s.macro_min /= n;
  s.accuracy_mean /= n;
  return s;
}

json to_json(const SubsetSummary& s) {
  return json{{"tasks", s.tasks},
              {"macro_mean", s.macro_mean},
              {"macro_min", s.macro_min},
              {"accuracy_mean", s.accuracy_mean}};
}

}  // namespace

SubsetSummary EvalReport::subset(std::span<const std::string> names) const {
  std::vector<const TaskReport*> picked;
  for (const auto& n : names) {
    if (const auto* t = find(n)) picked.push_back(t);
  }
  return summarize(picked);
}

json to_json(const EvalReport& report) {
  json tasks = json::array();
  for (const auto& t : report.tasks) {
    json seeds = json::array();
    for (const auto& s : t.seeds) {
      seeds.push_back({{"seed", s.seed}, {"value", s.value}, {"accuracy", s.accuracy}, {"test_size", s.test_size}});
    }
    tasks.push_back({{"task", t.task},
                     {"format", to_string(t.format)},
                     {"metric", t.metric},
                     {"unseen_domain", t.unseen_domain},
                     {"seeds", seeds},
                     {"mean", t.mean},
                     {"min", t.min},
                     {"accuracy_mean", t.accuracy_mean},
                     {"accuracy_min", t.accuracy_min}});
  }
  json out{{"metadata", report.metadata}, {"tasks", tasks}, {"all", to_json(report.all)}};
  if (report.unseen) out["unseen_domain"] = to_json(*report.unseen);
  return out;
}

EvalReport fold_report(std::span<const PredictionRecord> records, std::span<const TaskInfo> tasks, json metadata) {
  std::map<std::string, const TaskInfo*> info;
  for (const auto& t : tasks) info[t.name] = &t;

  // task -> seed -> (gold, pred). Tasks follow `tasks`, seeds ascend, so the
  // report does not depend on record order.
  struct SeedPreds {
    std::uint64_t seed;
    std::vector<std::string> gold, pred;
  };
  std::map<std::string, std::vector<SeedPreds>> grouped;
  for (const auto& r : records) {
    auto it = info.find(r.task);
    if (it == info.end()) throw DataError("prediction for unknown task '" + r.task + "'");
    auto& seeds = grouped[r.task];
    auto s = std::find_if(seeds.begin(), seeds.end(), [&](const SeedPreds& p) { return p.seed == r.seed; });
    if (s == seeds.end()) s = seeds.insert(seeds.end(), SeedPreds{r.seed, {}, {}});
    s->gold.push_back(r.gold);
    s->pred.push_back(r.prediction);
  }

  EvalReport report;
  report.metadata = std::move(metadata);
  for (const auto& ti : tasks) {
    const std::string& name = ti.name;
    if (!grouped.count(name)) continue;
    auto& seed_preds = grouped.at(name);
    std::sort(seed_preds.begin(), seed_preds.end(),
              [](const SeedPreds& a, const SeedPreds& b) { return a.seed < b.seed; });
    TaskReport tr;
    tr.task = name;
    tr.format = ti.format;
    tr.metric = metric_name(ti.format);
    tr.unseen_domain = ti.unseen_domain;
    for (const auto& s : seed_preds) {
      SeedResult sr;
      sr.seed = s.seed;
      std::vector<std::string> seen;
      if (ti.options.empty()) {
        // Per-seed label set (replaced labels); equivalent under the exclusion rule.
        seen = s.gold;
        seen.insert(seen.end(), s.pred.begin(), s.pred.end());
        std::sort(seen.begin(), seen.end());
        seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
      }
      sr.value = task_metric(ti.format, s.gold, s.pred, ti.options.empty() ? seen : ti.options);
      sr.accuracy = accuracy(s.gold, s.pred);
      sr.test_size = s.gold.size();
      tr.seeds.push_back(sr);
    }
    double sum = 0.0, acc_sum = 0.0;
    tr.min = tr.seeds.front().value;
    tr.accuracy_min = tr.seeds.front().accuracy;
    for (const auto& s : tr.seeds) {
      sum += s.value;
      acc_sum += s.accuracy;
      tr.min = std::min(tr.min, s.value);
      tr.accuracy_min = std::min(tr.accuracy_min, s.accuracy);
    }
    tr.mean = sum / static_cast<double>(tr.seeds.size());
    tr.accuracy_mean = acc_sum / static_cast<double>(tr.seeds.size());
    report.tasks.push_back(std::move(tr));
  }
  std::vector<const TaskReport*> all, unseen;
  for (const auto& t : report.tasks) {
    all.push_back(&t);
    if (t.unseen_domain) unseen.push_back(&t);
  }
  report.all = summarize(all);
  if (!unseen.empty()) report.unseen = summarize(unseen);
  return report;
}

// --- Protocol --------------------------------------------------------------------------

void ProtocolConfig::validate() const {
  score.validate();
  if (seeds.empty()) throw ConfigError("protocol: no seeds");
  if (test_cap == 0) throw ConfigError("protocol: test_cap must be positive");
}

json to_json(const ProtocolConfig& c) {
  const BuildConfig& b = c.score.build;
  return json{{"method", to_string(c.score.method)},
              {"k", c.score.k},
              {"sep_io", b.sep_io},
              {"sep_ex", b.sep_ex},
              {"max_seq_len", b.max_seq_len},
              {"per_example_cap", b.per_example_cap},
              {"include_instruction", b.include_instruction},
              {"pmi_placeholder", c.score.pmi_placeholder},
              {"pmi_empty_input", c.score.pmi_empty_input},
              {"seeds", c.seeds},
              {"test_cap", c.test_cap},
              {"replace_labels", c.replace_labels},
              {"label_seed", c.label_seed},
              {"tasks", c.tasks}};
}

ProtocolConfig protocol_config_from_json(const json& j, ProtocolConfig c) {
  try {
    auto& b = c.score.build;
    if (j.contains("method")) c.score.method = parse_score_method(j.at("method").get<std::string>());
    if (j.contains("k")) c.score.k = j.at("k").get<std::size_t>();
    if (j.contains("sep_io")) b.sep_io = j.at("sep_io").get<std::string>();
    if (j.contains("sep_ex")) b.sep_ex = j.at("sep_ex").get<std::string>();
    if (j.contains("max_seq_len")) b.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    if (j.contains("per_example_cap")) b.per_example_cap = j.at("per_example_cap").get<std::size_t>();
    if (j.contains("include_instruction")) b.include_instruction = j.at("include_instruction").get<bool>();
    if (j.contains("pmi_placeholder")) c.score.pmi_placeholder = j.at("pmi_placeholder").get<std::string>();
    if (j.contains("pmi_empty_input")) c.score.pmi_empty_input = j.at("pmi_empty_input").get<bool>();
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("test_cap")) c.test_cap = j.at("test_cap").get<std::size_t>();
    if (j.contains("replace_labels")) c.replace_labels = j.at("replace_labels").get<bool>();
    if (j.contains("label_seed")) c.label_seed = j.at("label_seed").get<std::uint64_t>();
    if (j.contains("tasks")) c.tasks = j.at("tasks").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("eval config: ") + e.what());
  }
  return c;
}

ProtocolResult run_protocol(const ModelParams<float>& model, const Corpus& corpus, const Split& split,
                            const ProtocolConfig& cfg, const AdaptFn& adapt, json metadata) {
  cfg.validate();
  split.validate(corpus);
  const std::vector<std::string>& names = cfg.tasks.empty() ? split.target : cfg.tasks;
  const std::size_t k = cfg.score.k;

  ProtocolResult result;
  for (const auto& name : names) {
    const Task& base = corpus.at(name);
    if (base.options.empty()) throw ConfigError("protocol: target task '" + name + "' has no options");
    if (base.examples.size() < k + 1) {
      throw ConfigError(fmt::format("protocol: task '{}' has {} examples, needs k+1 = {}", name,
                                    base.examples.size(), k + 1));
    }
    result.task_info.push_back(TaskInfo{name, base.format, base.options, split.is_unseen(name)});
  }

  for (const auto& name : names) {
    const Task& base = corpus.at(name);
    for (auto seed : cfg.seeds) {
      const Task task =
          cfg.replace_labels ? replace_labels(base, mix_seed({cfg.label_seed, seed, 0x7e57ULL}), pseudo_words()) : base;
      const FewShotSet shots = sample_few_shot(task, k, seed);
      std::vector<bool> is_shot(task.examples.size(), false);
      for (auto i : shots.indices) is_shot[i] = true;
      std::vector<std::size_t> test_idx;
      std::vector<std::string> inputs;
      for (std::size_t i = 0; i < task.examples.size() && test_idx.size() < cfg.test_cap; ++i) {
        if (is_shot[i]) continue;
        test_idx.push_back(i);
        inputs.push_back(task.examples[i].input);
      }

      ScoreConfig sc = cfg.score;
      if (sc.build.include_instruction && task.instruction) sc.build.instruction = *task.instruction;
      std::optional<ModelParams<float>> adapted;
      if (adapt) adapted = adapt(task, shots);
      const ModelParams<float>& m = adapted ? *adapted : model;

      auto scored = score_many(m, shots, inputs, task.options, sc);
      for (std::size_t j = 0; j < test_idx.size(); ++j) {
        PredictionRecord r;
        r.task = name;
        r.seed = seed;
        r.example_index = test_idx[j];
        r.method = std::string(to_string(sc.method));
        r.scores = std::move(scored[j].scores);
        r.prediction = scored[j].predicted();
        r.gold = task.examples[test_idx[j]].output;
        r.correct = r.prediction == r.gold;
        result.predictions.push_back(std::move(r));
      }
    }
  }

  // Replaced labels differ per seed, so the dump carries no fixed option list.
  if (cfg.replace_labels) {
    for (auto& ti : result.task_info) ti.options.clear();
  }
  metadata["protocol"] = to_json(cfg);
  result.report = fold_report(result.predictions, result.task_info, std::move(metadata));
  return result;
}

// --- Serialization ---------------------------------------------------------------------

std::string serialize_report(const EvalReport& report) { return to_json(report).dump(2) + "\n"; }

std::string report_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "# " << report.metadata.dump() << "\n";
  out << "task,format,metric,unseen_domain,seed,value,accuracy,test_size\n";
  for (const auto& t : report.tasks) {
    for (const auto& s : t.seeds) {
      out << fmt::format("{},{},{},{},{},{:.17g},{:.17g},{}\n", t.task, to_string(t.format), t.metric,
                         t.unseen_domain ? 1 : 0, s.seed, s.value, s.accuracy, s.test_size);
    }
  }
  return out.str();
}

std::string serialize_dump(const ProtocolResult& result) {
  json tasks = json::array();
  for (const auto& t : result.task_info) {
    tasks.push_back({{"name", t.name},
                     {"format", to_string(t.format)},
                     {"options", t.options},
                     {"unseen_domain", t.unseen_domain}});
  }
  std::string out = json{{"header", {{"metadata", result.report.metadata}, {"tasks", tasks}}}}.dump() + "\n";
  for (const auto& r : result.predictions) out += to_json(r).dump() + "\n";
  return out;
}

Dump parse_dump(std::string_view jsonl) {
  Dump dump;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < jsonl.size()) {
    std::size_t end = jsonl.find('\n', pos);
    if (end == std::string_view::npos) end = jsonl.size();
    const std::string_view line = jsonl.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const json j = json::parse(line);
      if (line_no == 1) {
        dump.header = j.at("header");
        for (const auto& t : dump.header.at("tasks")) {
          dump.tasks.push_back(TaskInfo{t.at("name").get<std::string>(),
                                        parse_task_format(t.at("format").get<std::string>()),
                                        t.at("options").get<std::vector<std::string>>(),
                                        t.at("unseen_domain").get<bool>()});
        }
      } else {
        dump.records.push_back(prediction_from_json(j));
      }
    } catch (const json::exception& e) {
      throw DataError(fmt::format("prediction dump line {}: {}", line_no, e.what()));
    }
  }
  if (line_no == 0) throw DataError("prediction dump is empty");
  return dump;
}

EvalReport recompute_from_dump(const Dump& dump) {
  return fold_report(dump.records, dump.tasks, dump.header.at("metadata"));
}

}  // namespace metaicl
