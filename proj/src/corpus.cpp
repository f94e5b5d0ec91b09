#include "metaicl/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "metaicl/error.hpp"
#include "metaicl/io.hpp"
#include "metaicl/rng.hpp"

namespace metaicl {

using nlohmann::json;

namespace {

bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

std::string read_text_field(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw DataError(where + ": missing field '" + key + "'");
  if (it->is_string()) return it->get<std::string>();
  // Multi-field inputs are joined with a single space.
  if (it->is_array() && std::string_view(key) == "input") {
    std::string joined;
    for (const auto& part : *it) {
      if (!part.is_string()) throw DataError(where + ": input array must contain strings");
      if (!joined.empty()) joined.push_back(' ');
      joined += part.get<std::string>();
    }
    return joined;
  }
  throw DataError(where + ": field '" + key + "' must be a string");
}

struct TaskBuilder {
  Task task;
  bool format_explicit = false;
  std::size_t first_line = 0;
};

}  // namespace

std::string_view to_string(TaskFormat format) {
  switch (format) {
    case TaskFormat::classification: return "classification";
    case TaskFormat::multichoice: return "multichoice";
    case TaskFormat::freeform: return "freeform";
  }
  return "freeform";
}

TaskFormat parse_task_format(std::string_view text) {
  if (text == "classification") return TaskFormat::classification;
  if (text == "multichoice") return TaskFormat::multichoice;
  if (text == "freeform") return TaskFormat::freeform;
  throw DataError("unknown task format '" + std::string(text) + "'");
}

bool Task::has_option(std::string_view label) const {
  return std::find(options.begin(), options.end(), label) != options.end();
}

void Task::validate() const {
  if (name.empty()) throw DataError("task with empty name");
  std::set<std::string_view> seen;
  for (const auto& o : options) {
    if (o.empty()) throw DataError("task '" + name + "': empty option");
    if (!seen.insert(o).second) throw DataError("task '" + name + "': duplicate option '" + o + "'");
  }
  if (format != TaskFormat::freeform && options.empty()) {
    throw DataError("task '" + name + "': format " + std::string(to_string(format)) + " requires options");
  }
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    const std::string where = "task '" + name + "' example " + std::to_string(i);
    if (is_blank(ex.input)) throw DataError(where + ": empty input");
    if (ex.output.empty()) throw DataError(where + ": empty output");
    if (ex.answer_span_required && ex.input.find(ex.output) == std::string::npos) {
      throw DataError(where + ": answer_span_required but output does not occur in input");
    }
    if (format != TaskFormat::freeform && !has_option(ex.output)) {
      throw DataError(where + ": output '" + ex.output + "' is not among the options");
    }
  }
}

Corpus::Corpus(std::vector<Task> tasks) {
  for (auto& t : tasks) add(std::move(t));
}

void Corpus::add(Task task) {
  task.validate();
  if (index_.count(task.name)) throw DataError("duplicate task name '" + task.name + "'");
  index_.emplace(task.name, tasks_.size());
  tasks_.push_back(std::move(task));
}

const Task* Corpus::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &tasks_[it->second];
}

const Task& Corpus::at(std::string_view name) const {
  const Task* t = find(name);
  if (!t) throw DataError("unknown task '" + std::string(name) + "'");
  return *t;
}

void Split::validate(const Corpus& corpus) const {
  std::set<std::string_view> train(meta_train.begin(), meta_train.end());
  if (train.size() != meta_train.size()) throw DataError("split: duplicate meta_train task");
  std::set<std::string_view> tgt(target.begin(), target.end());
  if (tgt.size() != target.size()) throw DataError("split: duplicate target task");
  for (const auto& name : meta_train) {
    if (!corpus.contains(name)) throw DataError("split: meta_train task '" + name + "' not in corpus");
  }
  for (const auto& name : target) {
    if (!corpus.contains(name)) throw DataError("split: target task '" + name + "' not in corpus");
    if (train.count(name)) throw DataError("split: task '" + name + "' is both meta_train and target");
    if (corpus.at(name).format == TaskFormat::freeform) {
      throw DataError("split: freeform task '" + name + "' cannot be a target");
    }
  }
  for (const auto& name : unseen_domain) {
    if (!tgt.count(name)) throw DataError("split: unseen_domain task '" + name + "' is not a target");
  }
  if (max_train_examples_per_task == 0) throw DataError("split: max_train_examples_per_task must be positive");
}

bool Split::is_unseen(std::string_view task) const {
  return std::find(unseen_domain.begin(), unseen_domain.end(), task) != unseen_domain.end();
}

// --- JSONL ---------------------------------------------------------------------

Corpus parse_corpus(std::string_view jsonl, std::string_view source) {
  std::vector<TaskBuilder> builders;
  std::unordered_map<std::string, std::size_t> by_name;

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= jsonl.size()) {
    std::size_t end = jsonl.find('\n', pos);
    if (end == std::string_view::npos) end = jsonl.size();
    std::string_view line = jsonl.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (is_blank(line)) {
      if (end == jsonl.size()) break;
      continue;
    }
    const std::string where = std::string(source) + ":" + std::to_string(line_no);
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!obj.is_object()) throw DataError(where + ": expected a JSON object");

    const std::string name = read_text_field(obj, "task", where);
    Example ex;
    ex.input = read_text_field(obj, "input", where);
    ex.output = read_text_field(obj, "output", where);
    if (auto it = obj.find("answer_span_required"); it != obj.end()) {
      if (!it->is_boolean()) throw DataError(where + ": answer_span_required must be a boolean");
      ex.answer_span_required = it->get<bool>();
    }
    std::vector<std::string> options;
    if (auto it = obj.find("options"); it != obj.end()) {
      if (!it->is_array()) throw DataError(where + ": options must be an array");
      for (const auto& o : *it) {
        if (!o.is_string()) throw DataError(where + ": options must be strings");
        options.push_back(o.get<std::string>());
      }
    }
    std::optional<std::string> instruction;
    if (auto it = obj.find("instruction"); it != obj.end() && !it->is_null()) {
      instruction = read_text_field(obj, "instruction", where);
    }
    std::optional<TaskFormat> format;
    if (auto it = obj.find("format"); it != obj.end()) {
      if (!it->is_string()) throw DataError(where + ": format must be a string");
      try {
        format = parse_task_format(it->get<std::string>());
      } catch (const DataError& e) {
        throw DataError(where + ": " + e.what());
      }
    }

    auto [it, inserted] = by_name.emplace(name, builders.size());
    if (inserted) {
      TaskBuilder b;
      b.task.name = name;
      b.task.options = options;
      b.task.instruction = instruction;
      b.task.format = format.value_or(options.empty() ? TaskFormat::freeform : TaskFormat::classification);
      b.format_explicit = format.has_value();
      b.first_line = line_no;
      builders.push_back(std::move(b));
    }
    TaskBuilder& b = builders[it->second];
    const std::string task_where = where + " (task '" + name + "')";
    if (b.task.options != options) throw DataError(task_where + ": options differ from earlier lines of this task");
    if (b.task.instruction != instruction) throw DataError(task_where + ": instruction differs from earlier lines");
    if (format && *format != b.task.format) throw DataError(task_where + ": format differs from earlier lines");
    if (is_blank(ex.input)) throw DataError(task_where + ": empty input");
    if (ex.output.empty()) throw DataError(task_where + ": empty output");
    if (ex.answer_span_required && ex.input.find(ex.output) == std::string::npos) {
      throw DataError(task_where + ": answer_span_required but output not found in input");
    }
    if (b.task.format != TaskFormat::freeform && !b.task.has_option(ex.output)) {
      throw DataError(task_where + ": output '" + ex.output + "' is not among the options");
    }
    b.task.examples.push_back(std::move(ex));
  }

  Corpus corpus;
  for (auto& b : builders) {
    try {
      corpus.add(std::move(b.task));
    } catch (const DataError& e) {
      throw DataError(std::string(source) + ":" + std::to_string(b.first_line) + ": " + e.what());
    }
  }
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".jsonl") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no .jsonl files in " + path.string());
    // Tasks may not span files; parse each separately then merge.
    Corpus merged;
    for (const auto& f : files) {
      Corpus part = parse_corpus(read_file(f), f.string());
      for (const auto& t : part) merged.add(t);
    }
    return merged;
  }
  return parse_corpus(read_file(path), path.string());
}

std::string serialize_corpus(const Corpus& corpus) {
  std::string out;
  for (const auto& task : corpus) {
    for (const auto& ex : task.examples) {
      json obj = json::object();
      obj["task"] = task.name;
      obj["input"] = ex.input;
      obj["output"] = ex.output;
      if (!task.options.empty()) obj["options"] = task.options;
      obj["format"] = to_string(task.format);
      if (task.instruction) obj["instruction"] = *task.instruction;
      if (ex.answer_span_required) obj["answer_span_required"] = true;
      out += obj.dump();
      out.push_back('\n');
    }
  }
  return out;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_corpus(corpus));
}

std::string corpus_hash(const Corpus& corpus) { return hex64(fnv1a64(serialize_corpus(corpus))); }

Split parse_split(std::string_view json_text) {
  json obj;
  try {
    obj = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("split: malformed JSON (") + e.what() + ")");
  }
  Split split;
  try {
    split.meta_train = obj.at("meta_train").get<std::vector<std::string>>();
    split.target = obj.at("target").get<std::vector<std::string>>();
    if (obj.contains("max_train_examples_per_task")) {
      split.max_train_examples_per_task = obj.at("max_train_examples_per_task").get<std::size_t>();
    }
    if (obj.contains("unseen_domain")) split.unseen_domain = obj.at("unseen_domain").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("split: ") + e.what());
  }
  return split;
}

Split load_split(const std::filesystem::path& path) { return parse_split(read_file(path)); }

std::string serialize_split(const Split& split) {
  json obj;
  obj["meta_train"] = split.meta_train;
  obj["target"] = split.target;
  obj["max_train_examples_per_task"] = split.max_train_examples_per_task;
  obj["unseen_domain"] = split.unseen_domain;
  return obj.dump(2) + "\n";
}

void save_split(const Split& split, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_split(split));
}

// --- Sampling --------------------------------------------------------------------

std::uint64_t shot_stream_seed(std::string_view task_name, std::uint64_t seed) {
  return mix_seed({fnv1a64(task_name), seed, 0x5107ULL});
}

FewShotSet sample_few_shot(const Task& task, std::size_t k, std::uint64_t seed) {
  if (k > task.examples.size()) {
    throw ConfigError("sample_few_shot: k=" + std::to_string(k) + " exceeds the " +
                      std::to_string(task.examples.size()) + " examples of task '" + task.name + "'");
  }
  FewShotSet set;
  set.task = task.name;
  set.seed = seed;
  Rng rng(shot_stream_seed(task.name, seed));
  set.indices = sample_without_replacement(rng, task.examples.size(), k);
  set.shots.reserve(k);
  for (auto i : set.indices) set.shots.push_back(task.examples[i]);
  return set;
}

// --- Label replacement ------------------------------------------------------------

const std::vector<std::string>& pseudo_words() {
  static const std::vector<std::string> words = [] {
    static constexpr std::string_view kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                                   "s", "t", "v", "z", "br", "dr", "gl", "pl", "st", "tr"};
    static constexpr std::string_view kVowels[] = {"a", "e", "i", "o", "u"};
    std::vector<std::string> syllables;
    for (auto c : kOnsets)
      for (auto v : kVowels) syllables.push_back(std::string(c) + std::string(v));
    std::vector<std::string> all;
    all.reserve(syllables.size() * syllables.size());
    for (const auto& a : syllables)
      for (const auto& b : syllables) all.push_back(a + b);
    Rng rng(0x3ab3e1ULL);
    auto picks = sample_without_replacement(rng, all.size(), 2048);
    std::vector<std::string> out;
    out.reserve(picks.size());
    for (auto i : picks) out.push_back(all[i]);
    return out;
  }();
  return words;
}

std::optional<std::string_view> LabelMapping::lookup(std::string_view label) const {
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i] == label) return to[i];
  }
  return std::nullopt;
}

LabelMapping LabelMapping::inverse() const { return LabelMapping{to, from}; }

Example LabelMapping::apply(const Example& example) const {
  Example out = example;
  if (auto mapped = lookup(example.output)) out.output = std::string(*mapped);
  return out;
}

Task LabelMapping::apply(const Task& task) const {
  Task out = task;
  for (auto& o : out.options) {
    if (auto mapped = lookup(o)) o = std::string(*mapped);
  }
  for (auto& ex : out.examples) ex = apply(ex);
  return out;
}

LabelMapping make_label_mapping(std::span<const std::string> options, std::uint64_t seed,
                                std::span<const std::string> word_list) {
  if (options.empty()) throw ConfigError("replace_labels: task has no options");
  if (word_list.size() < options.size()) {
    throw ConfigError("replace_labels: word list (" + std::to_string(word_list.size()) + ") smaller than options (" +
                      std::to_string(options.size()) + ")");
  }
  Rng rng(mix_seed({seed, 0x1abe1ULL}));
  auto picks = sample_without_replacement(rng, word_list.size(), options.size());
  LabelMapping mapping;
  for (std::size_t i = 0; i < options.size(); ++i) {
    mapping.from.push_back(options[i]);
    mapping.to.push_back(word_list[picks[i]]);
  }
  std::set<std::string_view> distinct(mapping.to.begin(), mapping.to.end());
  if (distinct.size() != mapping.to.size()) throw ConfigError("replace_labels: word list contains duplicates");
  return mapping;
}

Task replace_labels(const Task& task, std::uint64_t seed, std::span<const std::string> word_list) {
  return make_label_mapping(task.options, seed, word_list).apply(task);
}

}  // namespace metaicl
