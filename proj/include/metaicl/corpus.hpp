#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace metaicl {

struct Example {
  std::string input;
  std::string output;
  // Extractive meta-training example: output must occur verbatim in input.
  bool answer_span_required = false;

  bool operator==(const Example&) const = default;
};

enum class TaskFormat { classification, multichoice, freeform };

std::string_view to_string(TaskFormat format);
TaskFormat parse_task_format(std::string_view text);

struct Task {
  std::string name;
  std::vector<Example> examples;
  // Candidate set; empty only for free-form meta-training tasks.
  std::vector<std::string> options;
  TaskFormat format = TaskFormat::freeform;
  std::optional<std::string> instruction;

  bool operator==(const Task&) const = default;

  // Throws DataError describing the first violated invariant.
  void validate() const;
  bool has_option(std::string_view label) const;
};

// Tasks in insertion order with lookup by name. Immutable once loaded.
class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<Task> tasks);

  void add(Task task);
  const Task* find(std::string_view name) const;
  const Task& at(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }

  const std::vector<Task>& tasks() const { return tasks_; }
  std::size_t size() const { return tasks_.size(); }
  bool empty() const { return tasks_.empty(); }
  auto begin() const { return tasks_.begin(); }
  auto end() const { return tasks_.end(); }

  bool operator==(const Corpus& other) const { return tasks_ == other.tasks_; }

 private:
  std::vector<Task> tasks_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Split {
  std::vector<std::string> meta_train;
  std::vector<std::string> target;
  std::size_t max_train_examples_per_task = 16384;
  // Target tasks whose domain overlaps no meta-training task.
  std::vector<std::string> unseen_domain;

  bool operator==(const Split&) const = default;

  void validate(const Corpus& corpus) const;
  bool is_unseen(std::string_view task) const;
};

struct FewShotSet {
  std::string task;
  std::uint64_t seed = 0;
  std::vector<std::size_t> indices;  // positions in task.examples
  std::vector<Example> shots;
};

// --- JSONL / JSON formats ---------------------------------------------------

// Parses one JSONL stream; `source` names it in error messages.
Corpus parse_corpus(std::string_view jsonl, std::string_view source = "<memory>");
// Accepts a single .jsonl file or a directory of them (read in name order).
Corpus load_corpus(const std::filesystem::path& path);
std::string serialize_corpus(const Corpus& corpus);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
// FNV-1a of the canonical serialization, hex encoded.
std::string corpus_hash(const Corpus& corpus);

Split parse_split(std::string_view json_text);
Split load_split(const std::filesystem::path& path);
std::string serialize_split(const Split& split);
void save_split(const Split& split, const std::filesystem::path& path);

// --- Sampling ----------------------------------------------------------------

// Seed of the permutation used to draw shots for (task, seed).
std::uint64_t shot_stream_seed(std::string_view task_name, std::uint64_t seed);

// Uniform k-subset without replacement, no label balancing. Deterministic in
// (task.name, seed, k); the draw for k is a prefix of the draw for any k' > k.
FewShotSet sample_few_shot(const Task& task, std::size_t k, std::uint64_t seed);

// --- Label replacement -------------------------------------------------------

// Deterministic list of 2,048 distinct lowercase pseudo-words.
const std::vector<std::string>& pseudo_words();

struct LabelMapping {
  std::vector<std::string> from;
  std::vector<std::string> to;

  std::optional<std::string_view> lookup(std::string_view label) const;
  LabelMapping inverse() const;
  Task apply(const Task& task) const;
  Example apply(const Example& example) const;
};

LabelMapping make_label_mapping(std::span<const std::string> options, std::uint64_t seed,
                                std::span<const std::string> word_list);

// Maps each option (and every output equal to it) to a distinct random word.
Task replace_labels(const Task& task, std::uint64_t seed, std::span<const std::string> word_list);

}  // namespace metaicl
