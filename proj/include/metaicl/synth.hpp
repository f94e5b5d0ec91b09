#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "metaicl/corpus.hpp"

namespace metaicl {

// mapping:  label binding. Each task draws `num_options` symbols and binds
//           them to the shared label words with a fresh bijection.
// extract:  positional induction. Output is the word at a task-specific slot.
// majority: counting. Output is the most frequent word of the input.
enum class Family { mapping, extract, majority };

std::string_view to_string(Family family);
Family parse_family(std::string_view text);

struct FamilySpec {
  Family family = Family::mapping;
  // Mapping symbols "s0".."s{m-1}". Equal to num_options gives a bijection over
  // all of them; a larger pool draws num_options symbols per task.
  std::size_t vocab_symbols = 4;
  std::size_t num_options = 4;
  std::size_t input_len = 1;
  std::size_t tasks = 8;
  std::size_t examples_per_task = 64;
  std::uint64_t seed = 7;
  // extract only: fixes the slot for every task; otherwise drawn per task.
  std::optional<std::size_t> position;
  // Task i is named "<prefix>_<first_index + i>" and seeded by that index, so
  // disjoint index ranges of one family yield disjoint, reproducible tasks.
  std::string name_prefix;
  std::size_t first_index = 0;

  void validate() const;  // throws ConfigError
};

// Uppercase single-letter label words ("A".."Z").
const std::vector<std::string>& label_words();

std::string symbol_name(std::size_t index);  // "s<index>"

std::vector<Task> generate_family(const FamilySpec& spec);

// Accuracy of always predicting the most frequent option under the
// generator's distribution (computed exactly, not sampled).
double family_chance_accuracy(const FamilySpec& spec);

// The default mixed corpus: mapping + extract meta-training tasks, held-out
// tasks of both families, and the majority family as an unseen domain.
struct BenchmarkSpec {
  std::size_t mapping_train = 64;
  std::size_t mapping_target = 8;
  std::size_t extract_train = 16;
  std::size_t extract_target = 4;
  std::size_t majority_target = 8;
  std::size_t num_options = 4;
  std::size_t vocab_symbols = 4;
  std::size_t extract_len = 5;
  std::size_t majority_len = 5;
  std::size_t train_examples = 256;
  std::size_t target_examples = 64;
  std::uint64_t seed = 7;
};

struct GeneratedCorpus {
  Corpus corpus;
  Split split;
};

GeneratedCorpus generate_benchmark(const BenchmarkSpec& spec);

// Family of a generated task name ("mapping_012" -> "mapping").
std::string family_of(std::string_view task_name);

}  // namespace metaicl
