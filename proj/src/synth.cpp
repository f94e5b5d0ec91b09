#include "metaicl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>

#include "metaicl/error.hpp"
#include "metaicl/rng.hpp"

namespace metaicl {

namespace {

std::string task_name(const FamilySpec& spec, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "_%03zu", spec.first_index + i);
  const std::string prefix = spec.name_prefix.empty() ? std::string(to_string(spec.family)) : spec.name_prefix;
  return prefix + buf;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

Task make_mapping_task(const FamilySpec& spec, Rng& rng, std::string name) {
  const auto& labels = label_words();
  Task task;
  task.name = std::move(name);
  task.format = TaskFormat::classification;
  task.options.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(spec.num_options));

  auto symbols = sample_without_replacement(rng, spec.vocab_symbols, spec.num_options);
  auto binding = sample_without_replacement(rng, spec.num_options, spec.num_options);
  for (std::size_t e = 0; e < spec.examples_per_task; ++e) {
    std::vector<std::string> words;
    for (std::size_t d = 0; d + 1 < spec.input_len; ++d) words.push_back(symbol_name(symbols[uniform_index(rng, symbols.size())]));
    const std::size_t q = uniform_index(rng, spec.num_options);
    words.push_back("q: " + symbol_name(symbols[q]));
    task.examples.push_back({join_words(words), task.options[binding[q]], false});
  }
  return task;
}

Task make_extract_task(const FamilySpec& spec, Rng& rng, std::string name) {
  const auto& labels = label_words();
  Task task;
  task.name = std::move(name);
  task.format = TaskFormat::classification;
  task.options.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(spec.num_options));
  const std::size_t slot = spec.position ? *spec.position : uniform_index(rng, spec.input_len);
  for (std::size_t e = 0; e < spec.examples_per_task; ++e) {
    std::vector<std::string> words;
    for (std::size_t w = 0; w < spec.input_len; ++w) words.push_back(task.options[uniform_index(rng, spec.num_options)]);
    task.examples.push_back({join_words(words), words[slot], false});
  }
  return task;
}

Task make_majority_task(const FamilySpec& spec, Rng& rng, std::string name) {
  const auto& labels = label_words();
  Task task;
  task.name = std::move(name);
  task.format = TaskFormat::classification;
  auto picks = sample_without_replacement(rng, labels.size(), spec.num_options);
  std::sort(picks.begin(), picks.end());
  for (auto p : picks) task.options.push_back(labels[p]);

  for (std::size_t e = 0; e < spec.examples_per_task; ++e) {
    // Rejection keeps the draw uniform over tie-free sequences.
    for (;;) {
      std::vector<std::size_t> counts(spec.num_options, 0);
      std::vector<std::string> words;
      for (std::size_t w = 0; w < spec.input_len; ++w) {
        const std::size_t o = uniform_index(rng, spec.num_options);
        ++counts[o];
        words.push_back(task.options[o]);
      }
      const auto top = std::max_element(counts.begin(), counts.end());
      if (std::count(counts.begin(), counts.end(), *top) != 1) continue;
      task.examples.push_back({join_words(words), task.options[static_cast<std::size_t>(top - counts.begin())], false});
      break;
    }
  }
  return task;
}

// Probability that option i is the (unique) majority, over all count vectors
// with a unique maximum, weighted by their multinomial probability.
std::vector<double> majority_winner_distribution(std::size_t n, std::size_t len) {
  std::vector<double> log_fact(len + 1, 0.0);
  for (std::size_t i = 1; i <= len; ++i) log_fact[i] = log_fact[i - 1] + std::log(static_cast<double>(i));
  std::vector<double> mass(n, 0.0);
  std::vector<std::size_t> counts(n, 0);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t idx, std::size_t left) {
    if (idx + 1 == n) {
      counts[idx] = left;
      const auto top = std::max_element(counts.begin(), counts.end());
      if (std::count(counts.begin(), counts.end(), *top) != 1) return;
      double lw = log_fact[len] - static_cast<double>(len) * std::log(static_cast<double>(n));
      for (auto c : counts) lw -= log_fact[c];
      mass[static_cast<std::size_t>(top - counts.begin())] += std::exp(lw);
      return;
    }
    for (std::size_t c = 0; c <= left; ++c) {
      counts[idx] = c;
      rec(idx + 1, left - c);
    }
  };
  rec(0, len);
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  for (auto& m : mass) m /= total;
  return mass;
}

}  // namespace

std::string_view to_string(Family family) {
  switch (family) {
    case Family::mapping: return "mapping";
    case Family::extract: return "extract";
    case Family::majority: return "majority";
  }
  return "mapping";
}

Family parse_family(std::string_view text) {
  if (text == "mapping") return Family::mapping;
  if (text == "extract") return Family::extract;
  if (text == "majority") return Family::majority;
  throw ConfigError("unknown family '" + std::string(text) + "'");
}

const std::vector<std::string>& label_words() {
  static const std::vector<std::string> words = [] {
    std::vector<std::string> w;
    for (char c = 'A'; c <= 'Z'; ++c) w.emplace_back(1, c);
    return w;
  }();
  return words;
}

std::string symbol_name(std::size_t index) { return "s" + std::to_string(index); }

void FamilySpec::validate() const {
  if (num_options < 2) throw ConfigError("family spec: num_options must be at least 2");
  if (num_options > label_words().size()) {
    throw ConfigError("family spec: at most " + std::to_string(label_words().size()) + " options supported");
  }
  if (input_len < 1) throw ConfigError("family spec: input_len must be at least 1");
  if (examples_per_task < 1) throw ConfigError("family spec: examples_per_task must be at least 1");
  switch (family) {
    case Family::mapping:
      if (vocab_symbols < num_options) {
        throw ConfigError("family spec: mapping needs vocab_symbols >= num_options for a bijection");
      }
      break;
    case Family::extract:
      if (position && *position >= input_len) {
        throw ConfigError("family spec: extract position " + std::to_string(*position) +
                          " must be < input_len " + std::to_string(input_len));
      }
      break;
    case Family::majority:
      if (num_options == 2 && input_len % 2 == 0) {
        throw ConfigError("family spec: majority with 2 options needs an odd input_len");
      }
      if (input_len > 64) throw ConfigError("family spec: majority input_len above 64 is not supported");
      break;
  }
}

std::vector<Task> generate_family(const FamilySpec& spec) {
  spec.validate();
  std::vector<Task> tasks;
  tasks.reserve(spec.tasks);
  for (std::size_t i = 0; i < spec.tasks; ++i) {
    Rng rng(mix_seed({spec.seed, static_cast<std::uint64_t>(spec.family), spec.first_index + i}));
    switch (spec.family) {
      case Family::mapping: tasks.push_back(make_mapping_task(spec, rng, task_name(spec, i))); break;
      case Family::extract: tasks.push_back(make_extract_task(spec, rng, task_name(spec, i))); break;
      case Family::majority: tasks.push_back(make_majority_task(spec, rng, task_name(spec, i))); break;
    }
  }
  return tasks;
}

double family_chance_accuracy(const FamilySpec& spec) {
  spec.validate();
  switch (spec.family) {
    case Family::mapping:
      // Every symbol's label is uniform over bijections.
      return 1.0 / static_cast<double>(spec.num_options);
    case Family::extract: {
      // The extracted slot holds each option with equal probability.
      std::vector<double> p(spec.num_options, 1.0 / static_cast<double>(spec.num_options));
      return *std::max_element(p.begin(), p.end());
    }
    case Family::majority: {
      auto p = majority_winner_distribution(spec.num_options, spec.input_len);
      return *std::max_element(p.begin(), p.end());
    }
  }
  return 0.0;
}

GeneratedCorpus generate_benchmark(const BenchmarkSpec& spec) {
  GeneratedCorpus out;
  auto add = [&](FamilySpec fs, bool target, bool unseen) {
    for (auto& t : generate_family(fs)) {
      (target ? out.split.target : out.split.meta_train).push_back(t.name);
      if (unseen) out.split.unseen_domain.push_back(t.name);
      out.corpus.add(std::move(t));
    }
  };

  FamilySpec mapping;
  mapping.family = Family::mapping;
  mapping.vocab_symbols = spec.vocab_symbols;
  mapping.num_options = spec.num_options;
  mapping.input_len = 1;
  mapping.tasks = spec.mapping_train;
  mapping.examples_per_task = spec.train_examples;
  mapping.seed = spec.seed;
  add(mapping, false, false);
  mapping.first_index = spec.mapping_train;
  mapping.tasks = spec.mapping_target;
  mapping.examples_per_task = spec.target_examples;
  add(mapping, true, false);

  FamilySpec extract;
  extract.family = Family::extract;
  extract.num_options = spec.num_options;
  extract.input_len = spec.extract_len;
  extract.tasks = spec.extract_train;
  extract.examples_per_task = spec.train_examples;
  extract.seed = spec.seed;
  add(extract, false, false);
  extract.first_index = spec.extract_train;
  extract.tasks = spec.extract_target;
  extract.examples_per_task = spec.target_examples;
  add(extract, true, false);

  FamilySpec majority;
  majority.family = Family::majority;
  majority.num_options = spec.num_options;
  majority.input_len = spec.majority_len;
  majority.tasks = spec.majority_target;
  majority.examples_per_task = spec.target_examples;
  majority.seed = spec.seed;
  add(majority, true, true);

  out.split.max_train_examples_per_task = 16384;
  out.split.validate(out.corpus);
  return out;
}

std::string family_of(std::string_view task_name) {
  const auto pos = task_name.rfind('_');
  return std::string(pos == std::string_view::npos ? task_name : task_name.substr(0, pos));
}

}  // namespace metaicl
